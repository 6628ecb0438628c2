"""Run the denoising trend experiments and print their headline quantities.

Three trainings share one synthetic dataset and one seed: the full recipe,
denoising disabled, and character sliding disabled. The script reports

  * mean matching instability over the final three snapshot intervals for
    the full and no-denoising runs (the full run should sit strictly lower),
  * the first step at which the full run's end-to-end F1 reaches the
    no-denoising run's final value (should land well inside the budget),
  * final end-to-end F1 of all three runs (sliding off should cost F1).

Use --quick for a cheap shakedown; the defaults are the real experiment.
"""

import argparse
import json
import time
from pathlib import Path

from denospot.synth import write_dataset
from denospot.train import is_trace, train_run, trend_scene_spec, trend_train_config

RUNS = {
    "full": {},
    "no_dn": {"use_dn": False},
    "no_mcs": {"use_mcs": False},
}


def final_window_mean(rows, intervals=3):
    tail = rows[-intervals:]
    return sum(r["is_mean"] for r in tail) / len(tail)


def eval_curve(run_dir):
    rows = []
    with open(Path(run_dir) / "eval_trace.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rows.append(json.loads(line))
    return rows


def first_step_reaching(rows, level):
    for row in rows:
        if row["e2e_f1"] >= level:
            return row["step"]
    return None


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="trends", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--snapshot-interval", type=int, default=250)
    ap.add_argument("--images", type=int, default=100)
    ap.add_argument("--eval-images", type=int, default=20)
    ap.add_argument("--quick", action="store_true", help="tiny budgets for a shakedown")
    ap.add_argument("--only", choices=sorted(RUNS), help="run a single configuration")
    args = ap.parse_args()
    if args.quick:
        args.steps, args.snapshot_interval = 600, 100
        args.images, args.eval_images = 30, 10

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = trend_scene_spec(seed=args.seed)
    train_path = out / "train.jsonl"
    eval_path = out / "eval.jsonl"
    write_dataset(train_path, spec, args.images, start_index=0)
    write_dataset(eval_path, spec, args.eval_images, start_index=1000)

    summary = {"steps": args.steps, "seed": args.seed}
    names = [args.only] if args.only else list(RUNS)
    for name in names:
        cfg = trend_train_config(
            seed=args.seed,
            steps=args.steps,
            snapshot_interval=args.snapshot_interval,
            **RUNS[name],
        )
        t0 = time.monotonic()
        result = train_run(cfg, train_path, eval_path, out / name)
        elapsed = time.monotonic() - t0
        curve = eval_curve(out / name)
        summary[name] = {
            "final_eval": result["final_eval"],
            "seconds": round(elapsed, 1),
            "e2e_f1_curve": [(r["step"], round(r["e2e_f1"], 4)) for r in curve],
        }
        print(f"[{name}] {elapsed:.0f}s final {result['final_eval']}")

    for name in names:
        if name == "no_mcs":
            continue
        rows = is_trace(out / name / "snapshots")
        (out / name / "is_trace.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
        )
        summary[name]["is_final3_mean"] = final_window_mean(rows)
        summary[name]["is_max"] = max(r["is_max"] for r in rows)
        print(f"[{name}] IS final-3 mean {summary[name]['is_final3_mean']:.3f} "
              f"max {summary[name]['is_max']}")

    if not args.only:
        target = summary["no_dn"]["final_eval"]["e2e_f1"]
        reach = first_step_reaching(eval_curve(out / "full"), target)
        summary["full_reaches_no_dn_final_at"] = reach
        print(
            "instability: full"
            f" {summary['full']['is_final3_mean']:.3f}"
            f" vs no_dn {summary['no_dn']['is_final3_mean']:.3f}"
        )
        print(
            f"e2e F1: full {summary['full']['final_eval']['e2e_f1']:.4f}"
            f" no_dn {target:.4f}"
            f" no_mcs {summary['no_mcs']['final_eval']['e2e_f1']:.4f}"
        )
        print(f"full reaches no_dn final F1 at step {reach} of {args.steps}")

    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
