"""Desk-scale training harness and offline evaluation.

One optimizer step consumes one image: a fresh denoising batch is drawn for
it (unless ablated away), the decoder runs over [denoising | matching] rows,
and both loss parts are summed. Every snapshot_interval steps the harness
dumps the matching part's scores and center points for every training image
(enough to recompute the assignment offline) and appends an end-to-end
evaluation row for the held-out images.

Ablation routing mirrors the familiar toggle set: dn off drops the whole
denoising part, bcp off noises sampled points instead of control points,
mcs off left-aligns the transcript instead of sliding it, bct off zeroes the
negative-part text weight. The last three presuppose dn on.

Everything is single-threaded and seeded, so reruns reproduce datasets,
metric logs, and snapshots byte for byte. Wall-clock timing is opt-in
because timestamps would break that reproducibility.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .assignment import MatchCost, build_cost_matrix, hungarian_match, instability
from .decoder import DecoderConfig, SpotDecoder, save_checkpoint
from .dn_queries import NoiseConfig, build_dn_batch
from .geometry import sample_uniform
from .losses import LossWeights, dn_loss, instance_targets, matching_loss
from .synth import SceneSpec, rasterize, read_dataset

__all__ = [
    "TrainConfig",
    "train_run",
    "greedy_ctc_decode",
    "evaluate_predictions",
    "evaluate_model",
    "is_trace",
    "trend_scene_spec",
    "trend_train_config",
]

NOISE_STREAM = 104729  # keeps per-step noise draws clear of per-image scene seeds
SNAPSHOT_META_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    snapshot_interval: int = 250
    lr: float = 2e-3
    lr_drop_frac: float = 0.86
    weight_decay: float = 1e-4
    seed: int = 0
    use_dn: bool = True
    use_bcp: bool = True
    use_mcs: bool = True
    use_bct: bool = True
    num_matching: int = 12
    T: int = 25
    dim: int = 48
    heads: int = 4
    layers: int = 2
    ffn_dim: int = 192
    dtype: str = "float32"
    mask_prob: float = 0.5
    lambda_flip: float = 0.4
    score_threshold: float = 0.5
    detect_threshold: float = 0.05
    wall_time: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.snapshot_interval < 1:
            raise ValueError("snapshot_interval must be >= 1")
        if not 0.0 < self.lr_drop_frac <= 1.0:
            raise ValueError("lr_drop_frac must lie in (0, 1]")
        if not self.use_dn and not (self.use_bcp and self.use_mcs and self.use_bct):
            raise ValueError("bcp/mcs/bct toggles presuppose the denoising part; enable dn")

    def decoder_config(self, alphabet_size: int) -> DecoderConfig:
        return DecoderConfig(
            layers=self.layers,
            dim=self.dim,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            T=self.T,
            alphabet_size=alphabet_size,
            num_matching=self.num_matching,
            init_seed=self.seed,
            dtype=self.dtype,
        )


def trend_scene_spec(seed: int = 0) -> SceneSpec:
    """Scene preset shared by the trend experiments and their tests."""
    return SceneSpec(
        alphabet_size=6,
        grid=20,
        min_instances=7,
        max_instances=7,
        min_transcript=2,
        max_transcript=3,
        inverse_fraction=0.25,
        seed=seed,
    )


def trend_train_config(**overrides) -> TrainConfig:
    """Training preset shared by the trend experiments and their tests."""
    base = dict(num_matching=24, T=15, dim=64, ffn_dim=256, lr_drop_frac=0.8)
    base.update(overrides)
    return TrainConfig(**base)


def greedy_ctc_decode(char_logits) -> list[int]:
    """Greedy decode of (T, C+1) logits: collapse repeats, then drop blanks."""
    char_logits = np.asarray(char_logits)
    if char_logits.ndim != 2:
        raise ValueError("greedy_ctc_decode expects (T, C+1) logits")
    blank = char_logits.shape[-1] - 1
    ids = char_logits.argmax(-1)
    out: list[int] = []
    prev = -1
    for c in ids.tolist():
        if c != prev and c != blank:
            out.append(int(c))
        prev = c
    return out


def evaluate_predictions(
    scores: np.ndarray,
    pred_top: np.ndarray,
    pred_bot: np.ndarray,
    decoded: list,
    gt_instances,
    score_threshold: float = 0.5,
    detect_threshold: float = 0.05,
) -> dict:
    """Count detection and end-to-end hits for one image.

    Kept predictions (score above threshold) are assigned one-to-one to
    ground truth by minimizing the mean boundary L1; a pair under the
    distance threshold is a detection hit, and a hit whose decoded
    transcript is exactly the ground-truth transcript is an end-to-end hit.
    """
    T = pred_top.shape[1]
    keep = np.nonzero(scores > score_threshold)[0]
    counts = {"pred": int(len(keep)), "gt": len(gt_instances), "det": 0, "e2e": 0}
    if len(keep) == 0 or len(gt_instances) == 0:
        return counts
    gt_top = np.stack([sample_uniform(inst.top, T) for inst in gt_instances])
    gt_bot = np.stack([sample_uniform(inst.bottom, T) for inst in gt_instances])
    top_cost = np.abs(pred_top[keep][:, None] - gt_top[None]).sum(-1).mean(-1)
    bot_cost = np.abs(pred_bot[keep][:, None] - gt_bot[None]).sum(-1).mean(-1)
    cost = (top_cost + bot_cost) / 2.0
    rows, cols = linear_sum_assignment(cost)
    for r, m in zip(rows, cols):
        if cost[r, m] < detect_threshold:
            counts["det"] += 1
            if list(decoded[keep[r]]) == list(gt_instances[m].transcript):
                counts["e2e"] += 1
    return counts


def _rates(hits: int, pred: int, gt: int) -> tuple[float, float, float]:
    p = hits / pred if pred else 0.0
    r = hits / gt if gt else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def summarize_counts(counts: list[dict]) -> dict:
    pred = sum(c["pred"] for c in counts)
    gt = sum(c["gt"] for c in counts)
    det = sum(c["det"] for c in counts)
    e2e = sum(c["e2e"] for c in counts)
    p, r, f1 = _rates(det, pred, gt)
    ep, er, ef1 = _rates(e2e, pred, gt)
    return {
        "precision": p,
        "recall": r,
        "f1": f1,
        "e2e_precision": ep,
        "e2e_recall": er,
        "e2e_f1": ef1,
    }


def evaluate_model(
    model: SpotDecoder,
    items: list,
    score_threshold: float = 0.5,
    detect_threshold: float = 0.05,
) -> dict:
    """Micro-averaged detection/end-to-end rates over (raster, instances) items."""
    model.eval()
    per_image = []
    with torch.no_grad():
        for raster, instances in items:
            preds = model(raster)
            per_image.append(
                evaluate_predictions(
                    preds.instance_scores.numpy(),
                    preds.boundary_top.numpy(),
                    preds.boundary_bot.numpy(),
                    [greedy_ctc_decode(cl) for cl in preds.char_logits.numpy()],
                    instances,
                    score_threshold,
                    detect_threshold,
                )
            )
    return summarize_counts(per_image)


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _metric_row(step: int, part: str, total, terms, wall) -> str:
    row = {
        "step": step,
        "part": part,
        "loss_total": _scalar(total),
        "loss_cls": _scalar(terms["cls"]),
        "loss_text_pos": _scalar(terms["text_pos"]),
        "loss_text_neg": _scalar(terms.get("text_neg", 0.0)),
        "loss_coord": _scalar(terms["coord"]),
        "loss_bd": _scalar(terms["bd"]),
    }
    if wall is not None:
        row["wall_time"] = wall
    return json.dumps(row, sort_keys=True) + "\n"


def _snapshot(model: SpotDecoder, rasters: list, snap_dir: Path, step: int) -> None:
    model.eval()
    scores, points = [], []
    with torch.no_grad():
        for raster in rasters:
            preds = model(raster)
            scores.append(preds.instance_scores.numpy())
            points.append(preds.center_points.numpy())
    np.save(snap_dir / f"step{step:06d}_scores.npy", np.stack(scores))
    np.save(snap_dir / f"step{step:06d}_points.npy", np.stack(points))


def train_run(cfg: TrainConfig, dataset_path, eval_path, out_dir) -> dict:
    """Train on a generated dataset; returns a summary with the final eval."""
    torch.set_num_threads(1)
    dataset_path = Path(dataset_path)
    if not dataset_path.exists():
        raise FileNotFoundError(f"dataset not found: {dataset_path}")
    header, records = read_dataset(dataset_path)
    alphabet = header["spec"]["alphabet_size"]
    grid = header["spec"]["grid"]
    if not records:
        raise ValueError("dataset holds no images")

    eval_items = []
    if eval_path is not None:
        eval_header, eval_records = read_dataset(eval_path)
        if eval_header["spec"]["alphabet_size"] != alphabet or eval_header["spec"]["grid"] != grid:
            raise ValueError("eval dataset spec disagrees with the training dataset")
        eval_items = [
            (rasterize(instances, alphabet, grid), instances) for _, instances in eval_records
        ]

    out = Path(out_dir)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(parents=True, exist_ok=True)

    model = SpotDecoder(cfg.decoder_config(alphabet))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_step = int(cfg.steps * cfg.lr_drop_frac)

    rasters = [rasterize(instances, alphabet, grid) for _, instances in records]
    all_instances = [instances for _, instances in records]
    targets = [
        instance_targets(instances, cfg.T, dtype=model.dtype) for instances in all_instances
    ]
    weights = LossWeights() if cfg.use_bct else replace(LossWeights(), text_neg=0.0)
    cost_cfg = MatchCost()
    noise_cfg = NoiseConfig(
        lambda_flip=cfg.lambda_flip, mask_prob=cfg.mask_prob, T=cfg.T, rng_seed=cfg.seed
    )

    snapshot_steps: list[int] = []
    t0 = time.monotonic()
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mfh, open(
        out / "eval_trace.jsonl", "w", encoding="utf-8"
    ) as tfh:
        for step in range(cfg.steps):
            if step == drop_step and step > 0:
                for group in opt.param_groups:
                    group["lr"] = cfg.lr * 0.1
            idx = step % len(records)
            instances = all_instances[idx]
            rng = np.random.default_rng([cfg.seed, NOISE_STREAM, step])
            model.train()

            if cfg.use_dn:
                batch = build_dn_batch(
                    instances,
                    noise_cfg,
                    alphabet,
                    rng,
                    control_point_noise=cfg.use_bcp,
                    use_sliding=cfg.use_mcs,
                )
                preds = model(rasters[idx], batch)
                dn_preds = preds.narrow(0, batch.num_queries)
                match_preds = preds.narrow(batch.num_queries, cfg.num_matching)
                dn_total, dn_terms = dn_loss(
                    dn_preds, batch, instances, weights, targets=targets[idx]
                )
            else:
                match_preds = model(rasters[idx])
                dn_total, dn_terms = None, None
            match_total, match_terms, _ = matching_loss(
                match_preds, instances, weights, cost_cfg, targets=targets[idx]
            )

            total = match_total if dn_total is None else dn_total + match_total
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()

            wall = time.monotonic() - t0 if cfg.wall_time else None
            if dn_terms is not None:
                mfh.write(_metric_row(step, "dn", dn_total, dn_terms, wall))
            mfh.write(_metric_row(step, "match", match_total, match_terms, wall))

            if (step + 1) % cfg.snapshot_interval == 0:
                _snapshot(model, rasters, snap_dir, step + 1)
                snapshot_steps.append(step + 1)
                if eval_items:
                    scored = evaluate_model(
                        model, eval_items, cfg.score_threshold, cfg.detect_threshold
                    )
                    tfh.write(json.dumps({"step": step + 1, **scored}, sort_keys=True) + "\n")

    meta = {
        "format_version": SNAPSHOT_META_VERSION,
        "snapshot_steps": snapshot_steps,
        "dataset": str(dataset_path),
        "cost": asdict(cost_cfg),
    }
    (snap_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    save_checkpoint(model, out / "checkpoint.pt")

    summary = {"steps": cfg.steps, "out_dir": str(out)}
    if eval_items:
        summary["final_eval"] = evaluate_model(
            model, eval_items, cfg.score_threshold, cfg.detect_threshold
        )
    return summary


def is_trace(snapshot_dir) -> list[dict]:
    """Recompute assignments per snapshot and report per-interval mean IS.

    Needs at least two snapshots. Each row holds the later snapshot's step,
    the mean IS over images, and the per-image maximum for bound checks.
    """
    snap_dir = Path(snapshot_dir)
    meta_path = snap_dir / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no snapshot metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != SNAPSHOT_META_VERSION:
        raise ValueError("snapshot metadata has an unexpected format_version")
    steps = meta["snapshot_steps"]
    if len(steps) < 2:
        raise ValueError(f"need at least 2 snapshots to measure instability, have {len(steps)}")
    _, records = read_dataset(meta["dataset"])
    cost_cfg = MatchCost(**meta["cost"])

    def assignments(step: int) -> list:
        scores = np.load(snap_dir / f"step{step:06d}_scores.npy")
        points = np.load(snap_dir / f"step{step:06d}_points.npy")
        out = []
        for img, (_, instances) in enumerate(records):
            cost = build_cost_matrix(
                scores[img].astype(np.float64), points[img].astype(np.float64), instances, cost_cfg
            )
            out.append(hungarian_match(cost))
        return out

    rows = []
    prev = assignments(steps[0])
    for step in steps[1:]:
        cur = assignments(step)
        per_image = [instability(a, b) for a, b in zip(prev, cur)]
        rows.append(
            {
                "step": step,
                "is_mean": float(np.mean(per_image)),
                "is_max": int(max(per_image)),
            }
        )
        prev = cur
    return rows
