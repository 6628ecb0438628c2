"""Deterministic synthetic scenes of curved text.

Each scene lives in the unit square. Instances are laid out in horizontal
bands, one per instance, so they never collide: a band contributes a bent
baseline (cubic, shared x knots, random arc) and a half-height; the top and
bottom boundary curves are the baseline shifted by the half-height, so the
frame height is constant and bounded away from zero by construction. A
fraction of instances is stored upside down (control order reversed and the
two boundaries swapped), the analogue of 180-degree rotated text: the pixel
evidence stays in place while the reading frame flips.

The raster is a (C+2, G, G) grid: one channel per character class painted
along the center curve over that character's span, a presence channel, and a
stripe channel painted near the frame's top boundary. The stripe is what
makes orientation observable: an upside-down instance carries its stripe on
the other visual side.

Datasets serialize to JSONL (header line with a format version, then one
record per image). Serialization is canonical, so regenerating a dataset
reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import BezierCurve, TextInstance, eval_bezier, sample_uniform

__all__ = [
    "SceneSpec",
    "generate_scene",
    "rasterize",
    "write_dataset",
    "read_dataset",
    "instances_from_record",
]

FORMAT_VERSION = 1
MIN_FRAME_HEIGHT = 0.01


@dataclass(frozen=True)
class SceneSpec:
    alphabet_size: int = 37
    min_instances: int = 7
    max_instances: int = 7
    min_transcript: int = 2
    max_transcript: int = 6
    inverse_fraction: float = 0.4
    curvature_max: float = 0.12
    grid: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.alphabet_size < 1 or self.grid < 2:
            raise ValueError("alphabet_size must be >= 1 and grid >= 2")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if not 1 <= self.min_transcript <= self.max_transcript:
            raise ValueError("need 1 <= min_transcript <= max_transcript")
        if not 0.0 <= self.inverse_fraction <= 1.0:
            raise ValueError("inverse_fraction must lie in [0, 1]")
        if self.curvature_max < 0.0:
            raise ValueError("curvature_max must be >= 0")


def _band_instance(spec: SceneSpec, rng, y_lo: float, y_hi: float, inst_id: str) -> TextInstance:
    band_half = (y_hi - y_lo) / 2.0
    yc = (y_lo + y_hi) / 2.0 + rng.uniform(-0.2, 0.2) * band_half
    h = rng.uniform(0.012, min(0.3 * band_half * 2.0, 0.06))
    bend_cap = max(0.0, min(spec.curvature_max, band_half - h - 0.005))
    bend = rng.uniform(0.0, bend_cap) * (1.0 if rng.random() < 0.5 else -1.0)

    x0 = rng.uniform(0.05, 0.2)
    x1 = rng.uniform(0.8, 0.95)
    xs = np.array([x0, x0 + (x1 - x0) / 3.0, x0 + 2.0 * (x1 - x0) / 3.0, x1])
    ys = np.array([yc, yc - bend, yc - bend, yc])

    # slight shear keeps the top/center control distance nonzero on both axes,
    # so query noise gets exercised horizontally as well as vertically
    shear = rng.uniform(0.002, 0.01)
    top = np.stack([xs + shear, ys - h], axis=1)
    bot = np.stack([xs - shear, ys + h], axis=1)
    if 2.0 * h < MIN_FRAME_HEIGHT:
        raise AssertionError("frame height fell below the minimum")

    length = int(rng.integers(spec.min_transcript, spec.max_transcript + 1))
    transcript = tuple(int(c) for c in rng.integers(0, spec.alphabet_size, size=length))

    if rng.random() < spec.inverse_fraction:
        # 180-degree rotation of the frame: reverse traversal, swap boundaries
        top, bot = bot[::-1].copy(), top[::-1].copy()
    return TextInstance(
        top=BezierCurve(top), bottom=BezierCurve(bot), transcript=transcript, id=inst_id
    )


def generate_scene(spec: SceneSpec, image_index: int):
    """One image -> (instances, raster); fully determined by (spec.seed, image_index)."""
    rng = np.random.default_rng([spec.seed, image_index])
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    lanes = np.linspace(0.06, 0.94, n + 1)
    instances = [
        _band_instance(spec, rng, lanes[i], lanes[i + 1], f"img{image_index}_t{i}")
        for i in range(n)
    ]
    return instances, rasterize(instances, spec.alphabet_size, spec.grid)


def rasterize(instances, alphabet_size: int, grid: int) -> np.ndarray:
    """Paint instances into a (C+2, G, G) float32 grid.

    Channels 0..C-1 hold per-class strokes along the center curve, channel C
    marks presence, channel C+1 a stripe near each frame's top boundary.
    """
    out = np.zeros((alphabet_size + 2, grid, grid), dtype=np.float32)
    samples_per_char = 4 * grid

    def cells(points):
        idx = np.clip((points * grid).astype(np.int64), 0, grid - 1)
        return idx[:, 1], idx[:, 0]  # row = y, col = x

    for inst in instances:
        L = len(inst.transcript)
        ts = np.linspace(0.0, 1.0, L * samples_per_char)
        center = eval_bezier(inst.center, ts)
        top = eval_bezier(inst.top, ts)
        rows, cols = cells(center)
        out[alphabet_size, rows, cols] = 1.0
        for j, char in enumerate(inst.transcript):
            span = slice(j * samples_per_char, (j + 1) * samples_per_char)
            out[char, rows[span], cols[span]] = 1.0
        stripe = center + 0.75 * (top - center)
        rows, cols = cells(stripe)
        out[alphabet_size + 1, rows, cols] = 1.0
    return out


def _curve_json(curve: BezierCurve) -> list:
    return [[float(x), float(y)] for x, y in curve.control]


def _record_json(image_index: int, instances) -> str:
    record = {
        "image_index": image_index,
        "instances": [
            {
                "id": inst.id,
                "top": _curve_json(inst.top),
                "bottom": _curve_json(inst.bottom),
                "transcript": list(inst.transcript),
            }
            for inst in instances
        ],
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def instances_from_record(record: dict) -> list[TextInstance]:
    return [
        TextInstance(
            top=BezierCurve(np.array(r["top"], dtype=np.float64)),
            bottom=BezierCurve(np.array(r["bottom"], dtype=np.float64)),
            transcript=tuple(int(c) for c in r["transcript"]),
            id=r["id"],
        )
        for r in record["instances"]
    ]


def write_dataset(path, spec: SceneSpec, num_images: int, start_index: int = 0) -> dict:
    """Write a JSONL dataset; returns {"images": ..., "instances": ...} counts."""
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "curved-text-scenes",
        "num_images": num_images,
        "start_index": start_index,
        "spec": asdict(spec),
    }
    total = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for i in range(start_index, start_index + num_images):
            instances, _ = generate_scene(spec, i)
            total += len(instances)
            fh.write(_record_json(i, instances) + "\n")
    return {"images": num_images, "instances": total}


def read_dataset(path):
    """Load a JSONL dataset -> (header, list of (image_index, instances))."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path} is empty")
    header = json.loads(lines[0])
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"dataset format_version {version!r}, expected {FORMAT_VERSION}")
    records = []
    for line in lines[1:]:
        record = json.loads(line)
        records.append((record["image_index"], instances_from_record(record)))
    return header, records
