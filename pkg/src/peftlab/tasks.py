"""Procedural dense-prediction tasks and their metrics.

Each sample renders random shapes over a noisy background with hard
(non-antialiased) edges, so pixel membership has an exact analytic
definition: a pixel belongs to a shape iff its center lies inside the
shape. Labels follow painter's order (the last-drawn shape wins).
Domains differ in shape family, palette, and background, which creates
the source/target gap the adaptation experiments need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

KIND_SEGMENTATION = "shapes_segmentation"
KIND_DEPTH = "shapes_depth"
SHAPE_KINDS = ("rectangle", "circle", "triangle")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = KIND_SEGMENTATION
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = 5
    shape_kinds: tuple[str, ...] = ("rectangle",)
    palette: tuple[tuple[float, float, float], ...] = (
        (0.90, 0.15, 0.10), (0.10, 0.85, 0.20), (0.15, 0.25, 0.90), (0.90, 0.85, 0.10))
    background: tuple[float, float, float] = (0.10, 0.10, 0.12)
    shapes_range: tuple[int, int] = (3, 6)
    size_range: tuple[int, int] = (8, 16)
    noise: float = 0.03
    color_jitter: float = 0.08
    depth_max: float = 1.0
    seed: int = 0
    n_train: int = 2000
    n_val: int = 200

    def __post_init__(self):
        if self.kind not in (KIND_SEGMENTATION, KIND_DEPTH):
            raise ValueError(f"unknown task kind {self.kind!r}")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kinds {sorted(unknown)}")
        if len(self.palette) != self.num_classes - 1:
            raise ValueError(
                f"palette needs {self.num_classes - 1} colors, got {len(self.palette)}")
        if self.shapes_range[0] < 0 or self.shapes_range[0] > self.shapes_range[1]:
            raise ValueError(f"bad shapes_range {self.shapes_range}")

    @property
    def label_kind(self) -> str:
        return "segmentation" if self.kind == KIND_SEGMENTATION else "regression"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["shape_kinds"] = list(self.shape_kinds)
        d["palette"] = [list(c) for c in self.palette]
        d["background"] = list(self.background)
        d["shapes_range"] = list(self.shapes_range)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["shape_kinds"] = tuple(d["shape_kinds"])
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        d["background"] = tuple(d["background"])
        d["shapes_range"] = tuple(d["shapes_range"])
        d["size_range"] = tuple(d["size_range"])
        return cls(**d)


def _shape_mask(shape: dict, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Boolean (H, W) membership of pixel centers in the shape."""
    kind = shape["kind"]
    if kind == "rectangle":
        x0, y0, x1, y1 = shape["bounds"]
        return (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    if kind == "circle":
        cx, cy, r = shape["center"][0], shape["center"][1], shape["radius"]
        dx, dy = px - cx, py - cy
        return dx * dx + dy * dy <= r * r
    # Triangle: same-side test against each edge.
    (x0, y0), (x1, y1), (x2, y2) = shape["vertices"]
    d0 = (px - x1) * (y0 - y1) - (x0 - x1) * (py - y1)
    d1 = (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
    d2 = (px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)
    neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(neg & pos)


def _draw_shape(rng: np.random.Generator, spec: TaskSpec) -> dict:
    h, w = spec.image_size
    kind = spec.shape_kinds[rng.integers(0, len(spec.shape_kinds))]
    class_id = int(rng.integers(1, spec.num_classes))
    size = float(rng.uniform(*spec.size_range))
    cx = float(rng.uniform(0, w))
    cy = float(rng.uniform(0, h))
    shape = {"kind": kind, "class_id": class_id,
             "depth": float(rng.uniform(0.1, 0.9)) * spec.depth_max}
    if kind == "rectangle":
        aspect = float(rng.uniform(0.5, 2.0))
        half_w, half_h = size / 2 * aspect, size / 2 / aspect
        shape["bounds"] = (cx - half_w, cy - half_h, cx + half_w, cy + half_h)
    elif kind == "circle":
        shape["center"] = (cx, cy)
        shape["radius"] = size / 2
    else:
        while True:
            verts = [(cx + float(rng.uniform(-size, size)),
                      cy + float(rng.uniform(-size, size))) for _ in range(3)]
            (x0, y0), (x1, y1), (x2, y2) = verts
            area = abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) / 2
            if area >= size * size / 4:
                break
        shape["vertices"] = tuple(verts)
    return shape


def generate_sample(spec: TaskSpec, index: int, with_shapes: bool = False):
    """Deterministic sample for (spec.seed, index): (image, label[, shapes])."""
    if index < 0:
        raise ValueError(f"sample index must be >= 0, got {index}")
    rng = np.random.default_rng([spec.seed, index, 0xDA7A])
    h, w = spec.image_size
    py, px = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    image = np.empty((h, w, 3), dtype=np.float32)
    image[:] = np.asarray(spec.background, dtype=np.float32)
    image += rng.uniform(-spec.noise, spec.noise, size=(h, w, 3)).astype(np.float32)
    if spec.kind == KIND_SEGMENTATION:
        label = np.zeros((h, w), dtype=np.int64)
    else:
        label = np.full((h, w), spec.depth_max, dtype=np.float32)

    shapes = [_draw_shape(rng, spec) for _ in range(int(rng.integers(
        spec.shapes_range[0], spec.shapes_range[1] + 1)))]
    for shape in shapes:
        mask = _shape_mask(shape, px, py)
        color = np.asarray(spec.palette[shape["class_id"] - 1], dtype=np.float32)
        jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3).astype(np.float32)
        image[mask] = color + jitter
        if spec.kind == KIND_SEGMENTATION:
            label[mask] = shape["class_id"]
        else:
            label[mask] = shape["depth"]
    np.clip(image, 0.0, 1.0, out=image)
    if with_shapes:
        return image, label, shapes
    return image, label


def materialize(spec: TaskSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Full split as arrays; train and val index ranges are disjoint."""
    if split == "train":
        indices = range(spec.n_train)
    elif split == "val":
        indices = range(spec.n_train, spec.n_train + spec.n_val)
    else:
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    images, labels = [], []
    for i in indices:
        img, lab = generate_sample(spec, i)
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in pred or gt (others excluded)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"miou: shape mismatch {pred.shape} vs {gt.shape}")
    for arr, tag in ((pred, "pred"), (gt, "gt")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"miou: {tag} class id outside [0, {num_classes})")
    ious = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            continue
        ious.append(int(np.logical_and(p, g).sum()) / union)
    return float(np.mean(ious)) if ious else 0.0


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"rmse: shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.sqrt(np.mean(diff * diff)))


# Domain presets: families, palettes, and backgrounds are disjoint between
# source and targets so a source-pretrained model meets a real gap.
_PALETTES = {
    "source": ((0.90, 0.15, 0.10), (0.10, 0.85, 0.20), (0.15, 0.25, 0.90), (0.90, 0.85, 0.10)),
    "target-a": ((0.10, 0.80, 0.85), (0.85, 0.10, 0.80), (0.95, 0.55, 0.10), (0.50, 0.20, 0.95)),
    "target-b": ((0.15, 0.55, 0.45), (0.95, 0.50, 0.60), (0.55, 0.90, 0.15), (0.30, 0.15, 0.55)),
}
_FAMILIES = {
    "source": ("rectangle",),
    "target-a": ("triangle",),
    "target-b": ("circle",),
}
_BACKGROUNDS = {
    "source": (0.10, 0.10, 0.12),
    "target-a": (0.70, 0.70, 0.65),
    "target-b": (0.40, 0.42, 0.45),
}
TASK_NAMES = tuple(f"{k}-{d}" for k in ("seg", "depth") for d in _FAMILIES)


def task_preset(name: str, seed: int = 0, **overrides) -> TaskSpec:
    """Named task: '<seg|depth>-<source|target-a|target-b>'."""
    try:
        kind_tag, domain = name.split("-", 1)
        family = _FAMILIES[domain]
    except (ValueError, KeyError):
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}") from None
    if kind_tag not in ("seg", "depth"):
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    fields = dict(
        kind=KIND_SEGMENTATION if kind_tag == "seg" else KIND_DEPTH,
        shape_kinds=family,
        palette=_PALETTES[domain],
        background=_BACKGROUNDS[domain],
        seed=seed,
    )
    fields.update(overrides)
    return TaskSpec(**fields)


def dump_dataset(spec: TaskSpec, out_dir: str | Path) -> Path:
    """Write both splits as raw little-endian arrays plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for split in ("train", "val"):
        images, labels = materialize(spec, split)
        for tag, arr in (("images", images), ("labels", labels)):
            fname = f"{split}_{tag}.bin"
            arr_le = arr.astype(arr.dtype.newbyteorder("<"))
            (out / fname).write_bytes(arr_le.tobytes())
            records.append({"name": f"{split}_{tag}", "file": fname,
                            "shape": list(arr.shape), "dtype": str(arr.dtype),
                            "count": int(arr.shape[0])})
    manifest = {"format_version": 1, "task": spec.to_dict(), "arrays": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(in_dir: str | Path) -> tuple[TaskSpec, dict[str, np.ndarray]]:
    path = Path(in_dir)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != 1:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    spec = TaskSpec.from_dict(manifest["task"])
    arrays = {}
    for rec in manifest["arrays"]:
        raw = (path / rec["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"]).newbyteorder("<"))
        arrays[rec["name"]] = arr.reshape(rec["shape"]).astype(np.dtype(rec["dtype"]), copy=False)
    return spec, arrays
