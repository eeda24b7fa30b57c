"""Interpretation-fooling metrics and the batch evaluation sweep."""

from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AttackConfig, PatchSpec, apply_patch, run_attack_batch
from .data import LabeledImage, default_patch_rect, stack
from .interpret import Heatmap, gradcam_batch, occlusion_map
from .model import Model

LOCALIZATION_THRESHOLD = 0.15
IOU_SUCCESS = 0.5


def _rect_slices(rect, shape_hw):
    x0, y0, w, h = rect
    H, W = shape_hw
    if x0 < 0 or y0 < 0 or w < 0 or h < 0 or x0 + w > W or y0 + h > H:
        raise ValueError(f"rect {rect} out of bounds for a {W}x{H} heatmap")
    return slice(y0, y0 + h), slice(x0, x0 + w)


def energy_ratio(heatmap: Heatmap, rect) -> float:
    """Share of a sum-normalized heatmap's mass inside ``rect`` = (x0, y0, w, h)."""
    values = np.asarray(heatmap.values, dtype=np.float64)
    rows, cols = _rect_slices(rect, values.shape)
    if heatmap.degenerate:
        return 0.0
    total = values.sum() if heatmap.norm != "sum-1" else 1.0
    return float(values[rows, cols].sum() / total)


def histogram_intersection(h1: Heatmap, h2: Heatmap) -> float:
    """Sum of the elementwise minimum of two sum-normalized heatmaps."""
    a = np.asarray(h1.values, dtype=np.float64)
    b = np.asarray(h2.values, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    if h1.degenerate or h2.degenerate:
        return 0.0
    return float(np.minimum(a, b).sum())


def iou(a, b) -> float:
    """IoU of two (x0, y0, x1, y1) boxes with exclusive upper bounds."""
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class Localization:
    box: tuple[int, int, int, int] | None
    iou: float
    error: bool


def localization(heatmap: Heatmap, gt_box, threshold: float = LOCALIZATION_THRESHOLD) -> Localization:
    """Box around max-1 rescaled values above ``threshold``, scored by IoU against ``gt_box``."""
    values = np.asarray(heatmap.values, dtype=np.float64)
    top = values.max() if values.size else 0.0
    if heatmap.degenerate or top <= 0:
        return Localization(None, 0.0, True)
    rows, cols = np.nonzero(values / top > threshold)
    box = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    score = iou(box, tuple(gt_box))
    return Localization(box, score, score < IOU_SUCCESS)


# ---------------------------------------------------------------- evaluation sweep


@dataclass
class ImageRecord:
    image_id: int
    clean_class: int
    final_class: int | None = None
    target_class: int | None = None
    success: bool | None = None
    interpreted_class: int | None = None
    energy_ratio: float | None = None
    decoy_energy_ratio: float | None = None
    histogram_intersection: float | None = None
    localization_iou: float | None = None
    localization_error: bool | None = None
    degenerate: bool = False
    error: str | None = None


@dataclass
class MetricsReport:
    mode: str
    method: str
    records: list[ImageRecord] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "method": self.method,
            "aggregates": self.aggregates,
            "excluded": self.excluded,
            "records": [asdict(r) for r in self.records],
        }

    def to_table(self, label: str | None = None) -> str:
        return format_table([(label or f"{self.mode} / {self.method}", self)])


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def format_table(rows) -> str:
    """Aligned text table, one row per (label, MetricsReport)."""
    header = ["Method", "Acc (%)", "Target Acc (%)", "Energy Ratio (%)", "Decoy Energy (%)",
              "Histogram", "Loc. Error (%)", "Degenerate"]
    body = []
    for label, rep in rows:
        a = rep.aggregates
        hist = a.get("mean_histogram_intersection")
        body.append([
            label,
            _pct(a.get("accuracy")),
            _pct(a.get("target_accuracy")),
            _pct(a.get("mean_energy_ratio")),
            _pct(a.get("mean_decoy_energy_ratio")),
            "-" if hist is None else f"{hist:.3f}",
            _pct(a.get("localization_error_rate")),
            str(a.get("degenerate_count", 0)),
        ])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in body]) + "\n"


def _mean(xs):
    return float(statistics.fmean(xs)) if xs else None


def _median(xs):
    return float(statistics.median(xs)) if xs else None


def aggregate(records: list[ImageRecord], mode: str) -> dict:
    """Aggregates recomputable from the per-image records.

    Degenerate heatmaps are left out of the energy and histogram statistics
    and counted in ``degenerate_count``; they count as localization errors.
    """
    ok = [r for r in records if r.error is None]
    live = [r for r in ok if not r.degenerate]
    out = {
        "n": len(records),
        "failed": len(records) - len(ok),
        "degenerate_count": sum(r.degenerate for r in ok),
    }
    if mode != "none":
        out["accuracy"] = _mean([float(r.final_class == r.clean_class) for r in ok])
        if mode == "nontargeted":
            out["success_rate"] = _mean([float(r.success) for r in ok])
        else:
            out["target_accuracy"] = _mean([float(r.success) for r in ok])
    energies = [r.energy_ratio for r in live if r.energy_ratio is not None]
    out["mean_energy_ratio"] = _mean(energies)
    out["median_energy_ratio"] = _median(energies)
    decoys = [r.decoy_energy_ratio for r in live if r.decoy_energy_ratio is not None]
    if decoys:
        out["mean_decoy_energy_ratio"] = _mean(decoys)
        out["median_decoy_energy_ratio"] = _median(decoys)
    out["mean_histogram_intersection"] = _mean(
        [r.histogram_intersection for r in live if r.histogram_intersection is not None]
    )
    out["localization_error_rate"] = _mean([float(r.localization_error) for r in ok])
    return out


def _heatmaps(model: Model, images: np.ndarray, classes, method: str, occlusion: dict) -> list[Heatmap]:
    if method == "gradcam":
        maps, _, degenerate = gradcam_batch(model, images, classes)
        return [Heatmap(np.array(maps.data[k], dtype=np.float64), int(classes[k]), "sum-1", bool(degenerate[k]))
                for k in range(len(images))]
    if method == "occlusion":
        return [occlusion_map(model, images[k], int(classes[k]), **occlusion) for k in range(len(images))]
    raise ValueError(f"unknown interpretation method {method!r}")


def _eval_chunk(model: Model, items: list[LabeledImage], cfg: AttackConfig | None, method: str,
                patch: PatchSpec | None, target: int | None, occlusion: dict) -> list[ImageRecord]:
    clean = stack(items)
    ids = [im.image_id for im in items]
    H = clean.shape[2]
    clean_class = model.predict(clean)
    mode = "none" if cfg is None else cfg.mode
    try:
        if mode == "none":
            adv, final, tgt, success = clean, clean_class, [None] * len(items), [None] * len(items)
        elif mode == "universal":
            adv = apply_patch(clean, patch)
            final = model.predict(adv)
            tgt = [target] * len(items)
            success = [bool(f == target) for f in final]
        else:
            results = run_attack_batch(model, clean, cfg, ids)
            adv = np.stack([r.adv_image for r in results])
            final = np.array([r.final for r in results])
            tgt = [r.target for r in results]
            success = [r.success for r in results]
    except Exception as exc:  # noqa: BLE001 - a failed chunk is recorded, not fatal
        return [ImageRecord(i, int(c), error=f"{type(exc).__name__}: {exc}") for i, c in zip(ids, clean_class)]

    if mode in ("none", "full-image"):
        interp = np.array(clean_class)
    elif mode == "nontargeted":
        interp = np.array(final)
    else:
        interp = np.array(tgt)
    adv_maps = _heatmaps(model, adv, interp, method, occlusion)
    clean_maps = adv_maps if mode == "none" else _heatmaps(model, clean, interp, method, occlusion)

    if mode == "full-image":
        rect = None
    elif mode == "universal":
        rect = patch.rect
    elif cfg is not None:
        rect = cfg.patch_rect(H)
    else:
        rect = default_patch_rect(H)
    records = []
    for k, item in enumerate(items):
        hm = adv_maps[k]
        loc = localization(hm, item.gt_box)
        records.append(ImageRecord(
            image_id=ids[k],
            clean_class=int(clean_class[k]),
            final_class=int(final[k]),
            target_class=tgt[k],
            success=success[k],
            interpreted_class=int(interp[k]),
            energy_ratio=None if rect is None else energy_ratio(hm, rect),
            decoy_energy_ratio=energy_ratio(hm, cfg.decoy_rect(H)) if mode == "uniform" else None,
            histogram_intersection=histogram_intersection(clean_maps[k], hm),
            localization_iou=loc.iou,
            localization_error=loc.error,
            degenerate=hm.degenerate,
        ))
    return records


def evaluate_suite(
    model: Model,
    dataset: list[LabeledImage],
    cfg: AttackConfig | None = None,
    method: str = "gradcam",
    jobs: int = 1,
    chunk_size: int = 25,
    patch: PatchSpec | None = None,
    occlusion: dict | None = None,
) -> MetricsReport:
    """Attack (or, for universal mode, apply ``patch`` to) every image and score the interpretation.

    The interpreted class is the target for targeted modes, the current top-1
    for non-targeted, and the original prediction for full-image and for
    ``cfg=None`` (no attack). Images are processed in fixed chunks of
    ``chunk_size``; ``jobs`` only spreads chunks across processes, so
    results do not depend on it. Universal mode skips images whose clean
    prediction already is the target (listed in ``excluded``).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if method not in ("gradcam", "occlusion"):
        raise ValueError(f"unknown interpretation method {method!r}")
    occlusion = dict(size=11, stride=4, fill=0.0, **(occlusion or {}))
    mode = "none" if cfg is None else cfg.mode
    target = None
    excluded: list[int] = []
    if mode == "universal":
        if patch is None or patch.z is None:
            raise ValueError("universal evaluation needs the trained patch")
        target = int(cfg.target)
        clean_pred = model.predict(stack(dataset))
        excluded = [im.image_id for im, p in zip(dataset, clean_pred) if p == target]
        dataset = [im for im, p in zip(dataset, clean_pred) if p != target]
        if not dataset:
            raise ValueError("every image is already predicted as the target")
    chunks = [dataset[i : i + chunk_size] for i in range(0, len(dataset), chunk_size)]
    args = [(model, ch, cfg, method, patch, target, occlusion) for ch in chunks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_eval_chunk, *zip(*args)))
    else:
        parts = [_eval_chunk(*a) for a in args]
    records = [r for part in parts for r in part]
    return MetricsReport(mode, method, records, aggregate(records, mode), excluded)
