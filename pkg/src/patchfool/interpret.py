"""Grad-CAM and occluding-patch heatmaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .model import Model

NORMS = ("sum-1", "max-1", "raw")


class InvalidClassError(ValueError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W), nonnegative
    class_index: int
    norm: str = "sum-1"
    degenerate: bool = False
    graph: de.Tensor | None = None  # differentiable (H, W) node when built with as_graph

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown normalization {self.norm!r}")

    def rescaled(self, norm: str) -> "Heatmap":
        """Copy with ``norm`` applied to the values (no graph)."""
        v = np.asarray(self.values, dtype=np.float64)
        if norm == "raw" or self.degenerate:
            out = v.copy()
        elif norm == "sum-1":
            out = v / v.sum()
        else:
            out = v / v.max()
        return Heatmap(out, self.class_index, norm, self.degenerate)


def _check_classes(model: Model, classes) -> np.ndarray:
    classes = np.atleast_1d(np.asarray(classes))
    if classes.dtype.kind not in "iu" or np.any(classes < 0) or np.any(classes >= model.num_classes):
        raise InvalidClassError(f"class index {classes.tolist()} outside 0..{model.num_classes - 1}")
    return classes.astype(np.int64)


def forward_with_features(model: Model, x, as_graph: bool = False):
    """Run ``model`` keeping the interpretation-point activations.

    Returns ``(A, logits)`` where ``A`` always requires grad, so the class
    score can be differentiated with respect to it.
    """
    x = de.as_tensor(x)
    if as_graph:
        feats = model.features(x)
    else:
        with de.no_grad():
            feats = model.features(x)
    if not feats.requires_grad:
        feats = de.Tensor(feats.data, requires_grad=True, dtype=feats.dtype)
    return feats, model.head(feats)


def gradcam_from_features(
    feats: de.Tensor,
    logits: de.Tensor,
    classes,
    out_hw: tuple[int, int],
    as_graph: bool = False,
    stop_alpha: bool = False,
    normalize: bool = True,
):
    """Batched Grad-CAM from an already evaluated forward pass.

    alpha[n, k] = mean_ij d logits[n, classes[n]] / dA[n, k, i, j]
    G[n]        = relu(sum_k alpha[n, k] A[n, k])   upsampled (nearest) to ``out_hw``
    G_hat[n]    = G[n] / sum(G[n])                  (zero when G[n] is all zero)

    Returns ``(maps, degenerate)``: maps is an (N, H, W) tensor, a graph in
    the inputs of ``feats`` when ``as_graph`` is set; degenerate is a bool
    array flagging all-zero G.
    """
    n, _, h, w = feats.shape
    H, W = out_hw
    if H % h or W % w or H // h != W // w:
        raise de.ShapeError(f"cannot upsample {h}x{w} activations to {H}x{W} by an integer factor")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), np.asarray(classes)] = 1.0
    score = de.sum(logits * de.Tensor(onehot, dtype=logits.dtype))
    d_feats = de.grad(score, feats, create_graph=as_graph)
    with de._grad_mode(as_graph):
        alpha = de.sum(d_feats, axis=(2, 3), keepdims=True) * (1.0 / (h * w))
        if stop_alpha:
            alpha = alpha.detach()
        cam = de.relu(de.sum(alpha * feats, axis=1))
        up = de.upsample_nn(cam, H // h)
        total = de.sum(up, axis=(1, 2), keepdims=True)
        degenerate = total.data.reshape(-1) <= 0
        if not normalize:
            return up, degenerate
        safe = total + de.Tensor(degenerate.astype(total.dtype).reshape(total.shape), dtype=total.dtype)
        return up / safe, degenerate


def gradcam_batch(model: Model, x, classes, as_graph: bool = False, stop_alpha: bool = False, normalize: bool = True):
    """Grad-CAM maps for a batch; returns ``(maps, logits, degenerate)``."""
    x = de.as_tensor(x)
    classes = _check_classes(model, classes)
    feats, logits = forward_with_features(model, x, as_graph)
    maps, degenerate = gradcam_from_features(
        feats, logits, np.broadcast_to(classes, (x.shape[0],)), x.shape[2:], as_graph, stop_alpha, normalize
    )
    return maps, logits, degenerate


def gradcam(model: Model, image, c: int, as_graph: bool = False, stop_alpha: bool = False) -> Heatmap:
    """Sum-normalized Grad-CAM heatmap of class ``c`` for one (C, H, W) image."""
    image = de.as_tensor(image)
    batch = de.reshape(image, (1, *image.shape)) if image.ndim == 3 else image
    maps, _, degenerate = gradcam_batch(model, batch, [c], as_graph, stop_alpha)
    values = np.array(maps.data[0], dtype=np.float64)
    graph = de.reshape(maps, maps.shape[1:]) if as_graph else None
    return Heatmap(values, int(c), "sum-1", bool(degenerate[0]), graph)


def gradcam_raw(model: Model, image, c: int) -> Heatmap:
    """Unnormalized, upsampled Grad-CAM map."""
    image = np.asarray(image)[None]
    maps, _, degenerate = gradcam_batch(model, image, [c], normalize=False)
    return Heatmap(np.array(maps.data[0], dtype=np.float64), int(c), "raw", bool(degenerate[0]))


# ---------------------------------------------------------------- occlusion


def _positions(extent: int, size: int, stride: int) -> list[int]:
    return list(range(0, extent - size + 1, stride))


def occlusion_drops(model: Model, image, c: int, size: int = 11, stride: int = 4, fill: float = 0.0,
                    batch_size: int = 256):
    """Score drop max(0, y_c(x) - y_c(occluded x)) for every occluder placement.

    Returns ``(drops, ys, xs)`` with drops of shape (len(ys), len(xs)).
    """
    image = np.asarray(image, dtype=np.float32)
    _, H, W = image.shape
    if size > min(H, W) or size < 1:
        raise ValueError(f"occluder size {size} does not fit a {H}x{W} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c = int(_check_classes(model, [c])[0])
    ys, xs = _positions(H, size, stride), _positions(W, size, stride)
    placements = [(y, x) for y in ys for x in xs]
    # the unoccluded image rides along as element 0
    scores = []
    for start in range(0, len(placements) + 1, batch_size):
        chunk = []
        for k in range(start, min(start + batch_size, len(placements) + 1)):
            img = image.copy()
            if k > 0:
                y, x = placements[k - 1]
                img[:, y : y + size, x : x + size] = fill
            chunk.append(img)
        scores.append(model.logits(np.stack(chunk), batch_size=batch_size)[:, c])
    scores = np.concatenate(scores).astype(np.float64)
    drops = np.maximum(0.0, scores[0] - scores[1:])
    return drops.reshape(len(ys), len(xs)), ys, xs


def occlusion_map(model: Model, image, c: int, size: int = 11, stride: int = 4, fill: float = 0.0) -> Heatmap:
    """Sum-normalized occluding-patch heatmap.

    Each pixel receives the mean drop over all occluder placements covering
    it; pixels no placement covers get zero.
    """
    image = np.asarray(image, dtype=np.float32)
    _, H, W = image.shape
    drops, ys, xs = occlusion_drops(model, image, c, size, stride, fill)
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            total[y : y + size, x : x + size] += drops[i, j]
            count[y : y + size, x : x + size] += 1
    avg = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    s = avg.sum()
    if s <= 0:
        return Heatmap(np.zeros((H, W)), int(c), "sum-1", True)
    return Heatmap(avg / s, int(c), "sum-1", False)
