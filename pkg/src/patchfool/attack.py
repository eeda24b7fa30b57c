"""Adversarial patches that also steer the Grad-CAM interpretation.

All per-image attacks share one sign-gradient loop that runs a batch of
independent images at once: every image has its own patch variable and its
loss depends on nothing else, so the gradient of the summed batch loss is
the per-image gradient.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .data import LabeledImage, default_decoy_rect, default_patch_rect, stack
from .imageio import read_image, write_image
from .interpret import forward_with_features, gradcam_from_features
from .model import Model

MODES = ("targeted", "nontargeted", "uniform", "full-image", "universal")
POLICIES = ("step-rnd", "least-likely", "fixed")

MODE_DEFAULTS = {
    "targeted": dict(lam=0.05, eta=0.005, iterations=750),
    "nontargeted": dict(lam=0.001, eta=0.005, iterations=750),
    "uniform": dict(lam=0.75, eta=0.007, iterations=1000),
    "full-image": dict(lam=0.05, eta=0.001, iterations=150, eps=8 / 255),
    "universal": dict(lam=0.09, eta=0.05, iterations=1, target_policy="fixed"),
}


class AttackError(ValueError):
    pass


@dataclass
class PatchSpec:
    x0: int
    y0: int
    width: int
    height: int
    z: np.ndarray | None = None  # (C, height, width) in [0, 1]

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.width, self.height)

    def check_bounds(self, height: int, width: int) -> None:
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.width > width or self.y0 + self.height > height:
            raise AttackError(f"patch {self.rect} outside a {width}x{height} image")


@dataclass
class AttackConfig:
    mode: str = "targeted"
    lam: float = 0.05
    eta: float = 0.005
    iterations: int = 750
    target_policy: str = "step-rnd"
    target: int | None = None
    eps: float | None = None
    patch: tuple[int, int, int, int] | None = None  # x0, y0, w, h; default top-left
    decoy: tuple[int, int, int, int] | None = None  # default top-right
    seed: int = 0
    stop_alpha: bool = False
    epochs: int = 4  # universal mode only
    batch_size: int = 32  # universal mode only

    def __post_init__(self):
        if self.mode not in MODES:
            raise AttackError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.target_policy not in POLICIES:
            raise AttackError(f"unknown target policy {self.target_policy!r}")
        if self.lam < 0:
            raise AttackError("lambda must be >= 0")
        if self.eta <= 0:
            raise AttackError("eta must be > 0")
        if self.iterations < 1:
            raise AttackError("iterations must be >= 1")
        if self.eps is not None and not 0 < self.eps <= 1:
            raise AttackError("eps must lie in (0, 1]")
        if self.mode == "full-image" and self.eps is None:
            raise AttackError("full-image mode needs eps")
        if self.target_policy == "fixed" and self.target is None:
            raise AttackError("fixed target policy needs a target class")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "AttackConfig":
        """Config with the per-mode default hyperparameters, then ``overrides``."""
        if mode not in MODES:
            raise AttackError(f"unknown mode {mode!r}; choose from {MODES}")
        kw = dict(MODE_DEFAULTS[mode])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(mode=mode, **kw)

    def patch_rect(self, image_size: int) -> tuple[int, int, int, int]:
        return tuple(self.patch) if self.patch is not None else default_patch_rect(image_size)

    def decoy_rect(self, image_size: int) -> tuple[int, int, int, int]:
        return tuple(self.decoy) if self.decoy is not None else default_decoy_rect(image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("patch", "decoy"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


@dataclass
class IterRecord:
    total: float
    ce: float
    heat: float
    top1: int


@dataclass
class AttackResult:
    mode: str
    original: int | None
    target: int | None
    final: int | None
    success: bool
    trace: list[IterRecord] = field(default_factory=list)
    patch: PatchSpec | None = None
    adv_image: np.ndarray | None = None  # composed / perturbed image, (C, H, W)
    target_rate: float | None = None  # universal mode: held-out fraction predicted as target

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "original": self.original,
            "target": self.target,
            "final": self.final,
            "success": self.success,
            "target_rate": self.target_rate,
            "patch": None if self.patch is None else list(self.patch.rect),
            "trace": [asdict(r) for r in self.trace],
        }


# ---------------------------------------------------------------- primitives


def compose(x: np.ndarray, patch: PatchSpec) -> np.ndarray:
    """Paste ``patch.z`` into ``x`` (C, H, W); every other pixel is left untouched."""
    out = np.array(x, copy=True)
    if patch.width == 0 or patch.height == 0:
        return out
    patch.check_bounds(*x.shape[-2:])
    out[..., patch.y0 : patch.y0 + patch.height, patch.x0 : patch.x0 + patch.width] = patch.z
    return out


def pgd_step(z: np.ndarray, grad: np.ndarray, eta: float, lower, upper) -> np.ndarray:
    """clip(z - eta * sign(grad), lower, upper), with sign(0) = 0."""
    if np.any(np.asarray(lower) > np.asarray(upper)):
        raise AttackError("lower bound exceeds upper bound")
    step = z - np.asarray(eta, dtype=z.dtype) * np.sign(grad).astype(z.dtype)
    return np.clip(step, lower, upper).astype(z.dtype)


def select_target(logits: np.ndarray, policy: str, original: int, rng: np.random.Generator,
                  fixed: int | None = None) -> int:
    logits = np.asarray(logits).reshape(-1)
    k = logits.shape[0]
    if k < 2:
        raise AttackError("need at least two classes")
    if policy == "step-rnd":
        t = int(rng.integers(k - 1))
        return t + 1 if t >= original else t
    if policy == "least-likely":
        return int(np.argmin(logits))
    if policy == "fixed":
        if fixed is None or not 0 <= fixed < k:
            raise AttackError(f"fixed target {fixed} outside 0..{k - 1}")
        if fixed == original:
            raise AttackError(f"fixed target {fixed} equals the original prediction")
        return int(fixed)
    raise AttackError(f"unknown target policy {policy!r}")


def chance_margin(num_classes: int) -> float:
    """M = -log(1 / num_classes): cross-entropy of a chance-level prediction."""
    return -math.log(1.0 / num_classes)


def _rect_mask(shape_hw, rect) -> np.ndarray:
    x0, y0, w, h = rect
    m = np.zeros(shape_hw, dtype=np.float32)
    m[y0 : y0 + h, x0 : x0 + w] = 1.0
    return m


def _rects_overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


# ---------------------------------------------------------------- per-image attacks


def _image_rng(seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, image_id])


def _region_sum(maps: de.Tensor, mask: np.ndarray) -> de.Tensor:
    return de.sum(maps * de.Tensor(mask, dtype=maps.dtype), axis=(1, 2))


def _heat(feats, logits, classes, hw, cfg, mask, normalize=True, graph=True):
    """Heatmap term per image; built without a graph when it cannot affect the gradient."""
    maps, _ = gradcam_from_features(feats, logits, classes, hw, as_graph=graph,
                                    stop_alpha=cfg.stop_alpha, normalize=normalize)
    return _region_sum(maps, mask) if mask is not None else de.sum(maps, axis=(1, 2))


def _losses(model: Model, x_adv: de.Tensor, cfg: AttackConfig, original, target, masks):
    """Per-image (total, first term, heatmap term, top-1) at the current iterate."""
    hw = x_adv.shape[2:]
    graph = cfg.lam > 0
    feats, logits = forward_with_features(model, x_adv, as_graph=True)
    top1 = logits.data.argmax(axis=1)
    if cfg.mode == "nontargeted":
        first = de.relu(chance_margin(model.num_classes) - de.softmax_cross_entropy(logits, original))
        heat = _heat(feats, logits, top1, hw, cfg, masks["patch"], graph=graph)
    else:
        first = de.softmax_cross_entropy(logits, target)
        if cfg.mode == "full-image":
            heat = _heat(feats, logits, original, hw, cfg, None, normalize=False, graph=graph)
        elif cfg.mode == "uniform":
            heat = _heat(feats, logits, target, hw, cfg, masks["decoy"], graph=graph)
        else:
            heat = _heat(feats, logits, target, hw, cfg, masks["patch"], graph=graph)
    sign = -1.0 if cfg.mode == "uniform" else 1.0
    total = first + heat * (sign * cfg.lam) if graph else first
    return total, first, heat, top1


def run_attack_batch(model: Model, images: np.ndarray, cfg: AttackConfig, image_ids=None) -> list[AttackResult]:
    """Run one of the per-image modes on a stack of (C, H, W) images.

    Each image's target and initial patch come from a generator seeded by
    ``(cfg.seed, image_id)``, so results do not depend on how images are
    grouped into batches for the random draws.
    """
    if cfg.mode == "universal":
        raise AttackError("use attack_universal for universal patches")
    images = np.asarray(images, dtype=np.float32)
    n, c, H, W = images.shape
    ids = list(range(n)) if image_ids is None else list(image_ids)
    clean_logits = model.logits(images)
    original = clean_logits.argmax(axis=1)

    target = np.full(n, -1, dtype=np.int64)
    rngs = [_image_rng(cfg.seed, i) for i in ids]
    if cfg.mode != "nontargeted":
        for k in range(n):
            target[k] = select_target(clean_logits[k], cfg.target_policy, int(original[k]), rngs[k], cfg.target)

    masks = {}
    if cfg.mode == "full-image":
        z = images.copy()
        lower = np.clip(images - cfg.eps, 0.0, 1.0).astype(np.float32)
        upper = np.clip(images + cfg.eps, 0.0, 1.0).astype(np.float32)
        background = None
    else:
        rect = cfg.patch_rect(H)
        patch = PatchSpec(*rect)
        patch.check_bounds(H, W)
        x0, y0, pw, ph = rect
        masks["patch"] = _rect_mask((H, W), rect)
        if cfg.mode == "uniform":
            decoy = cfg.decoy_rect(H)
            PatchSpec(*decoy).check_bounds(H, W)
            if _rects_overlap(rect, decoy):
                raise AttackError(f"decoy {decoy} overlaps patch {rect}")
            masks["decoy"] = _rect_mask((H, W), decoy)
        z = np.stack([r.uniform(0.0, 1.0, size=(c, ph, pw)) for r in rngs]).astype(np.float32)
        lower, upper = 0.0, 1.0
        background = images * (1.0 - masks["patch"])

    traces: list[list[IterRecord]] = [[] for _ in range(n)]
    for _ in range(cfg.iterations):
        zt = de.Tensor(z, requires_grad=True)
        x_adv = zt if background is None else de.Tensor(background) + de.embed(zt, y0, x0, H, W)
        total, first, heat, top1 = _losses(model, x_adv, cfg, original, target, masks)
        g = de.grad(de.sum(total), zt)
        for k in range(n):
            traces[k].append(IterRecord(float(total.data[k]), float(first.data[k]),
                                        float(heat.data[k]), int(top1[k])))
        z = pgd_step(z, g.data, cfg.eta, lower, upper)

    if background is None:
        adv = z
    else:
        adv = background.copy()
        adv[:, :, y0 : y0 + ph, x0 : x0 + pw] = z
    final = model.predict(adv)
    results = []
    for k in range(n):
        if cfg.mode == "nontargeted":
            ok, tgt = bool(final[k] != original[k]), None
        else:
            ok, tgt = bool(final[k] == target[k]), int(target[k])
        results.append(AttackResult(
            mode=cfg.mode,
            original=int(original[k]),
            target=tgt,
            final=int(final[k]),
            success=ok,
            trace=traces[k],
            patch=None if background is None else PatchSpec(x0, y0, pw, ph, z[k].copy()),
            adv_image=adv[k].copy(),
        ))
    return results


def _single(model, image, cfg, mode, image_id):
    if cfg.mode != mode:
        raise AttackError(f"config mode is {cfg.mode!r}, expected {mode!r}")
    return run_attack_batch(model, np.asarray(image)[None], cfg, [image_id])[0]


def attack_targeted(model: Model, image, cfg: AttackConfig, image_id: int = 0) -> AttackResult:
    """Targeted patch; loss = CE(x_adv, t) + lam * sum(G_hat^t(x_adv) * patch mask)."""
    return _single(model, image, cfg, "targeted", image_id)


def attack_nontargeted(model: Model, image, cfg: AttackConfig, image_id: int = 0) -> AttackResult:
    """Patch pushing the original class below chance, hiding the current top class's map."""
    return _single(model, image, cfg, "nontargeted", image_id)


def attack_uniform(model: Model, image, cfg: AttackConfig, image_id: int = 0) -> AttackResult:
    """Targeted patch that pulls Grad-CAM mass into the decoy rectangle."""
    return _single(model, image, cfg, "uniform", image_id)


def attack_full_image(model: Model, image, cfg: AttackConfig, image_id: int = 0) -> AttackResult:
    """eps-bounded whole-image perturbation suppressing the original class's raw Grad-CAM."""
    return _single(model, image, cfg, "full-image", image_id)


# ---------------------------------------------------------------- universal


def apply_patch(images: np.ndarray, patch: PatchSpec) -> np.ndarray:
    out = np.array(images, dtype=np.float32, copy=True)
    out[..., patch.y0 : patch.y0 + patch.height, patch.x0 : patch.x0 + patch.width] = patch.z
    return out


def attack_universal(model: Model, train_set, cfg: AttackConfig, heldout=None) -> AttackResult:
    """One patch for every image, fixed target, mini-batch sign-gradient descent.

    The batch gradient is the sum of the per-image gradients; the patch takes
    one step per batch. ``heldout`` images (never used for optimization)
    determine ``target_rate`` and the success flag.
    """
    if cfg.mode != "universal":
        raise AttackError(f"config mode is {cfg.mode!r}, expected 'universal'")
    images = _as_images(train_set)
    if len(images) == 0:
        raise AttackError("empty training split")
    if heldout is not None:
        held = _as_images(heldout)
        if len(held) == 0:
            raise AttackError("empty held-out split")
    else:
        held = images
    if cfg.target is None or not 0 <= cfg.target < model.num_classes:
        raise AttackError("universal mode needs a valid fixed target class")
    n, c, H, W = images.shape
    rect = cfg.patch_rect(H)
    PatchSpec(*rect).check_bounds(H, W)
    x0, y0, pw, ph = rect
    mask = _rect_mask((H, W), rect)
    background = (images * (1.0 - mask)).astype(np.float32)
    rng = np.random.default_rng(cfg.seed)
    z = rng.uniform(0.0, 1.0, size=(c, ph, pw)).astype(np.float32)
    t = int(cfg.target)
    trace: list[IterRecord] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            zt = de.Tensor(z, requires_grad=True)
            x_adv = de.Tensor(background[idx]) + de.embed(zt, y0, x0, H, W)
            targets = np.full(len(idx), t)
            total, first, heat, top1 = _losses(model, x_adv, _as_targeted(cfg), None, targets, {"patch": mask})
            g = de.grad(de.sum(total), zt)
            trace.append(IterRecord(float(total.data.mean()), float(first.data.mean()),
                                    float(heat.data.mean()), Counter(top1.tolist()).most_common(1)[0][0]))
            z = pgd_step(z, g.data, cfg.eta, 0.0, 1.0)
    patch = PatchSpec(x0, y0, pw, ph, z)
    pred = model.predict(apply_patch(held, patch))
    rate = float(np.mean(pred == t))
    return AttackResult("universal", None, t, None, rate >= 0.5, trace, patch, None, rate)


def _as_images(items) -> np.ndarray:
    if len(items) and isinstance(items[0], LabeledImage):
        return stack(items)
    return np.asarray(items, dtype=np.float32)


def _as_targeted(cfg: AttackConfig) -> AttackConfig:
    return AttackConfig(mode="targeted", lam=cfg.lam, eta=cfg.eta, iterations=1, target_policy="fixed",
                        target=cfg.target, patch=cfg.patch, seed=cfg.seed, stop_alpha=cfg.stop_alpha)


# ---------------------------------------------------------------- serialization


def save_patch(prefix, patch: PatchSpec, target: int | None, seed: int, cfg: AttackConfig) -> tuple[Path, Path]:
    """Write ``<prefix>.ppm`` (patch pixels) and ``<prefix>.json`` (geometry and config)."""
    prefix = Path(prefix)
    ppm = prefix.with_name(prefix.name + ".ppm")
    sidecar = prefix.with_name(prefix.name + ".json")
    write_image(ppm, patch.z)
    meta = {"x0": patch.x0, "y0": patch.y0, "w": patch.width, "h": patch.height,
            "target": target, "seed": seed, "cfg": cfg.to_dict(), "pixels": ppm.name}
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(sidecar)
    return ppm, sidecar


def load_patch(sidecar) -> tuple[PatchSpec, dict]:
    sidecar = Path(sidecar)
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    z = read_image(sidecar.with_name(meta.get("pixels", sidecar.with_suffix(".ppm").name)))
    patch = PatchSpec(int(meta["x0"]), int(meta["y0"]), int(meta["w"]), int(meta["h"]), z)
    if z.shape[1:] != (patch.height, patch.width):
        raise AttackError(f"patch pixels {z.shape} do not match sidecar geometry {patch.rect}")
    return patch, meta
