"""Two-stream MIL detection head with K refinement classifiers.

All heads are linear over precomputed proposal features. Gradients are
analytic; nothing here depends on an autodiff framework.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .types import PseudoLabels

EPS = 1e-7
CHECKPOINT_MAGIC = "oim-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.2
    enable_reweighting: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")


@dataclass
class MidModel:
    cls_w: np.ndarray
    cls_b: np.ndarray
    det_w: np.ndarray
    det_b: np.ndarray
    refine_w: list[np.ndarray] = field(default_factory=list)
    refine_b: list[np.ndarray] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return int(self.cls_w.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.cls_w.shape[1])

    @property
    def num_refinements(self) -> int:
        return len(self.refine_w)

    @classmethod
    def initialize(cls, d: int, num_classes: int, k: int = 3, seed: int = 0, scale: float = 0.01) -> "MidModel":
        if not 1 <= k <= 5:
            raise ValueError(f"number of refinement heads must be 1..5, got {k}")
        rng = np.random.default_rng(seed)
        return cls(
            cls_w=rng.normal(0.0, scale, (d, num_classes)),
            cls_b=np.zeros(num_classes),
            det_w=rng.normal(0.0, scale, (d, num_classes)),
            det_b=np.zeros(num_classes),
            refine_w=[rng.normal(0.0, scale, (d, num_classes + 1)) for _ in range(k)],
            refine_b=[np.zeros(num_classes + 1) for _ in range(k)],
        )

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = [
            ("cls_w", self.cls_w),
            ("cls_b", self.cls_b),
            ("det_w", self.det_w),
            ("det_b", self.det_b),
        ]
        for k, (w, b) in enumerate(zip(self.refine_w, self.refine_b), start=1):
            out += [(f"refine{k}_w", w), (f"refine{k}_b", b)]
        return out

    def copy(self) -> "MidModel":
        return MidModel(
            self.cls_w.copy(),
            self.cls_b.copy(),
            self.det_w.copy(),
            self.det_b.copy(),
            [w.copy() for w in self.refine_w],
            [b.copy() for b in self.refine_b],
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for _, p in self.parameters())

    def check(self) -> None:
        d, c = self.cls_w.shape
        shapes_ok = (
            self.cls_b.shape == (c,)
            and self.det_w.shape == (d, c)
            and self.det_b.shape == (c,)
            and all(w.shape == (d, c + 1) for w in self.refine_w)
            and all(b.shape == (c + 1,) for b in self.refine_b)
            and len(self.refine_w) == len(self.refine_b)
        )
        if not shapes_ok:
            raise ValueError("inconsistent head shapes")
        if not self.is_finite():
            raise ValueError("non-finite parameters")


def softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _mid_streams(model: MidModel, features: np.ndarray):
    x = np.asarray(features, dtype=np.float64)
    cls = softmax(x @ model.cls_w + model.cls_b, axis=1)
    det = softmax(x @ model.det_w + model.det_b, axis=0)
    return cls, det


def mid_forward(model: MidModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (proposal scores N x C, clamped image scores C)."""
    cls, det = _mid_streams(model, features)
    proposal_scores = cls * det
    image_scores = np.clip(proposal_scores.sum(axis=0), EPS, 1.0 - EPS)
    return proposal_scores, image_scores


def refine_logits(model: MidModel, k: int, features: np.ndarray) -> np.ndarray:
    if not 1 <= k <= model.num_refinements:
        raise ValueError(f"refinement head {k} out of range 1..{model.num_refinements}")
    return np.asarray(features, dtype=np.float64) @ model.refine_w[k - 1] + model.refine_b[k - 1]


def refine_forward(model: MidModel, k: int, features: np.ndarray) -> np.ndarray:
    return softmax(refine_logits(model, k, features), axis=1)


def predict(model: MidModel, features: np.ndarray) -> np.ndarray:
    """Detection scores N x (C+1): mean of the refinement heads."""
    if model.num_refinements == 0:
        p, _ = mid_forward(model, features)
        return np.hstack([np.zeros((p.shape[0], 1)), p])
    probs = [refine_forward(model, k, features) for k in range(1, model.num_refinements + 1)]
    return np.mean(probs, axis=0)


def image_classification_loss(image_scores: np.ndarray, image_labels: np.ndarray) -> float:
    s = np.asarray(image_scores, dtype=np.float64)
    y = np.asarray(image_labels, dtype=np.float64)
    return float(-np.sum(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


def mid_loss_and_grad(model: MidModel, features: np.ndarray, image_labels: np.ndarray):
    """Image-level cross entropy and its gradient w.r.t. the MID parameters.

    Returns ``(loss, proposal_scores, (g_cls_w, g_cls_b, g_det_w, g_det_b))``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(image_labels, dtype=np.float64)
    cls, det = _mid_streams(model, x)
    p = cls * det
    raw = p.sum(axis=0)
    s = np.clip(raw, EPS, 1.0 - EPS)
    loss = image_classification_loss(s, y)

    g_s = -y / s + (1.0 - y) / (1.0 - s)
    g_s = np.where((raw > EPS) & (raw < 1.0 - EPS), g_s, 0.0)
    g_cls = g_s[None, :] * det
    g_det = g_s[None, :] * cls
    g_a = cls * (g_cls - np.sum(g_cls * cls, axis=1, keepdims=True))
    g_b = det * (g_det - np.sum(g_det * det, axis=0, keepdims=True))
    grads = (x.T @ g_a, g_a.sum(axis=0), x.T @ g_b, g_b.sum(axis=0))
    return loss, p, grads


def oir_weight(is_core: bool, cfg: LossConfig) -> float:
    """Balance term added to 1 in the instance-reweighted loss."""
    if not cfg.enable_reweighting:
        return 0.0
    return cfg.beta - 1.0 if is_core else cfg.beta


def proposal_multipliers(labels: PseudoLabels, cfg: LossConfig) -> np.ndarray:
    """Per-proposal factor ``w_j * (1 + z_j)``."""
    if cfg.enable_reweighting:
        z = np.where(labels.is_core, cfg.beta - 1.0, cfg.beta)
    else:
        z = np.zeros(len(labels))
    return labels.weights * (1.0 + z)


def refinement_loss(probs: np.ndarray, labels: PseudoLabels, cfg: LossConfig) -> float:
    x = np.asarray(probs, dtype=np.float64)
    n = x.shape[0]
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for {n} proposals")
    picked = x[np.arange(n), labels.labels]
    return float(-np.sum(proposal_multipliers(labels, cfg) * np.log(np.maximum(picked, EPS))) / n)


def refinement_loss_grad(logits: np.ndarray, labels: PseudoLabels, cfg: LossConfig) -> np.ndarray:
    """Gradient of :func:`refinement_loss` (applied to ``softmax(logits)``) w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    probs = softmax(z, axis=1)
    target = np.zeros_like(probs)
    target[np.arange(n), labels.labels] = 1.0
    return proposal_multipliers(labels, cfg)[:, None] * (probs - target) / n


def refine_loss_and_grad(model: MidModel, k: int, features: np.ndarray, labels: PseudoLabels, cfg: LossConfig):
    x = np.asarray(features, dtype=np.float64)
    logits = refine_logits(model, k, x)
    probs = softmax(logits, axis=1)
    loss = refinement_loss(probs, labels, cfg)
    g = refinement_loss_grad(logits, labels, cfg)
    return loss, probs, (x.T @ g, g.sum(axis=0))


def save_checkpoint(model: MidModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_checkpoint(model))


def dumps_checkpoint(model: MidModel) -> str:
    model.check()
    buf = io.StringIO()
    buf.write(
        f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} d={model.feature_dim} "
        f"C={model.num_classes} K={model.num_refinements}\n"
    )
    for name, arr in model.parameters():
        a = np.atleast_2d(arr) if arr.ndim == 1 else arr
        buf.write(f"{name} {arr.ndim} {' '.join(str(s) for s in arr.shape)}\n")
        for row in a:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def load_checkpoint(path) -> MidModel:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())


def loads_checkpoint(text: str) -> MidModel:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty checkpoint")
    head = lines[0].split()
    if len(head) != 5 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError("not an oim checkpoint")
    if head[1] != f"v{CHECKPOINT_VERSION}":
        raise ValueError(f"unsupported checkpoint version {head[1]}")
    meta = dict(tok.split("=") for tok in head[2:])
    d, c, k = int(meta["d"]), int(meta["C"]), int(meta["K"])
    arrays: dict[str, np.ndarray] = {}
    pos = 1
    while pos < len(lines):
        parts = lines[pos].split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2 : 2 + ndim])
        rows = shape[0] if ndim == 2 else 1
        values = [[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows)]
        arrays[name] = np.asarray(values, dtype=np.float64).reshape(shape)
        pos += 1 + rows
    model = MidModel(
        arrays["cls_w"],
        arrays["cls_b"],
        arrays["det_w"],
        arrays["det_b"],
        [arrays[f"refine{i}_w"] for i in range(1, k + 1)],
        [arrays[f"refine{i}_b"] for i in range(1, k + 1)],
    )
    model.check()
    if model.feature_dim != d or model.num_classes != c:
        raise ValueError("checkpoint header does not match arrays")
    return model
