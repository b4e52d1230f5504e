"""Per-voxel patch classifier with hand-derived gradients.

Each voxel is classified from its (2r+1)^2 replicate-padded intensity window
plus a bias feature. ``hidden_width == 0`` gives a linear softmax model;
``hidden_width > 0`` inserts one tanh layer (smooth, so finite-difference
gradient checks are clean). The parameter vector is flat: the hidden weight
matrix (row-major) followed by the output matrix, or just the output matrix
for the linear model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import losses
from .numerics import RngStream, require_finite, softmax

__all__ = [
    "ArchSpec",
    "ModelParams",
    "ObjectiveSpec",
    "OBJECTIVE_JD",
    "OBJECTIVE_DCML_RECEIVER",
    "OBJECTIVE_DCML_SENDER",
    "OBJECTIVE_FEDPROX_JD",
    "extract_features",
    "forward",
    "forward_features",
    "loss_and_grad",
    "loss_and_grad_features",
    "sgd_step",
    "init_params",
    "INIT_SCALE",
]

INIT_SCALE = 0.1  # weights start i.i.d. uniform in [-INIT_SCALE, INIT_SCALE)

OBJECTIVE_JD = "jd"
OBJECTIVE_DCML_RECEIVER = "dcml_receiver"
OBJECTIVE_DCML_SENDER = "dcml_sender"
OBJECTIVE_FEDPROX_JD = "fedprox_jd"
_OBJECTIVES = (
    OBJECTIVE_JD,
    OBJECTIVE_DCML_RECEIVER,
    OBJECTIVE_DCML_SENDER,
    OBJECTIVE_FEDPROX_JD,
)


@dataclass(frozen=True)
class ArchSpec:
    patch_radius: int = 1
    hidden_width: int = 0
    num_classes: int = 2

    def __post_init__(self):
        if self.patch_radius < 0 or self.hidden_width < 0:
            raise ValueError("patch_radius and hidden_width must be nonnegative")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def feature_dim(self) -> int:
        side = 2 * self.patch_radius + 1
        return side * side + 1  # + bias

    @property
    def param_count(self) -> int:
        if self.hidden_width == 0:
            return self.num_classes * self.feature_dim
        return self.hidden_width * self.feature_dim + self.num_classes * (self.hidden_width + 1)


@dataclass(frozen=True)
class ModelParams:
    arch: ArchSpec
    weights: np.ndarray  # flat float64, length arch.param_count

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.arch.param_count,):
            raise ValueError(
                f"weight vector has length {w.shape}, arch needs {self.arch.param_count}"
            )
        require_finite(w, "model weights")
        object.__setattr__(self, "weights", w)

    def unpack(self):
        """Weight matrices: (W_out,) for linear, (W_hidden, W_out) otherwise."""
        a = self.arch
        if a.hidden_width == 0:
            return (self.weights.reshape(a.num_classes, a.feature_dim),)
        n1 = a.hidden_width * a.feature_dim
        w1 = self.weights[:n1].reshape(a.hidden_width, a.feature_dim)
        w2 = self.weights[n1:].reshape(a.num_classes, a.hidden_width + 1)
        return (w1, w2)


def init_params(arch: ArchSpec, rng: RngStream) -> ModelParams:
    """Small symmetric init keeps the initial softmax near uniform."""
    w = (rng.uniforms(arch.param_count) * 2.0 - 1.0) * INIT_SCALE
    return ModelParams(arch, w)


def extract_features(image, arch: ArchSpec) -> np.ndarray:
    """Per-voxel feature matrix (H*W, feature_dim) with replicate padding."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be a 2-D intensity grid")
    r = arch.patch_radius
    h, w = img.shape
    side = 2 * r + 1
    feats = np.empty((h * w, arch.feature_dim))
    if r == 0:
        feats[:, 0] = img.reshape(-1)
    else:
        padded = np.pad(img, r, mode="edge")
        col = 0
        for dy in range(side):
            for dx in range(side):
                feats[:, col] = padded[dy : dy + h, dx : dx + w].reshape(-1)
                col += 1
    feats[:, -1] = 1.0
    return feats


def _logits(params: ModelParams, feats: np.ndarray):
    """Returns (logits, hidden activations or None)."""
    mats = params.unpack()
    if len(mats) == 1:
        return feats @ mats[0].T, None
    w1, w2 = mats
    hidden = np.tanh(feats @ w1.T)
    hidden_b = np.concatenate([hidden, np.ones((hidden.shape[0], 1))], axis=1)
    return hidden_b @ w2.T, hidden


def forward_features(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    """Probability rows (V, C) for a precomputed feature matrix."""
    z, _ = _logits(params, feats)
    return softmax(z, axis=1)


def forward(params: ModelParams, image) -> np.ndarray:
    """Probability map (H, W, C) for an intensity grid."""
    img = np.asarray(image, dtype=np.float64)
    probs = forward_features(params, extract_features(img, params.arch))
    return probs.reshape(img.shape + (params.arch.num_classes,))


def _backward(params: ModelParams, feats: np.ndarray, hidden, d_logits: np.ndarray) -> np.ndarray:
    mats = params.unpack()
    if len(mats) == 1:
        return (d_logits.T @ feats).reshape(-1)
    _, w2 = mats
    hidden_b = np.concatenate([hidden, np.ones((hidden.shape[0], 1))], axis=1)
    d_w2 = d_logits.T @ hidden_b
    d_hidden = d_logits @ w2[:, :-1]
    d_pre = d_hidden * (1.0 - hidden * hidden)
    d_w1 = d_pre.T @ feats
    return np.concatenate([d_w1.reshape(-1), d_w2.reshape(-1)])


@dataclass(frozen=True)
class ObjectiveSpec:
    """What to optimize in one SGD step.

    ``peer`` is the frozen counterpart model for the mutual-learning
    objectives; ``anchor``/``mu`` configure the proximal pull of the
    fedprox variant. ``lam`` balances the overlap loss against the
    mutual-learning divergence.
    """

    kind: str = OBJECTIVE_JD
    lam: float = 0.5
    kappa: float = losses.DEFAULT_KL_CLAMP
    use_contrast: bool = True
    use_regional: bool = True
    detach_region_weights: bool = False
    mu: float = 0.0
    anchor: Optional[np.ndarray] = None
    peer: Optional[ModelParams] = None

    def __post_init__(self):
        if self.kind not in _OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.kind in (OBJECTIVE_DCML_RECEIVER, OBJECTIVE_DCML_SENDER) and self.peer is None:
            raise ValueError("mutual-learning objective needs a frozen peer model")
        if self.kind == OBJECTIVE_FEDPROX_JD and self.anchor is None:
            raise ValueError("fedprox objective needs anchor weights")


def _case_loss_grad(params: ModelParams, feats, labels, objective: ObjectiveSpec):
    c = params.arch.num_classes
    z, hidden = _logits(params, feats)
    probs = softmax(z, axis=1)
    flat_labels = np.asarray(labels).reshape(-1)

    if objective.kind in (OBJECTIVE_JD, OBJECTIVE_FEDPROX_JD):
        value, d_probs = losses.jaccard_with_prob_grad(probs, flat_labels)
    else:
        peer_probs = forward_features(objective.peer, feats)
        role = "receiver" if objective.kind == OBJECTIVE_DCML_RECEIVER else "sender"
        value, d_probs = losses.dcml_with_prob_grad(
            probs,
            peer_probs,
            flat_labels,
            objective.lam,
            role,
            kappa=objective.kappa,
            use_contrast=objective.use_contrast,
            use_regional=objective.use_regional,
            detach_region_weights=objective.detach_region_weights,
        )

    # Chain through the row softmax: dZ = P * (dP - sum_y dP_y P_y).
    inner = np.sum(d_probs * probs, axis=1, keepdims=True)
    d_logits = probs * (d_probs - inner)
    grad = _backward(params, feats, hidden, d_logits)
    return value, grad


def loss_and_grad_features(
    params: ModelParams, batch: Sequence, objective: ObjectiveSpec
):
    """Like ``loss_and_grad`` but over (feature_matrix, flat_labels) pairs."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    total = 0.0
    grad = np.zeros_like(params.weights)
    for feats, labels in batch:
        value, g = _case_loss_grad(params, feats, labels, objective)
        total += value
        grad += g
    n = len(batch)
    total /= n
    grad /= n
    if objective.kind == OBJECTIVE_FEDPROX_JD and objective.mu != 0.0:
        delta = params.weights - objective.anchor
        total += 0.5 * objective.mu * float(delta @ delta)
        grad += objective.mu * delta
    if not np.isfinite(total) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite loss/gradient under objective {objective.kind!r}"
        )
    return total, grad


def loss_and_grad(params: ModelParams, batch: Sequence, objective: ObjectiveSpec):
    """Mean loss over a batch of (image, labels) pairs and its gradient.

    The gradient is exact (matches central finite differences of the loss);
    per-image losses are averaged so the step size is batch-size free.
    """
    prepared = [
        (extract_features(image, params.arch), np.asarray(labels).reshape(-1))
        for image, labels in batch
    ]
    return loss_and_grad_features(params, prepared, objective)


def sgd_step(params: ModelParams, grad: np.ndarray, eta: float) -> ModelParams:
    """One plain gradient step: weights - eta * grad."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.weights.shape:
        raise ValueError("gradient length does not match weights")
    return ModelParams(params.arch, params.weights - eta * g)
