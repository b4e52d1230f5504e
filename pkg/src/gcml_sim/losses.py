"""Segmentation and mutual-learning losses over per-voxel probability maps.

A probability map is an array ``(..., C)`` whose class vectors sum to 1; the
leading axes index voxels. Ground truth is an integer label grid of the same
leading shape, class 0 is background. All losses are plain functions; the
``*_with_prob_grad`` variants additionally return d(loss)/d(probabilities) so
the model layer can chain through its softmax.

The mutual-learning family, from plain divergence to the regional contrastive
form used between exchanged models:

* voxel-wise KL divergence summed over the grid,
* the same divergence signed per voxel by whether the reference model
  predicts that voxel correctly (+1) or not (-1),
* the signed divergence restricted to, and normalized by, the union of the
  true foreground and the foreground predicted by the model being optimized.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import PROB_FLOOR, safe_log

__all__ = [
    "JACCARD_EPS",
    "DEFAULT_KL_CLAMP",
    "REGION_EPS",
    "foreground_probability",
    "foreground_mask",
    "jaccard_distance",
    "kl_divergence",
    "voxel_kl",
    "contrast_map",
    "contrastive_kl",
    "regional_contrastive_kl",
    "dcml_objective",
    "jaccard_with_prob_grad",
    "mutual_with_prob_grad",
    "dcml_with_prob_grad",
]

JACCARD_EPS = 1e-5
DEFAULT_KL_CLAMP = 10.0  # nats; caps the per-voxel repulsive term
REGION_EPS = 1e-8  # guards the empty-foreground normalization


def _flat_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim < 2:
        raise ValueError("probability map needs a trailing class axis")
    return p.reshape(-1, p.shape[-1])


def _check_pair(p_r, p_s):
    a, b = np.asarray(p_r), np.asarray(p_s)
    if a.shape != b.shape:
        raise ValueError(f"probability map shapes differ: {a.shape} vs {b.shape}")
    return _flat_probs(a), _flat_probs(b)


def _flat_labels(labels, probs) -> np.ndarray:
    lab = np.asarray(labels)
    p = np.asarray(probs)
    if lab.shape != p.shape[:-1]:
        raise ValueError(f"label shape {lab.shape} does not match grid {p.shape[:-1]}")
    flat = lab.reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= p.shape[-1]):
        raise ValueError("label outside [0, C)")
    return flat


def foreground_probability(probs) -> np.ndarray:
    """Per-voxel probability of any non-background class: 1 - P(class 0)."""
    p = np.asarray(probs, dtype=np.float64)
    return 1.0 - p[..., 0]


def foreground_mask(labels) -> np.ndarray:
    """Binary {0,1} mask marking voxels with any non-background label."""
    return (np.asarray(labels) > 0).astype(np.float64)


def jaccard_distance(probs, labels, eps: float = JACCARD_EPS) -> float:
    """Soft Jaccard loss 1 - (sum g*q + eps) / (sum g + sum q - sum g*q + eps).

    For more than two classes the loss is the mean of the one-vs-rest values
    over the foreground classes.
    """
    value, _ = jaccard_with_prob_grad(probs, labels, eps)
    return value


def jaccard_with_prob_grad(probs, labels, eps: float = JACCARD_EPS):
    p = _flat_probs(probs)
    lab = _flat_labels(labels, probs)
    c = p.shape[1]
    grad = np.zeros_like(p)
    total = 0.0
    for k in range(1, c):
        q = p[:, k]
        g = (lab == k).astype(np.float64)
        inter = float(np.dot(g, q)) + eps
        union = float(g.sum() + q.sum() - np.dot(g, q)) + eps
        total += 1.0 - inter / union
        # d(1 - I/U)/dq = -(g*U - I*(1-g)) / U^2
        grad[:, k] += -(g * union - inter * (1.0 - g)) / (union * union)
    n_fg = c - 1
    grad /= n_fg
    return total / n_fg, grad.reshape(np.asarray(probs).shape)


def voxel_kl(p_r, p_s) -> np.ndarray:
    """Per-voxel KL(P_r || P_s); P_s floored at 1e-12 inside the log, and
    classes where P_r is zero contribute zero."""
    a, b = _check_pair(p_r, p_s)
    terms = a * (safe_log(a) - safe_log(b))
    terms[a <= PROB_FLOOR] = 0.0
    kl = terms.sum(axis=1)
    return kl.reshape(np.asarray(p_r).shape[:-1])


def kl_divergence(p_r, p_s) -> float:
    """KL divergence from the reference map to the other, summed over voxels."""
    return float(voxel_kl(p_r, p_s).sum())


def contrast_map(p_s, labels) -> np.ndarray:
    """+1 where the map's argmax class equals the label, else -1.

    Ties resolve to the lowest class index (numpy argmax order).
    """
    p = _flat_probs(p_s)
    lab = _flat_labels(labels, p_s)
    pred = np.argmax(p, axis=1)
    c = np.where(pred == lab, 1, -1).astype(np.int8)
    return c.reshape(np.asarray(labels).shape)


def _clamped_signed_kl(p_r, p_s, c, kappa: float):
    """Per-voxel min(KL, kappa) * c plus the pass-through gate for gradients."""
    kl = voxel_kl(p_r, p_s).reshape(-1)
    cc = np.asarray(c, dtype=np.float64).reshape(-1)
    if cc.shape != kl.shape:
        raise ValueError("contrast map shape mismatch")
    clamped = np.minimum(kl, kappa)
    gate = (kl < kappa).astype(np.float64)
    return clamped * cc, gate * cc


def contrastive_kl(p_r, p_s, c, kappa: float = DEFAULT_KL_CLAMP) -> float:
    """Signed (and per-voxel clamped) divergence summed over the whole grid.

    With ``c`` all +1 and the clamp disabled (``kappa=math.inf``) this equals
    ``kl_divergence`` exactly; with ``c`` all -1 it is the exact negation.
    """
    signed, _ = _clamped_signed_kl(p_r, p_s, c, kappa)
    return float(signed.sum())


def regional_contrastive_kl(
    p_r, p_s, labels, c, kappa: float = DEFAULT_KL_CLAMP, eps_den: float = REGION_EPS
) -> float:
    """Signed divergence weighted by true + predicted foreground and
    normalized by the total foreground amount.

    value = sum_v KLc_v * (g_v + q_v) / (sum_v g_v + sum_v q_v + eps_den)
    where q is the foreground probability of ``p_r`` and g the binary mask.
    """
    signed, _ = _clamped_signed_kl(p_r, p_s, c, kappa)
    g = foreground_mask(labels).reshape(-1)
    q = foreground_probability(p_r).reshape(-1)
    if g.shape != signed.shape:
        raise ValueError("label shape mismatch")
    num = float(np.dot(signed, g + q))
    den = float(g.sum() + q.sum()) + eps_den
    return num / den


def mutual_with_prob_grad(
    own_probs,
    peer_probs,
    labels,
    *,
    kappa: float = DEFAULT_KL_CLAMP,
    use_contrast: bool = True,
    use_regional: bool = True,
    detach_region_weights: bool = False,
):
    """Value and d/d(own_probs) of the mutual-learning divergence term.

    ``own_probs`` belongs to the model being optimized; ``peer_probs`` is the
    frozen counterpart, which also supplies the correctness sign when
    ``use_contrast``. With ``use_regional`` the term is the normalized
    regional form; without it, the whole-grid form normalized by voxel count
    (the unnormalized sum scales with grid size and would drown the overlap
    term it is balanced against, see ``contrastive_kl`` for the raw sum).
    """
    own = _flat_probs(own_probs)
    peer = _flat_probs(peer_probs)
    if own.shape != peer.shape:
        raise ValueError("probability map shapes differ")
    lab = _flat_labels(labels, own_probs)

    if use_contrast:
        cflat = np.where(np.argmax(peer, axis=1) == lab, 1.0, -1.0)
    else:
        cflat = np.ones(own.shape[0])

    log_ratio = safe_log(own) - safe_log(peer)
    kl = (own * log_ratio).sum(axis=1)
    clamped = np.minimum(kl, kappa)
    gate = (kl < kappa).astype(np.float64)
    signed = clamped * cflat
    # d(min(KL,k)*c)/dP_vy = c * gate * (log P_vy - log S_vy + 1)
    d_signed = (cflat * gate)[:, None] * (log_ratio + 1.0)

    if not use_regional:
        n_vox = own.shape[0]
        value = float(signed.sum()) / n_vox
        grad = d_signed / n_vox
    else:
        g = (lab > 0).astype(np.float64)
        q = 1.0 - own[:, 0]
        w = g + q
        den = float(w.sum()) + REGION_EPS
        num = float(np.dot(signed, w))
        value = num / den
        grad = d_signed * w[:, None]
        if not detach_region_weights:
            # q enters both the weights and the normalization; dq/dP_v0 = -1,
            # so d(N/D)/dP_vy = (dN - value * dD)/D with dD/dP_vy = -delta_{y,0}.
            grad[:, 0] -= signed
            grad[:, 0] += value
        grad = grad / den

    return value, grad.reshape(np.asarray(own_probs).shape)


def dcml_objective(
    own_probs,
    peer_probs,
    labels,
    lam: float,
    role: str = "receiver",
    *,
    kappa: float = DEFAULT_KL_CLAMP,
    use_contrast: bool = True,
    use_regional: bool = True,
) -> float:
    """Combined exchange objective:
    (1 - lam) * jaccard(own, gt) + lam * regional signed divergence(own || peer).

    ``role`` records which side of the exchange is being optimized; the
    construction is fully symmetric, so both roles evaluate the same functional
    of (own, peer, gt).
    """
    value, _ = dcml_with_prob_grad(
        own_probs,
        peer_probs,
        labels,
        lam,
        role,
        kappa=kappa,
        use_contrast=use_contrast,
        use_regional=use_regional,
    )
    return value


def dcml_with_prob_grad(
    own_probs,
    peer_probs,
    labels,
    lam: float,
    role: str = "receiver",
    *,
    kappa: float = DEFAULT_KL_CLAMP,
    use_contrast: bool = True,
    use_regional: bool = True,
    detach_region_weights: bool = False,
):
    if role not in ("receiver", "sender"):
        raise ValueError(f"unknown role: {role!r}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    jd, d_jd = jaccard_with_prob_grad(own_probs, labels)
    mut, d_mut = mutual_with_prob_grad(
        own_probs,
        peer_probs,
        labels,
        kappa=kappa,
        use_contrast=use_contrast,
        use_regional=use_regional,
        detach_region_weights=detach_region_weights,
    )
    value = (1.0 - lam) * jd + lam * mut
    grad = (1.0 - lam) * d_jd + lam * d_mut
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite exchange objective (jd={jd}, mutual={mut})")
    return value, grad
