"""Distillation objectives with analytic gradients.

The two similarity losses transfer structure from a frozen teacher to a
student:

* pixel-wise (``psd_loss``): match l2-normalized residual attention maps
  across tap pairs; the sum over pairs is scaled by 1/((K-1) * Z) for K
  taps and Z spatial sites.
* category-wise (``csd_loss``): soften logits at temperature tau, build the
  C x C cosine matrix between per-category spatial response vectors, and
  match it under 1/C^2 squared-Frobenius distance.

The comparison baselines (``kd_loss``, ``at_loss``, ``fitnet_loss``,
``affinity_loss``) and the weighted total objective live here too. Every
loss returns a :class:`GradPair`; teacher-side inputs are treated as
constants and receive no gradient.

Each loss also exposes a ``*_teacher_context`` helper that precomputes the
teacher-side constants once; evaluating against the context is bitwise
identical to passing the raw teacher inputs, which lets a training loop
cache teacher work per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .attention import TapSet, attention_map, attention_map_backward
from .tensor_ops import (EPS, GradPair, l2_normalize, l2_normalize_backward,
                         log_softmax_over_channels, resize_bilinear,
                         resize_bilinear_backward, softmax_over_channels)


@dataclass
class LossWeights:
    """Weights of the combined objective: total = ce + alpha * pixel-sim
    + beta * category-sim, with logits softened at temperature tau."""

    alpha: float = 1000.0
    beta: float = 10.0
    tau: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------------------
# pixel-wise similarity


def _normalized_attention(a: np.ndarray, out_hw, eps: float):
    """Attention map of ``a`` resized to ``out_hw`` then flat-normalized.

    Returns the unit map plus the intermediates the backward pass needs.
    """
    f = attention_map(a, "sum", 2.0)
    resized = f.shape != tuple(out_hw)
    fr = resize_bilinear(f, *out_hw) if resized else f
    return l2_normalize(fr, eps), f, fr, resized


def _normalized_attention_backward(grad_u, a, f, fr, resized, eps):
    g = l2_normalize_backward(fr, grad_u, eps)
    if resized:
        g = resize_bilinear_backward(g, *f.shape)
    return attention_map_backward(a, g, "sum", 2.0)


def psd_teacher_context(teacher: TapSet, eps: float = EPS):
    """Normalized residual attention map per teacher pair (constants)."""
    out = []
    for m, n in teacher.pairs:
        a_m, a_n = teacher.taps[m][1], teacher.taps[n][1]
        f_m = attention_map(a_m, "sum", 2.0)
        f_n = attention_map(a_n, "sum", 2.0)
        hw = f_m.shape if f_m.size >= f_n.size else f_n.shape
        ra = (l2_normalize(resize_bilinear(f_m, *hw) if f_m.shape != hw else f_m, eps)
              - l2_normalize(resize_bilinear(f_n, *hw) if f_n.shape != hw else f_n, eps))
        out.append(l2_normalize(ra, eps))
    return out


def psd_loss(student: TapSet, teacher, eps: float = EPS) -> GradPair:
    """Pixel-wise similarity distillation loss.

    L = 1/((K-1) Z) * sum over pairs of
        || RA_S/||RA_S|| - RA_T/||RA_T|| ||^2

    with K the student tap count and Z the spatial size the pair is
    compared at (maps are resized up to a common size before any
    normalization). Gradients flow into every student feature map; the
    teacher side is constant. ``teacher`` is a TapSet or a precomputed
    :func:`psd_teacher_context` list.
    """
    if isinstance(teacher, TapSet):
        if len(teacher.pairs) != len(student.pairs):
            raise ValueError(
                f"student has {len(student.pairs)} pairs, teacher {len(teacher.pairs)}")
        teacher = psd_teacher_context(teacher, eps)
    elif len(teacher) != len(student.pairs):
        raise ValueError("teacher context does not match student pair list")

    k = len(student.taps)
    grads = {name: np.zeros_like(a, dtype=np.float64) for name, a in student.taps}
    value = 0.0
    for (m, n), u_t in zip(student.pairs, teacher):
        name_m, a_m = student.taps[m]
        name_n, a_n = student.taps[n]
        f_m = attention_map(a_m, "sum", 2.0)
        f_n = attention_map(a_n, "sum", 2.0)
        hw = f_m.shape if f_m.size >= f_n.size else f_n.shape
        u_m, _, fr_m, res_m = _normalized_attention(a_m, hw, eps)
        u_n, _, fr_n, res_n = _normalized_attention(a_n, hw, eps)
        ra = u_m - u_n
        # reconcile residual-map grids across networks: resize the smaller
        # one up, re-normalizing whichever side was resampled
        upsized = ra.shape != u_t.shape and ra.size < u_t.size
        if upsized:
            ra_small_shape = ra.shape
            ra = resize_bilinear(ra, *u_t.shape)
        elif ra.shape != u_t.shape:
            u_t = l2_normalize(resize_bilinear(u_t, *ra.shape), eps)
        z = ra.size
        u_s = l2_normalize(ra, eps)
        d = u_s - u_t
        scale = 1.0 / ((k - 1) * z)
        value += scale * float(np.sum(d * d))

        g_ra = l2_normalize_backward(ra, 2.0 * scale * d, eps)
        if upsized:
            g_ra = resize_bilinear_backward(g_ra, *ra_small_shape)
        grads[name_m] += _normalized_attention_backward(g_ra, a_m, f_m, fr_m, res_m, eps)
        grads[name_n] += _normalized_attention_backward(-g_ra, a_n, f_n, fr_n, res_n, eps)
    return GradPair(value=value, grads=grads)


# ---------------------------------------------------------------------------
# category-wise similarity


def correlation_matrix(q: np.ndarray, eps: float = EPS) -> np.ndarray:
    """C x C cosine-similarity matrix between the per-category rows of a
    (C, M) response matrix. Symmetric with unit diagonal for rows whose
    norm exceeds eps."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"expected (C, M) matrix, got shape {q.shape}")
    norms = np.sqrt(np.sum(q * q, axis=1))
    u = q / np.maximum(norms, eps)[:, None]
    return u @ u.T


def csd_teacher_context(z_t: np.ndarray, tau: float, eps: float = EPS) -> np.ndarray:
    """Teacher correlation matrix at temperature tau (a constant)."""
    c = z_t.shape[0]
    q_t = softmax_over_channels(z_t, tau).reshape(c, -1)
    return correlation_matrix(q_t, eps)


def csd_loss(z_s: np.ndarray, z_t, tau: float, eps: float = EPS) -> GradPair:
    """Category-wise similarity distillation loss between (C, H', W') logit
    tensors: 1/C^2 times the squared Frobenius distance between the two
    correlation matrices of tau-softened logits. Gradient w.r.t. ``z_s``
    only. ``z_t`` is a logits tensor or a precomputed
    :func:`csd_teacher_context` matrix.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    if isinstance(z_t, np.ndarray) and z_t.ndim == 3:
        if z_t.shape != z_s.shape:
            raise ValueError(f"logit shapes differ: {z_s.shape} vs {z_t.shape}")
        cm_t = csd_teacher_context(z_t, tau, eps)
    else:
        cm_t = np.asarray(z_t, dtype=np.float64)
    c = z_s.shape[0]
    if cm_t.shape != (c, c):
        raise ValueError(f"teacher matrix shape {cm_t.shape} does not match C={c}")

    q = softmax_over_channels(z_s, tau)
    qm = q.reshape(c, -1)
    norms = np.sqrt(np.sum(qm * qm, axis=1))
    safe = np.maximum(norms, eps)
    u = qm / safe[:, None]
    cm_s = u @ u.T
    diff = cm_s - cm_t
    value = float(np.sum(diff * diff)) / (c * c)

    # d value / d CM_S, then back through U U^T (symmetric G -> 2 G U)
    g_cm = (2.0 / (c * c)) * diff
    g_u = 2.0 * (g_cm @ u)
    # rows through the norm guard
    dot = np.sum(u * g_u, axis=1)
    g_qm = np.where((norms > eps)[:, None],
                    (g_u - u * dot[:, None]) / safe[:, None],
                    g_u / eps)
    # through the tempered softmax, per spatial site
    g_q = g_qm.reshape(q.shape)
    site_dot = np.sum(q * g_q, axis=0, keepdims=True)
    g_z = q * (g_q - site_dot) / tau
    return GradPair(value=value, grads={"logits": g_z})


class KdTeacherContext(NamedTuple):
    """Teacher log-probabilities at temperature tau (a constant)."""

    log_probs: np.ndarray


def kd_teacher_context(z_t: np.ndarray, tau: float) -> KdTeacherContext:
    return KdTeacherContext(
        log_softmax_over_channels(np.asarray(z_t, dtype=np.float64), tau))


def kd_loss(z_s: np.ndarray, z_t, tau: float) -> GradPair:
    """Soft-target distillation: mean over spatial sites of
    KL(q_t || q_s) with both logits softened at tau, scaled by tau^2 so the
    gradient magnitude stays comparable across temperatures."""
    z_s = np.asarray(z_s, dtype=np.float64)
    if isinstance(z_t, KdTeacherContext):
        log_qt = z_t.log_probs
    else:
        z_t = np.asarray(z_t, dtype=np.float64)
        if z_t.shape != z_s.shape:
            raise ValueError(f"logit shapes differ: {z_s.shape} vs {z_t.shape}")
        log_qt = kd_teacher_context(z_t, tau).log_probs
    sites = z_s.shape[1] * z_s.shape[2]
    log_qs = log_softmax_over_channels(z_s, tau)
    q_t = np.exp(log_qt)
    value = tau * tau * float(np.sum(q_t * (log_qt - log_qs))) / sites
    q_s = np.exp(log_qs)
    g_z = tau * (q_s - q_t) / sites
    return GradPair(value=value, grads={"logits": g_z})


# ---------------------------------------------------------------------------
# pixel-level baselines


def at_teacher_context(teacher: TapSet, eps: float = EPS):
    """Normalized teacher attention map per tap (constants)."""
    return [l2_normalize(attention_map(a, "sum", 2.0), eps) for _, a in teacher.taps]


def at_loss(student: TapSet, teacher, eps: float = EPS) -> GradPair:
    """Attention-transfer baseline: mean over index-aligned taps of
    || N(F(A_S)) - N(F(A_T)) ||^2 on flat-normalized attention maps (no
    residual subtraction). Maps are resized to a common size first."""
    if isinstance(teacher, TapSet):
        if len(teacher.taps) != len(student.taps):
            raise ValueError(
                f"student has {len(student.taps)} taps, teacher {len(teacher.taps)}")
        teacher = at_teacher_context(teacher, eps)
    elif len(teacher) != len(student.taps):
        raise ValueError("teacher context does not match student tap list")

    grads = {}
    value = 0.0
    n_taps = len(student.taps)
    for (name, a), u_t in zip(student.taps, teacher):
        f_raw = attention_map(a, "sum", 2.0)
        hw = f_raw.shape if f_raw.size >= u_t.size else u_t.shape
        if hw != u_t.shape:
            u_t = l2_normalize(resize_bilinear(u_t, *hw), eps)
        u_s, _, fr, resized = _normalized_attention(a, hw, eps)
        d = u_s - u_t
        value += float(np.sum(d * d)) / n_taps
        g = _normalized_attention_backward(2.0 * d / n_taps, a, f_raw, fr, resized, eps)
        grads[name] = g
    return GradPair(value=value, grads=grads)


def fitnet_loss(a_s: np.ndarray, a_t: np.ndarray,
                adapter: np.ndarray | None = None) -> GradPair:
    """Feature-mimic baseline: mean squared error between the (optionally
    1x1-conv adapted) student feature map and the teacher feature map.

    ``adapter`` is a (N_t, N_s) weight matrix applied per pixel; identity
    (None) requires matching channel counts. The student map is bilinearly
    resized to the teacher's spatial size if needed. Gradients cover the
    student features and, when present, the adapter weights.
    """
    a_s = np.asarray(a_s, dtype=np.float64)
    a_t = np.asarray(a_t, dtype=np.float64)
    if adapter is None and a_s.shape[0] != a_t.shape[0]:
        raise ValueError(
            f"identity adapter needs matching channels, got {a_s.shape[0]} vs {a_t.shape[0]}")
    if adapter is not None:
        adapter = np.asarray(adapter, dtype=np.float64)
        if adapter.shape != (a_t.shape[0], a_s.shape[0]):
            raise ValueError(
                f"adapter shape {adapter.shape} does not map {a_s.shape[0]} -> {a_t.shape[0]} channels")

    resized = a_s.shape[1:] != a_t.shape[1:]
    a_rs = resize_bilinear(a_s, *a_t.shape[1:]) if resized else a_s
    mapped = a_rs if adapter is None else np.einsum("oi,ihw->ohw", adapter, a_rs)
    diff = mapped - a_t
    value = float(np.mean(diff * diff))

    g_mapped = 2.0 * diff / diff.size
    if adapter is None:
        g_rs = g_mapped
        grads = {}
    else:
        g_rs = np.einsum("oi,ohw->ihw", adapter, g_mapped)
        grads = {"adapter": np.einsum("ohw,ihw->oi", g_mapped, a_rs)}
    grads["feature"] = (resize_bilinear_backward(g_rs, *a_s.shape[1:])
                        if resized else g_rs)
    return GradPair(value=value, grads=grads)


def affinity_matrix(a: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Z x Z pairwise cosine similarity between per-pixel channel vectors
    of a (N, H, W) feature map, Z = H*W. Symmetric, unit diagonal for
    pixels with nonzero features."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    v = a.reshape(n, -1)
    norms = np.sqrt(np.sum(v * v, axis=0))
    u = v / np.maximum(norms, eps)[None, :]
    return u.T @ u


def affinity_teacher_context(a_t: np.ndarray, eps: float = EPS) -> np.ndarray:
    return affinity_matrix(a_t, eps)


def affinity_loss(a_s: np.ndarray, a_t, eps: float = EPS) -> GradPair:
    """Pairwise-affinity baseline: 1/Z^2 times the squared Frobenius
    distance between the two Z x Z pixel-similarity matrices. The student
    map is resized to the teacher's spatial size first when they differ.
    ``a_t`` is a (N, H, W) feature map or a precomputed Z x Z matrix."""
    a_s = np.asarray(a_s, dtype=np.float64)
    if isinstance(a_t, np.ndarray) and a_t.ndim == 3:
        target_hw = a_t.shape[1:]
        s_t = affinity_matrix(a_t, eps)
    else:
        s_t = np.asarray(a_t, dtype=np.float64)
        target_hw = a_s.shape[1:]
        if s_t.shape[0] != target_hw[0] * target_hw[1]:
            raise ValueError(
                f"teacher matrix size {s_t.shape} does not match Z={target_hw[0] * target_hw[1]}")

    resized = a_s.shape[1:] != tuple(target_hw)
    a_rs = resize_bilinear(a_s, *target_hw) if resized else a_s
    n = a_rs.shape[0]
    v = a_rs.reshape(n, -1)
    z = v.shape[1]
    norms = np.sqrt(np.sum(v * v, axis=0))
    safe = np.maximum(norms, eps)
    u = v / safe[None, :]
    s_s = u.T @ u
    diff = s_s - s_t
    value = float(np.sum(diff * diff)) / (z * z)

    g_s = (2.0 / (z * z)) * diff
    g_u = 2.0 * (u @ g_s)  # symmetric g_s
    dot = np.sum(u * g_u, axis=0)
    g_v = np.where((norms > eps)[None, :],
                   (g_u - u * dot[None, :]) / safe[None, :],
                   g_u / eps)
    g = g_v.reshape(a_rs.shape)
    if resized:
        g = resize_bilinear_backward(g, *a_s.shape[1:])
    return GradPair(value=value, grads={"feature": g})


# ---------------------------------------------------------------------------
# task loss and total objective


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          ignore_label: int = 255) -> GradPair:
    """Mean cross-entropy over non-ignored pixels of a (C, H, W) logit
    tensor against an (H, W) integer label map. Batched (B, C, H, W) /
    (B, H, W) input gives the mean of the per-sample losses."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    batched = logits.ndim == 4
    if not batched:
        logits = logits[None]
        labels = labels[None]
    valid = labels != ignore_label
    n_valid = valid.sum(axis=(1, 2))
    log_q = log_softmax_over_channels(logits, 1.0)
    idx = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_q, idx[:, None], axis=1)[:, 0]
    denom = np.maximum(n_valid, 1)
    per_sample = -np.where(valid, picked, 0.0).sum(axis=(1, 2)) / denom
    value = float(per_sample.mean())
    g = np.exp(log_q)
    onehot = np.zeros_like(g)
    np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
    scale = valid[:, None] / (denom * len(logits)).reshape(-1, 1, 1, 1)
    g = (g - onehot) * scale
    return GradPair(value=value,
                    grads={"logits": g if batched else g[0]})


def total_loss(ce: GradPair, psd: GradPair, csd: GradPair,
               w: LossWeights) -> GradPair:
    """Weighted objective ce + alpha * psd + beta * csd; gradients are
    merged per slot with the same weights. Zero-weighted terms are skipped
    entirely so disabling distillation reproduces the task loss bitwise."""
    value = ce.value
    grads = {k: g.copy() for k, g in ce.grads.items()}
    for weight, part in ((w.alpha, psd), (w.beta, csd)):
        if weight == 0.0:
            continue
        value += weight * part.value
        for key, g in part.grads.items():
            if key in grads:
                grads[key] = grads[key] + weight * g
            else:
                grads[key] = weight * g
    return GradPair(value=value, grads=grads)
