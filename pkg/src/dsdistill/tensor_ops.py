"""Shared numeric primitives: normalization, tempered softmax, bilinear
resampling, and a finite-difference gradient checker.

All arrays are float64. Functions are pure and reduce in fixed (row-major)
order, so identical inputs give bitwise identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# One shared guard for every l2 normalization in the package.
EPS = 1e-12


@dataclass
class GradPair:
    """A scalar loss value together with its gradients.

    ``grads`` maps one input-slot name to an array of the same shape as that
    input; every differentiable input of the producing operation gets exactly
    one entry.
    """

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def l2_normalize(v: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Scale ``v`` by 1/max(||v||_2, eps), norm taken over all elements.

    Near-zero vectors pass through scaled by 1/eps instead of dividing by
    zero, so an exactly-zero input maps to an exactly-zero output.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v))
    return v / max(norm, eps)


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray,
                          eps: float = EPS) -> np.ndarray:
    """Backward of :func:`l2_normalize` at input ``v``.

    For ||v|| > eps the Jacobian is (I - n n^T)/||v|| with n = v/||v||;
    inside the guard the map is linear with slope 1/eps.
    """
    norm = np.sqrt(np.sum(v * v))
    if norm <= eps:
        return grad_out / eps
    n = v / norm
    return (grad_out - n * np.sum(n * grad_out)) / norm


def softmax_over_channels(z: np.ndarray, tau: float) -> np.ndarray:
    """Tempered softmax over the channel axis of a (C, H, W) or (B, C, H, W)
    score tensor. Computed with max subtraction so large scores cannot
    overflow. At each spatial site the channel values sum to 1.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    s = z / tau
    s = s - s.max(axis=-3, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-3, keepdims=True)


def log_softmax_over_channels(z: np.ndarray, tau: float) -> np.ndarray:
    """log of :func:`softmax_over_channels`, kept finite even where the
    probability underflows to zero."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    s = z / tau
    s = s - s.max(axis=-3, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-3, keepdims=True))


def _resample_grid(n_in: int, n_out: int):
    """Source indices and blend weights for 1-d align-corners resampling."""
    if n_out == 1 or n_in == 1:
        i0 = np.zeros(n_out, dtype=np.intp)
        return i0, i0.copy(), np.zeros(n_out)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(pos.astype(np.intp), n_in - 2)
    frac = pos - i0
    return i0, i0 + 1, frac


def resize_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample a map to (out_h, out_w), align-corners convention:
    output corner samples equal input corner samples, and resizing to the
    input size is the exact identity.

    Accepts (H, W) or any (..., H, W) stack; leading axes are resampled
    independently.
    """
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2], m.shape[-1]
    if min(h, w, out_h, out_w) < 1:
        raise ValueError(f"extents must be >= 1, got {(h, w, out_h, out_w)}")
    if (out_h, out_w) == (h, w):
        return m.copy()
    y0, y1, fy = _resample_grid(h, out_h)
    x0, x1, fx = _resample_grid(w, out_w)
    fy = fy[:, None]
    top = m[..., y0, :][..., :, x0] * (1 - fx) + m[..., y0, :][..., :, x1] * fx
    bot = m[..., y1, :][..., :, x0] * (1 - fx) + m[..., y1, :][..., :, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear_backward(grad_out: np.ndarray, in_h: int,
                             in_w: int) -> np.ndarray:
    """Transpose of :func:`resize_bilinear`: scatter an (..., out_h, out_w)
    gradient back onto the (..., in_h, in_w) input grid."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    out_h, out_w = grad_out.shape[-2], grad_out.shape[-1]
    if (out_h, out_w) == (in_h, in_w):
        return grad_out.copy()
    y0, y1, fy = _resample_grid(in_h, out_h)
    x0, x1, fx = _resample_grid(in_w, out_w)
    lead = grad_out.shape[:-2]
    g = grad_out.reshape(-1, out_h, out_w)
    out = np.zeros((g.shape[0], in_h, in_w))
    fy = fy[:, None]
    for corner_y, wy in ((y0, 1 - fy), (y1, fy)):
        for corner_x, wx in ((x0, 1 - fx), (x1, fx)):
            np.add.at(out, (slice(None), corner_y[:, None], corner_x[None, :]),
                      g * wy * wx)
    return out.reshape(*lead, in_h, in_w)


def finite_diff_check(f, inputs: dict[str, np.ndarray],
                      h: float = 1e-3) -> float:
    """Compare the analytic gradients of ``f`` against central differences.

    ``f`` maps a dict of named arrays to a :class:`GradPair` whose grads
    cover every entry of ``inputs``. Each coordinate of each input is
    perturbed by +-h (h should sit in [1e-5, 1e-2]); returns the max over
    coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    analytic = f(work).grads
    worst = 0.0
    for name, x in work.items():
        grad = np.asarray(analytic[name]).reshape(-1)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work).value
            flat[i] = orig - h
            fm = f(work).value
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(grad[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
