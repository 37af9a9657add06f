"""Attention maps over the channel axis and residual attention maps.

A feature map (N, H, W) collapses to a spatial saliency map (H, W) by
summing (or taking the max of) powered absolute activations across
channels. A residual attention map is the difference of two l2-normalized
attention maps taken at different network depths; when their spatial sizes
differ the smaller one is bilinearly resized to the larger BEFORE
normalization so the unit-norm invariant stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import EPS, l2_normalize, resize_bilinear

PAIR_POLICIES = ("adjacent", "all-pairs")


def attention_map(a: np.ndarray, mode: str = "sum", p: float = 2.0) -> np.ndarray:
    """Collapse a (N, H, W) feature map to an (H, W) attention map.

    sum mode: out[h, w] = sum_i |a[i, h, w]|^p
    max mode: out[h, w] = max_i |a[i, h, w]|^p

    Absolute values are taken before powering, so odd p is well-defined.
    """
    if p < 1:
        raise ValueError(f"power factor must be >= 1, got {p}")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected (N, H, W) feature map, got shape {a.shape}")
    powered = np.abs(a) ** p
    if mode == "sum":
        return powered.sum(axis=0)
    if mode == "max":
        return powered.max(axis=0)
    raise ValueError(f"mode must be 'sum' or 'max', got {mode!r}")


def attention_map_backward(a: np.ndarray, grad_out: np.ndarray,
                           mode: str = "sum", p: float = 2.0) -> np.ndarray:
    """Backward of :func:`attention_map`: routes an (H, W) gradient back to
    the (N, H, W) input. In max mode only the (first) argmax channel per
    pixel receives gradient."""
    a = np.asarray(a, dtype=np.float64)
    d_pow = p * np.abs(a) ** (p - 1) * np.sign(a)
    if mode == "sum":
        return grad_out[None] * d_pow
    if mode == "max":
        powered = np.abs(a) ** p
        sel = powered == powered.max(axis=0, keepdims=True)
        first = sel & (np.cumsum(sel, axis=0) == 1)
        return grad_out[None] * d_pow * first
    raise ValueError(f"mode must be 'sum' or 'max', got {mode!r}")


def residual_attention(a_m: np.ndarray, a_n: np.ndarray,
                       eps: float = EPS) -> np.ndarray:
    """Residual attention map between a later feature map ``a_m`` and an
    earlier one ``a_n``.

    Channel counts may differ (the mapping collapses them); if spatial
    sizes differ, the smaller attention map is bilinearly resized up first.
    Each map is flattened and l2-normalized, then subtracted, so the result
    has l2 norm at most 2.
    """
    f_m = attention_map(a_m, "sum", 2.0)
    f_n = attention_map(a_n, "sum", 2.0)
    f_m, f_n = _to_common_size(f_m, f_n)
    return l2_normalize(f_m, eps) - l2_normalize(f_n, eps)


def _to_common_size(x: np.ndarray, y: np.ndarray):
    """Resize whichever 2-d map is smaller up to the other's shape."""
    if x.shape == y.shape:
        return x, y
    if x.size < y.size:
        return resize_bilinear(x, *y.shape), y
    return x, resize_bilinear(y, *x.shape)


@dataclass
class TapSet:
    """Ordered intermediate outputs of one network plus the index pairs the
    pixel-similarity loss runs over.

    ``taps`` lists (name, feature map) in network order; ``pairs`` holds
    (m, n) indices into that list with m later than n.
    """

    taps: list[tuple[str, np.ndarray]]
    pairs: list[tuple[int, int]]

    def __post_init__(self):
        if len(self.taps) < 2:
            raise ValueError("need at least 2 taps")
        k = len(self.taps)
        for m, n in self.pairs:
            if not (0 <= n < m < k):
                raise ValueError(f"bad pair ({m}, {n}) for {k} taps")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.taps]

    def feature(self, name: str) -> np.ndarray:
        for tap_name, a in self.taps:
            if tap_name == name:
                return a
        raise KeyError(name)

    def attention_maps(self, mode: str = "sum", p: float = 2.0):
        return {name: attention_map(a, mode, p) for name, a in self.taps}

    def residual_maps(self, eps: float = EPS):
        """Residual attention map per pair, keyed '<m_name>-<n_name>'."""
        out = {}
        for m, n in self.pairs:
            key = f"{self.taps[m][0]}-{self.taps[n][0]}"
            out[key] = residual_attention(self.taps[m][1], self.taps[n][1], eps)
        return out


def build_taps(taps, pair_policy="adjacent", explicit_pairs=None) -> TapSet:
    """Assemble a TapSet from (name, feature map) entries in network order.

    adjacent: pairs consecutive taps, e.g. {b, h, l} -> (h,b), (l,h)
    all-pairs: every (later, earlier) combination
    explicit_pairs: list of (later_name, earlier_name); overrides policy
    """
    taps = list(taps)
    names = [name for name, _ in taps]
    if explicit_pairs is not None:
        pairs = []
        for m_name, n_name in explicit_pairs:
            if m_name not in names or n_name not in names:
                raise ValueError(f"pair ({m_name}, {n_name}) references a missing tap")
            m, n = names.index(m_name), names.index(n_name)
            if m <= n:
                raise ValueError(f"pair ({m_name}, {n_name}) is not in network order")
            pairs.append((m, n))
    elif pair_policy == "adjacent":
        pairs = [(i + 1, i) for i in range(len(taps) - 1)]
    elif pair_policy == "all-pairs":
        pairs = [(n + span, n) for span in range(1, len(taps))
                 for n in range(len(taps) - span)]
    else:
        raise ValueError(f"unknown pair policy {pair_policy!r}")
    return TapSet(taps=taps, pairs=pairs)
