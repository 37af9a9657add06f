"""FLOPs accounting for the knowledge-extraction stage of each distillation
module, plus instrumented reference computations whose measured operation
counts must equal the closed-form counts exactly.

Convention: one multiply = one FLOP, one add (or subtract) = one FLOP, so a
dot product of length n costs 2n - 1. Counting covers only the extraction
arithmetic before the L2 loss; reshapes and normalizations are excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .tensor_ops import l2_normalize


@dataclass(frozen=True)
class LayerGeometry:
    """Shared geometry of the compared layers.

    n: channels of a tapped feature map   h, w: its spatial extents
    c: category count                     hp, wp: logits spatial extents
    k: number of tapped layers
    """

    n: int = 256
    h: int = 80
    w: int = 45
    c: int = 19
    hp: int = 65
    wp: int = 65
    k: int = 2

    def __post_init__(self):
        for field_name in ("n", "h", "w", "c", "hp", "wp", "k"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1")

    @property
    def z(self) -> int:
        return self.h * self.w


def flops_affinity(g: LayerGeometry) -> int:
    """Pairwise-affinity extraction: a Z x Z matrix of length-n dot
    products, (2n - 1) * (h*w)^2."""
    return (2 * g.n - 1) * g.h * g.w * g.h * g.w


def flops_psd(g: LayerGeometry) -> int:
    """Residual-attention extraction over k tapped layers:
    (2*k*n - 1) * h * w. Needs k >= 2 (at least one residual pair)."""
    if g.k < 2:
        raise ValueError(f"residual attention needs k >= 2 taps, got {g.k}")
    return (2 * g.k * g.n - 1) * g.h * g.w


def flops_csd(g: LayerGeometry) -> int:
    """Category-correlation extraction: C x C dot products of length
    hp*wp, (2*hp*wp - 1) * c^2."""
    return (2 * g.hp * g.wp - 1) * g.c * g.c


def flops_ratio(g: LayerGeometry) -> tuple[float, float]:
    """(exact psd/affinity quotient, the k/Z approximation of it)."""
    return flops_psd(g) / flops_affinity(g), g.k / g.z


@dataclass
class FlopsReport:
    geometry: LayerGeometry
    affinity: int
    psd: int
    csd: int
    psd_over_affinity: float
    affinity_over_psd: float
    approx_k_over_z: float

    def to_json(self) -> str:
        d = {"geometry": asdict(self.geometry), **{k: v for k, v in asdict(self).items()
                                                   if k != "geometry"}}
        return json.dumps(d, indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [
            ("affinity", f"{self.affinity:,}"),
            ("psd", f"{self.psd:,}"),
            ("csd", f"{self.csd:,}"),
            ("psd / affinity", f"{self.psd_over_affinity:.6e}"),
            ("affinity / psd", f"{self.affinity_over_psd:.2f}"),
            ("approx k / Z", f"{self.approx_k_over_z:.6e}"),
        ]
        g = self.geometry
        head = (f"extraction FLOPs at n={g.n} h={g.h} w={g.w} "
                f"c={g.c} hp={g.hp} wp={g.wp} k={g.k}")
        width = max(len(r[0]) for r in rows)
        lines = [head, "-" * len(head)]
        lines += [f"{name:<{width}}  {val:>18}" for name, val in rows]
        return "\n".join(lines)


def flops_report(g: LayerGeometry) -> FlopsReport:
    ratio, approx = flops_ratio(g)
    return FlopsReport(
        geometry=g,
        affinity=flops_affinity(g),
        psd=flops_psd(g),
        csd=flops_csd(g),
        psd_over_affinity=ratio,
        affinity_over_psd=1.0 / ratio,
        approx_k_over_z=approx,
    )


class FlopCounter:
    """Tallies scalar multiplies and adds claimed by instrumented code."""

    def __init__(self):
        self.muls = 0
        self.adds = 0

    @property
    def total(self) -> int:
        return self.muls + self.adds

    def dot(self, x, y) -> float:
        """Dot product of equal-length 1-d vectors, counted as n muls and
        n - 1 adds."""
        n = len(x)
        acc = x[0] * y[0]
        for i in range(1, n):
            acc += x[i] * y[i]
        self.muls += n
        self.adds += n - 1
        return acc


def counted_affinity_extract(feat: np.ndarray, counter: FlopCounter) -> np.ndarray:
    """Pairwise-affinity matrix via explicit dot products, tallying the
    matrix-multiplication FLOPs. Per-pixel normalization is performed but
    not counted."""
    n = feat.shape[0]
    v = feat.reshape(n, -1)
    norms = np.sqrt(np.sum(v * v, axis=0))
    u = v / np.maximum(norms, 1e-12)[None, :]
    z = u.shape[1]
    s = np.empty((z, z))
    for i in range(z):
        for j in range(z):
            s[i, j] = counter.dot(u[:, i], u[:, j])
    return s


def counted_psd_extract(feats: list[np.ndarray], counter: FlopCounter) -> list[np.ndarray]:
    """Residual attention maps of adjacent tapped layers via explicit
    per-pixel loops. Counted work: the k channel-collapse passes (squares
    and their sums) and the k - 1 map subtractions; the l2 normalizations
    between them are performed but not counted."""
    maps = []
    for a in feats:
        n, h, w = a.shape
        out = np.empty((h, w))
        for y in range(h):
            for x in range(w):
                col = a[:, y, x]
                acc = col[0] * col[0]
                for i in range(1, n):
                    acc += col[i] * col[i]
                out[y, x] = acc
        counter.muls += n * h * w
        counter.adds += (n - 1) * h * w
        maps.append(out)
    normed = [l2_normalize(f) for f in maps]
    residuals = []
    for later, earlier in zip(normed[1:], normed[:-1]):
        h, w = later.shape
        ra = np.empty((h, w))
        for y in range(h):
            for x in range(w):
                ra[y, x] = later[y, x] - earlier[y, x]
        counter.adds += h * w
        residuals.append(ra)
    return residuals


def counted_csd_extract(q: np.ndarray, counter: FlopCounter) -> np.ndarray:
    """Category-correlation matrix via explicit dot products over a (C, M)
    softened-response matrix. Row normalization is performed but not
    counted."""
    c = q.shape[0]
    qm = q.reshape(c, -1)
    norms = np.sqrt(np.sum(qm * qm, axis=1))
    u = qm / np.maximum(norms, 1e-12)[:, None]
    cm = np.empty((c, c))
    for i in range(c):
        for j in range(c):
            cm[i, j] = counter.dot(u[i], u[j])
    return cm


def count_ops(kind: str, g: LayerGeometry, seed: int = 0) -> int:
    """Run the instrumented extraction of ``kind`` ('psd' | 'affinity' |
    'csd') on random data of geometry ``g`` and return the measured FLOPs."""
    rng = np.random.default_rng(seed)
    counter = FlopCounter()
    if kind == "affinity":
        counted_affinity_extract(rng.standard_normal((g.n, g.h, g.w)), counter)
    elif kind == "psd":
        feats = [rng.standard_normal((g.n, g.h, g.w)) for _ in range(g.k)]
        counted_psd_extract(feats, counter)
    elif kind == "csd":
        counted_csd_extract(rng.random((g.c, g.hp * g.wp)), counter)
    else:
        raise ValueError(f"unknown extraction kind {kind!r}")
    return counter.total
