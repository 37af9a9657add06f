"""Small FCN-style segmentation networks built from scratch: a stack of
same-padded convolutions partitioned into backbone, head, and logits
stages, with exact reverse-mode gradients.

The three stage outputs ("taps") share one spatial size: all downsampling
happens inside the backbone. Activations are kept channels-last internally
so each convolution runs as a handful of shifted matmuls; the public
surface uses (batch, channel, height, width).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

TAP_NAMES = ("backbone", "head", "logits")


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    relu: bool = True

    def __post_init__(self):
        if self.kernel not in (1, 3, 5):
            raise ValueError(f"kernel must be odd and small, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")


@dataclass(frozen=True)
class SegNetSpec:
    """Conv stack description. The logits layer outputs exactly
    ``num_classes`` channels; head and logits stages must keep stride 1 so
    every tap lives on the same grid."""

    in_channels: int
    num_classes: int
    backbone: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...]
    logits: LayerSpec

    def __post_init__(self):
        if not self.backbone or not self.head:
            raise ValueError("backbone and head stages must be non-empty")
        if self.logits.out_channels != self.num_classes:
            raise ValueError("logits layer must output num_classes channels")
        for layer in tuple(self.head) + (self.logits,):
            if layer.stride != 1:
                raise ValueError("only backbone layers may downsample")

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return tuple(self.backbone) + tuple(self.head) + (self.logits,)

    @property
    def output_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def teacher_spec(num_classes: int, base: int = 32) -> SegNetSpec:
    """Default teacher: 4 backbone convs (first at stride 2), 1 head conv,
    1x1 logits."""
    return SegNetSpec(
        in_channels=3,
        num_classes=num_classes,
        backbone=(LayerSpec(base, 3, 2), LayerSpec(base), LayerSpec(base),
                  LayerSpec(base)),
        head=(LayerSpec(base),),
        logits=LayerSpec(num_classes, kernel=1, relu=False),
    )


def student_spec(num_classes: int, base: int = 8) -> SegNetSpec:
    """Default student: 1 backbone conv (stride 2), 1 head conv, 1x1
    logits."""
    return SegNetSpec(
        in_channels=3,
        num_classes=num_classes,
        backbone=(LayerSpec(base, 3, 2),),
        head=(LayerSpec(base),),
        logits=LayerSpec(num_classes, kernel=1, relu=False),
    )


class _Conv:
    """Same-padded convolution (+ optional ReLU), channels-last, run as a
    single patch-matrix GEMM, with cached activations for one backward.

    The input gradient of a stride-1 layer is itself a same-padded
    convolution of the output gradient with the spatially flipped,
    channel-transposed kernel, so backward is two more GEMMs; stride-2
    layers fall back to a scatter over kernel offsets.

    Patch matrices and padded scratch arrays are reused across calls:
    re-allocating tens of MB every iteration costs more in page faults
    than the GEMMs themselves.
    """

    def __init__(self, w: np.ndarray, b: np.ndarray, stride: int, relu: bool):
        self.w = w  # (kh, kw, cin, cout)
        self.b = b
        self.stride = stride
        self.relu = relu
        self._bufs: dict[str, np.ndarray] = {}
        self._cols = None
        self._in_shape = None
        self._out = None

    def _buf(self, name: str, shape: tuple) -> np.ndarray:
        buf = self._bufs.get(name)
        if buf is None or buf.shape != shape:
            buf = np.zeros(shape)
            self._bufs[name] = buf
        return buf

    def _im2col(self, x: np.ndarray, kh: int, kw: int, s: int, tag: str):
        bsz, h, w_in, cin = x.shape
        p = kh // 2
        ho = (h + 2 * p - kh) // s + 1
        wo = (w_in + 2 * p - kw) // s + 1
        if kh == kw == 1 and s == 1:
            return x.reshape(-1, cin), (bsz, ho, wo)
        if p:
            xp = self._buf(f"{tag}pad", (bsz, h + 2 * p, w_in + 2 * p, cin))
            xp[:, p:p + h, p:p + w_in, :] = x  # border stays zero
        else:
            xp = x
        sb, sh, sw, sc = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp, shape=(bsz, ho, wo, kh, kw, cin),
            strides=(sb, sh * s, sw * s, sh, sw, sc), writeable=False)
        cols = self._buf(f"{tag}cols", view.shape)
        np.copyto(cols, view)
        return cols.reshape(bsz * ho * wo, kh * kw * cin), (bsz, ho, wo)

    def forward(self, x: np.ndarray, cache: bool) -> np.ndarray:
        kh, kw, cin, cout = self.w.shape
        cols, (bsz, ho, wo) = self._im2col(x, kh, kw, self.stride, "x")
        out = self._buf("out", (bsz, ho, wo, cout))
        np.matmul(cols, self.w.reshape(kh * kw * cin, cout),
                  out=out.reshape(-1, cout))
        out += self.b
        if self.relu:
            np.maximum(out, 0.0, out=out)
        if cache:
            self._cols, self._in_shape, self._out = cols, x.shape, out
        return out

    def backward(self, g_out: np.ndarray, need_input_grad: bool = True):
        if self._cols is None:
            raise RuntimeError("backward called without a cached forward")
        kh, kw, cin, cout = self.w.shape
        p = kh // 2
        s = self.stride
        bsz, h, w_in, _ = self._in_shape
        ho, wo = g_out.shape[1], g_out.shape[2]
        if self.relu:
            np.multiply(g_out, self._out > 0.0, out=g_out)
        g_flat = g_out.reshape(-1, cout)
        g_w = (self._cols.T @ g_flat).reshape(kh, kw, cin, cout)
        g_b = g_flat.sum(axis=0)
        if not need_input_grad:
            return g_w, g_b, None
        if s == 1:
            # transposed convolution: flipped, channel-swapped kernel
            wt = np.ascontiguousarray(self.w[::-1, ::-1].transpose(0, 1, 3, 2))
            gcols, _ = self._im2col(g_out, kh, kw, 1, "g")
            g_in = self._buf("gin", (bsz, h, w_in, cin))
            np.matmul(gcols, wt.reshape(kh * kw * cout, cin),
                      out=g_in.reshape(-1, cin))
            return g_w, g_b, g_in
        g_cols = (g_flat @ self.w.reshape(kh * kw * cin, cout).T).reshape(
            bsz, ho, wo, kh, kw, cin)
        g_xp = np.zeros((bsz, h + 2 * p, w_in + 2 * p, cin))
        for ky in range(kh):
            for kx in range(kw):
                g_xp[:, ky:ky + s * ho:s, kx:kx + s * wo:s, :] += \
                    g_cols[:, :, :, ky, kx, :]
        g_in = g_xp[:, p:-p, p:-p, :] if p else g_xp
        return g_w, g_b, g_in

    def clear_cache(self):
        self._cols = self._in_shape = self._out = None


@dataclass
class SegNet:
    spec: SegNetSpec
    params: list  # [(w, b)] per layer, w channels-last (kh, kw, cin, cout)
    _layers: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, spec: SegNetSpec, rng: np.random.Generator) -> "SegNet":
        """He-normal weights, zero biases."""
        params = []
        cin = spec.in_channels
        for layer in spec.layers:
            k = layer.kernel
            fan_in = k * k * cin
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(k, k, cin, layer.out_channels))
            params.append((w, np.zeros(layer.out_channels)))
            cin = layer.out_channels
        return cls(spec=spec, params=params)

    def _build(self):
        """Create layer objects once; later calls only refresh the weight
        references so scratch buffers survive across iterations."""
        if not self._layers:
            self._layers = [
                _Conv(w, b, layer.stride, layer.relu)
                for (w, b), layer in zip(self.params, self.spec.layers)
            ]
        else:
            for conv, (w, b) in zip(self._layers, self.params):
                conv.w, conv.b = w, b

    def forward(self, images: np.ndarray, cache: bool = False):
        """Run a (B, 3, H, W) batch; returns (logits, taps) with logits
        (B, C, H', W') and taps mapping backbone/head/logits to channels-
        first stage outputs. H and W must be divisible by the output
        stride."""
        images = np.asarray(images, dtype=np.float64)
        stride = self.spec.output_stride
        if images.shape[-2] % stride or images.shape[-1] % stride:
            raise ValueError(
                f"input size {images.shape[-2:]} not divisible by output stride {stride}")
        self._build()
        x = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
        tap_idx = {len(self.spec.backbone) - 1: "backbone",
                   len(self.spec.backbone) + len(self.spec.head) - 1: "head",
                   len(self._layers) - 1: "logits"}
        taps = {}
        for i, layer in enumerate(self._layers):
            x = layer.forward(x, cache)
            if i in tap_idx:
                taps[tap_idx[i]] = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        return taps["logits"], taps

    def backward(self, tap_grads: dict[str, np.ndarray]):
        """Backpropagate channels-first upstream gradients on any subset of
        the taps; returns [(g_w, g_b)] aligned with ``params``. Requires a
        preceding ``forward(..., cache=True)`` on the same batch."""
        if not self._layers or self._layers[-1]._cols is None:
            raise RuntimeError("backward called without a cached forward")
        n_backbone = len(self.spec.backbone)
        n_head = len(self.spec.head)
        boundary = {"logits": len(self._layers) - 1,
                    "head": n_backbone + n_head - 1,
                    "backbone": n_backbone - 1}
        inject = {}
        for name, g in tap_grads.items():
            if g is None:
                continue
            inject[boundary[name]] = np.ascontiguousarray(
                np.asarray(g, dtype=np.float64).transpose(0, 2, 3, 1))
        grads = [None] * len(self._layers)
        g = None
        for i in range(len(self._layers) - 1, -1, -1):
            if i in inject:
                g = inject[i] if g is None else g + inject[i]
            if g is None:
                raise ValueError("no upstream gradient reaches the logits layer")
            g_w, g_b, g = self._layers[i].backward(g, need_input_grad=i > 0)
            grads[i] = (g_w, g_b)
        for layer in self._layers:
            layer.clear_cache()
        return grads

    def param_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()])
                               for w, b in self.params])
