"""Teacher training and student distillation.

One deterministic SGD loop drives everything: the teacher trains with
cross-entropy only; the student adds the configured distillation term.
The teacher is frozen during distillation, so when augmentation is off its
per-sample outputs are constants and get precomputed once as loss contexts
instead of re-running the teacher every batch; both paths execute the same
arithmetic and give bitwise identical results.

RNG discipline: weight init and data order draw from separate seeded
streams that do not depend on whether a teacher is present, so distilling
with both loss weights at zero reproduces plain training bit for bit.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dst1
from .attention import TapSet, build_taps
from .cost_model import LayerGeometry, flops_report
from .data import SynthSample, stack
from .losses import (GradPair, LossWeights, affinity_loss,
                     affinity_teacher_context, at_loss, at_teacher_context,
                     csd_loss, csd_teacher_context, fitnet_loss, kd_loss,
                     kd_teacher_context, psd_loss, psd_teacher_context,
                     softmax_cross_entropy, total_loss)
from .metrics import IGNORE_LABEL, confusion, miou, per_class_iou, pixel_acc
from .nets import SegNet, SegNetSpec, LayerSpec
from .tensor_ops import resize_bilinear

LOSS_MODES = ("dsd", "psd", "csd", "kd", "at", "fitnet", "affinity")

# distinct sub-stream tags so adding consumers never shifts existing ones
_INIT_STREAM = 101
_DATA_STREAM = 202
_ADAPTER_STREAM = 303


class TrainingDivergence(RuntimeError):
    """Loss became non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    iterations: int = 2000
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    pair_policy: str = "adjacent"
    loss_mode: str = "dsd"
    augment: bool = False
    log_interval: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def poly_lr(iteration: int, max_iter: int, base: float, power: float) -> float:
    """base * (1 - iteration/max_iter) ** power."""
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float):
    """One SGD update: v <- momentum*v + grad + wd*param;
    param <- param - lr*v. Returns (param, velocity) as new arrays."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("param/grad/velocity shapes must match")
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"DSDCKPT1"


@dataclass
class Checkpoint:
    spec: SegNetSpec
    params: list
    velocities: list
    iteration: int
    rng_state: dict
    meta: dict

    def net(self) -> SegNet:
        return SegNet(spec=self.spec,
                      params=[(w.copy(), b.copy()) for w, b in self.params])

    def save(self, path) -> None:
        tensors = []
        for i, (w, b) in enumerate(self.params):
            tensors += [(f"w{i}", w), (f"b{i}", b)]
        for i, (vw, vb) in enumerate(self.velocities):
            tensors += [(f"vw{i}", vw), (f"vb{i}", vb)]
        header = json.dumps({
            "spec": _spec_to_dict(self.spec),
            "spec_digest": self.spec.digest(),
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "meta": self.meta,
            "tensors": [name for name, _ in tensors],
        }, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for _, a in tensors:
                f.write(dst1.dump_bytes(a))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        hlen = struct.unpack("<I", raw[8:12])[0]
        header = json.loads(raw[12:12 + hlen])
        blobs = {}
        off = 12 + hlen
        for name in header["tensors"]:
            a, off = _read_block(raw, off)
            blobs[name] = a
        spec = _spec_from_dict(header["spec"])
        n = len(spec.layers)
        params = [(blobs[f"w{i}"], blobs[f"b{i}"]) for i in range(n)]
        velocities = [(blobs[f"vw{i}"], blobs[f"vb{i}"]) for i in range(n)
                      if f"vw{i}" in blobs]
        return cls(spec=spec, params=params, velocities=velocities,
                   iteration=header["iteration"], rng_state=header["rng_state"],
                   meta=header["meta"])


def _read_block(raw: bytes, off: int):
    rank = raw[off + 4]
    shape = struct.unpack(f"<{rank}I", raw[off + 5:off + 5 + 4 * rank])
    end = off + 5 + 4 * rank + 8 * int(np.prod(shape))
    return dst1.load_bytes(raw[off:end]), end


def _spec_to_dict(spec: SegNetSpec) -> dict:
    return asdict(spec)


def _spec_from_dict(d: dict) -> SegNetSpec:
    return SegNetSpec(
        in_channels=d["in_channels"],
        num_classes=d["num_classes"],
        backbone=tuple(LayerSpec(**ls) for ls in d["backbone"]),
        head=tuple(LayerSpec(**ls) for ls in d["head"]),
        logits=LayerSpec(**d["logits"]),
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class DistillReport:
    """Everything needed to audit or rerun one training run."""

    config: dict
    dataset_meta: dict
    loss_trace: list  # one row per log interval
    final: dict  # val metrics
    flops: dict
    ema_first: float
    ema_last: float
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def trace_csv(self) -> str:
        cols = ["iteration", "lr", "ce", "psd", "csd", "distill", "total"]
        lines = [",".join(cols)]
        for row in self.loss_trace:
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                                  else str(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data order and augmentation


class _Batcher:
    """Seeded epoch shuffling; partial trailing batches are dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_indices(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def _augment_batch(images, masks, rng: np.random.Generator):
    """Random horizontal flip plus scale jitter in [0.75, 1.25] with crop
    or mean-pad back to the original size. Masks use nearest-neighbor."""
    images = images.copy()
    masks = masks.copy()
    b, _, h, w = images.shape
    for i in range(b):
        if rng.random() < 0.5:
            images[i] = images[i, :, :, ::-1]
            masks[i] = masks[i, :, ::-1]
        s = rng.uniform(0.75, 1.25)
        nh, nw = max(16, int(round(h * s))), max(16, int(round(w * s)))
        if (nh, nw) == (h, w):
            continue
        img = resize_bilinear(images[i], nh, nw)
        ys = np.clip(np.round(np.arange(nh) / max(nh - 1, 1) * (h - 1)), 0, h - 1).astype(int)
        xs = np.clip(np.round(np.arange(nw) / max(nw - 1, 1) * (w - 1)), 0, w - 1).astype(int)
        msk = masks[i][ys[:, None], xs[None, :]]
        if nh >= h:  # center crop
            y0, x0 = (nh - h) // 2, (nw - w) // 2
            images[i] = img[:, y0:y0 + h, x0:x0 + w]
            masks[i] = msk[y0:y0 + h, x0:x0 + w]
        else:  # pad with the image mean / ignore label
            y0, x0 = (h - nh) // 2, (w - nw) // 2
            canvas = np.full_like(images[i], img.mean())
            canvas[:, y0:y0 + nh, x0:x0 + nw] = img
            images[i] = canvas
            mcanvas = np.full_like(masks[i], IGNORE_LABEL)
            mcanvas[y0:y0 + nh, x0:x0 + nw] = msk
            masks[i] = mcanvas
    return images, masks


# ---------------------------------------------------------------------------
# teacher-side loss contexts


class _TeacherSide:
    """Per-batch teacher constants for the configured loss mode.

    With augmentation off, contexts are precomputed for the whole dataset
    in one pass; otherwise the teacher runs on each (augmented) batch.
    """

    def __init__(self, teacher: SegNet | None, cfg: TrainConfig,
                 images: np.ndarray):
        self.teacher = teacher
        self.cfg = cfg
        self.cache = None
        if teacher is None:
            return
        if not cfg.augment and cfg.loss_mode not in ("fitnet", "affinity"):
            self.cache = []
            for start in range(0, len(images), 32):
                chunk = images[start:start + 32]
                logits, taps = teacher.forward(chunk)
                for b in range(len(chunk)):
                    self.cache.append(self._contexts_for(
                        {k: v[b] for k, v in taps.items()}, logits[b]))

    def _contexts_for(self, taps: dict, logits: np.ndarray) -> dict:
        cfg = self.cfg
        feat_on, logit_on = _active_terms(cfg)
        ctx = {}
        if feat_on and cfg.loss_mode in ("dsd", "psd"):
            ctx["psd"] = psd_teacher_context(_tapset(taps, cfg.pair_policy))
        if logit_on and cfg.loss_mode in ("dsd", "csd"):
            ctx["csd"] = csd_teacher_context(logits, cfg.weights.tau)
        if logit_on and cfg.loss_mode == "kd":
            ctx["kd"] = kd_teacher_context(logits, cfg.weights.tau)
        if feat_on and cfg.loss_mode == "at":
            ctx["at"] = at_teacher_context(_tapset(taps, cfg.pair_policy))
        if feat_on and cfg.loss_mode == "fitnet":
            ctx["fitnet"] = taps["head"]
        if feat_on and cfg.loss_mode == "affinity":
            ctx["affinity"] = affinity_teacher_context(taps["head"])
        return ctx

    def batch_contexts(self, indices, images_batch):
        if self.teacher is None:
            return None
        if self.cache is not None:
            return [self.cache[i] for i in indices]
        logits, taps = self.teacher.forward(images_batch)
        return [self._contexts_for({k: v[b] for k, v in taps.items()}, logits[b])
                for b in range(len(images_batch))]


# ---------------------------------------------------------------------------
# the loop


def _tapset(taps: dict, policy: str) -> TapSet:
    """TapSet over (backbone, head, logits) under a named policy or an
    explicit 'later:earlier,later:earlier' pair list."""
    entries = [(n, taps[n]) for n in ("backbone", "head", "logits")]
    if policy in ("adjacent", "all-pairs"):
        return build_taps(entries, policy)
    pairs = [tuple(p.split(":")) for p in policy.split(",") if p]
    return build_taps(entries, explicit_pairs=pairs)


def _active_terms(cfg: TrainConfig) -> tuple[bool, bool]:
    """Which of the (feature-level, logit-level) distillation terms the
    config actually trains with. Feature-level losses weigh in via alpha,
    logit-level via beta."""
    if cfg.loss_mode == "dsd":
        return cfg.weights.alpha > 0, cfg.weights.beta > 0
    if cfg.loss_mode in ("psd", "at", "fitnet", "affinity"):
        return cfg.weights.alpha > 0, False
    return False, cfg.weights.beta > 0  # csd, kd


def _distill_terms(cfg: TrainConfig, student_taps: dict, logits_b: np.ndarray,
                   ctx: dict, adapter: np.ndarray | None):
    """Per-sample distillation GradPairs (feature-level, logit-level) for
    the configured mode. Either may be a zero GradPair."""
    zero = GradPair(0.0, {})
    psd = csd = zero
    feat_on, logit_on = _active_terms(cfg)
    mode = cfg.loss_mode
    if feat_on and mode in ("dsd", "psd"):
        psd = psd_loss(_tapset(student_taps, cfg.pair_policy), ctx["psd"])
    elif feat_on and mode == "at":
        psd = at_loss(_tapset(student_taps, cfg.pair_policy), ctx["at"])
    elif feat_on and mode == "fitnet":
        gp = fitnet_loss(student_taps["head"], ctx["fitnet"], adapter)
        psd = GradPair(gp.value, {"head": gp.grads["feature"],
                                  **({"adapter": gp.grads["adapter"]}
                                     if "adapter" in gp.grads else {})})
    elif feat_on and mode == "affinity":
        gp = affinity_loss(student_taps["head"], ctx["affinity"])
        psd = GradPair(gp.value, {"head": gp.grads["feature"]})
    if logit_on and mode in ("dsd", "csd"):
        csd = csd_loss(logits_b, ctx["csd"], cfg.weights.tau)
    elif logit_on and mode == "kd":
        csd = kd_loss(logits_b, ctx["kd"], cfg.weights.tau)
    return psd, csd


def _train(spec: SegNetSpec, train_samples: list[SynthSample],
           cfg: TrainConfig, teacher: SegNet | None = None,
           val_samples: list[SynthSample] | None = None,
           dataset_meta: dict | None = None):
    """Shared SGD loop. Returns (Checkpoint, DistillReport).

    Runs with BLAS pinned to one thread: the GEMMs here are small enough
    that pool synchronization costs more than it buys.
    """
    with threadpool_limits(limits=1):
        return _train_inner(spec, train_samples, cfg, teacher, val_samples,
                            dataset_meta)


def _train_inner(spec, train_samples, cfg, teacher, val_samples, dataset_meta):
    t0 = time.monotonic()
    w = cfg.weights
    use_teacher = teacher is not None and any(_active_terms(cfg))
    if use_teacher and teacher.spec.num_classes != spec.num_classes:
        raise ValueError("teacher and student class counts differ")

    rng_init = np.random.default_rng([cfg.seed, _INIT_STREAM])
    net = SegNet.init(spec, rng_init)
    velocities = [(np.zeros_like(wt), np.zeros_like(bt)) for wt, bt in net.params]
    adapter = adapter_vel = None
    if use_teacher and cfg.loss_mode == "fitnet":
        n_t = teacher.spec.head[-1].out_channels
        n_s = spec.head[-1].out_channels
        rng_a = np.random.default_rng([cfg.seed, _ADAPTER_STREAM])
        adapter = rng_a.normal(0.0, np.sqrt(2.0 / n_s), size=(n_t, n_s))
        adapter_vel = np.zeros_like(adapter)

    images, masks = stack(train_samples)
    rng_data = np.random.default_rng([cfg.seed, _DATA_STREAM])
    batcher = _Batcher(len(train_samples), cfg.batch_size, rng_data)
    teacher_side = _TeacherSide(teacher if use_teacher else None, cfg, images)
    stride = spec.output_stride
    off = stride // 2  # labels sampled at output-grid cell centers

    trace = []
    ema = None
    ema_alpha = 2.0 / (50 + 1)
    ema_first = None
    first_mark = max(1, int(0.1 * cfg.iterations))

    for it in range(cfg.iterations):
        idx = batcher.next_indices()
        img_b, msk_b = images[idx], masks[idx]
        if cfg.augment:
            img_b, msk_b = _augment_batch(img_b, msk_b, rng_data)
        msk_ds = msk_b[:, off::stride, off::stride]
        contexts = teacher_side.batch_contexts(idx, img_b)

        logits, taps = net.forward(img_b, cache=True)
        bsz = len(idx)
        ce = softmax_cross_entropy(logits, msk_ds)
        ce_val = ce.value
        psd_val = 0.0
        csd_val = 0.0
        g_logits = ce.grads["logits"]
        g_head = None
        g_backbone = None
        g_adapter = None
        for b in range(bsz if contexts is not None else 0):
            student_taps = {k: v[b] for k, v in taps.items()}
            psd, csd = _distill_terms(cfg, student_taps, logits[b],
                                      contexts[b], adapter)
            psd_val += psd.value / bsz
            csd_val += csd.value / bsz
            if w.alpha > 0 and psd.grads:
                for key, g in psd.grads.items():
                    if key == "logits":
                        g_logits[b] += (w.alpha / bsz) * g
                    elif key == "head":
                        if g_head is None:
                            g_head = np.zeros_like(taps["head"])
                        g_head[b] += (w.alpha / bsz) * g
                    elif key == "backbone":
                        if g_backbone is None:
                            g_backbone = np.zeros_like(taps["backbone"])
                        g_backbone[b] += (w.alpha / bsz) * g
                    elif key == "adapter":
                        if g_adapter is None:
                            g_adapter = np.zeros_like(adapter)
                        g_adapter += (w.alpha / bsz) * g
            if w.beta > 0 and csd.grads:
                g_logits[b] += (w.beta / bsz) * csd.grads["logits"]

        total = ce_val + w.alpha * psd_val + w.beta * csd_val
        if not np.isfinite(total):
            raise TrainingDivergence(it)

        param_grads = net.backward(
            {"logits": g_logits, "head": g_head, "backbone": g_backbone})
        lr = poly_lr(it, cfg.iterations, cfg.base_lr, cfg.poly_power)
        for i, ((wt, bt), (gw, gb), (vw, vb)) in enumerate(
                zip(net.params, param_grads, velocities)):
            wt, vw = sgd_step(wt, gw, vw, lr, cfg.momentum, cfg.weight_decay)
            bt, vb = sgd_step(bt, gb, vb, lr, cfg.momentum, cfg.weight_decay)
            net.params[i] = (wt, bt)
            velocities[i] = (vw, vb)
        if g_adapter is not None:
            adapter, adapter_vel = sgd_step(adapter, g_adapter, adapter_vel,
                                            lr, cfg.momentum, cfg.weight_decay)

        ema = total if ema is None else (1 - ema_alpha) * ema + ema_alpha * total
        if it + 1 == first_mark:
            ema_first = ema
        if it % cfg.log_interval == 0 or it == cfg.iterations - 1:
            trace.append({"iteration": it, "lr": lr, "ce": ce_val,
                          "psd": psd_val, "csd": csd_val,
                          "distill": w.alpha * psd_val + w.beta * csd_val,
                          "total": total})

    final = {}
    if val_samples:
        final = evaluate_net(net, val_samples, cfg.batch_size)

    geom = _net_geometry(net, images.shape[-2:], cfg)
    report = DistillReport(
        config=cfg.to_dict(),
        dataset_meta=dict(dataset_meta or {}),
        loss_trace=trace,
        final=final,
        flops=json.loads(flops_report(geom).to_json()),
        ema_first=float(ema_first if ema_first is not None else ema),
        ema_last=float(ema),
        wall_time_s=time.monotonic() - t0,
    )
    ckpt = Checkpoint(
        spec=spec,
        params=[(wt.copy(), bt.copy()) for wt, bt in net.params],
        velocities=[(vw.copy(), vb.copy()) for vw, vb in velocities],
        iteration=cfg.iterations,
        rng_state=rng_data.bit_generator.state,
        meta={"config": cfg.to_dict(), "dataset_meta": dict(dataset_meta or {}),
              "final": final},
    )
    return ckpt, report


def _net_geometry(net: SegNet, hw, cfg: TrainConfig) -> LayerGeometry:
    s = net.spec.output_stride
    h, w = hw[0] // s, hw[1] // s
    # three taps (backbone, head, logits) at the head's channel width
    return LayerGeometry(n=net.spec.head[-1].out_channels, h=h, w=w,
                         c=net.spec.num_classes, hp=h, wp=w, k=3)


def train_teacher(spec: SegNetSpec, train_samples, cfg: TrainConfig,
                  val_samples=None, dataset_meta=None):
    """Cross-entropy-only training; returns (Checkpoint, DistillReport)."""
    cfg = TrainConfig.from_dict({**cfg.to_dict(),
                                 "weights": {"alpha": 0.0, "beta": 0.0,
                                             "tau": cfg.weights.tau}})
    return _train(spec, train_samples, cfg, teacher=None,
                  val_samples=val_samples, dataset_meta=dataset_meta)


def distill_student(teacher_ckpt: Checkpoint | None, spec: SegNetSpec,
                    train_samples, cfg: TrainConfig, val_samples=None,
                    dataset_meta=None):
    """Train a student against a frozen teacher; returns
    (Checkpoint, DistillReport). A None teacher is allowed only when the
    distillation terms are disabled (plain training)."""
    if teacher_ckpt is None:
        if any(_active_terms(cfg)):
            raise ValueError("distillation losses enabled but no teacher given")
        return _train(spec, train_samples, cfg, teacher=None,
                      val_samples=val_samples, dataset_meta=dataset_meta)
    teacher = teacher_ckpt.net()
    return _train(spec, train_samples, cfg, teacher=teacher,
                  val_samples=val_samples, dataset_meta=dataset_meta)


def evaluate_net(net: SegNet, samples: list[SynthSample],
                 batch_size: int = 16) -> dict:
    """mIoU, pixel accuracy, and per-class IoU over a sample list.
    Logits are bilinearly upsampled to the label grid before argmax."""
    images, masks = stack(samples)
    c = net.spec.num_classes
    h, w = masks.shape[-2:]
    cm = np.zeros((c, c), dtype=np.int64)
    for start in range(0, len(samples), batch_size):
        logits, _ = net.forward(images[start:start + batch_size])
        if logits.shape[-2:] != (h, w):
            logits = resize_bilinear(logits, h, w)
        pred = logits.argmax(axis=1)
        gt = masks[start:start + batch_size]
        for b in range(len(pred)):
            cm += confusion(pred[b], gt[b], c)
    iou = per_class_iou(cm)
    return {
        "miou": miou(cm),
        "pixel_acc": pixel_acc(cm),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
    }
