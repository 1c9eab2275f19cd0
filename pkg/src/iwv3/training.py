"""Desk-scale training schedule and per-image online optimization.

Three stages: (1) context and dequant nets alone over a fixed classical 9/7
transform and fixed step, (2) full end-to-end training with the annealed
soft quantization surrogate and trainable log-steps, (3) hard-rounding
fine-tune of the post-quantization nets with a random step offset so the
model tolerates step adjustment at test time.

Training operates on single padded planes (crops taken from the color-
transformed channels); rate is the mixture mass on [v-1/2, v+1/2] and
distortion is the Frobenius difference scaled by 1/sqrt(pixels) so the
tradeoff weight is resolution independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import gradtape as gt
from . import models, pipeline
from .entropy import (
    GMM_K,
    LongTermContext,
    coding_order,
    context_forward,
    decode_image,
    gmm_bits,
)
from .gradtape import ModelWeights, Tensor
from .imageio import ImagePlanes
from .lifting import (
    Cdf97,
    SubbandPyramid,
    forward_pyramid,
    inverse_pyramid,
    make_backend,
)
from .postproc import DequantNet, dequant_filter
from .quant import anneal_alpha, quantize, soft_to_hard_quant

LN2 = math.log(2.0)


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class TrainConfig:
    mode: str = "additive"
    levels: int = 2
    steps: int = 2
    stage1_steps: int = 120
    stage2_steps: int = 200
    stage3_steps: int = 60
    lr1: float = 2e-3
    lr2: float = 1e-4
    lr3: float = 1e-4
    momentum: float = 0.9
    lam: float = 0.05
    pretrain_qstep: float = 16.0
    init_qstep: float = 16.0
    qstep_offset_range: float = 0.25
    batch: int = 4
    crop: int = 64
    n_crops: int = 16
    seed: int = 7
    dq_groups: int = 2
    dq_blocks: int = 2
    dq_channels: int = 16

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        for name in ("stage1_steps", "stage2_steps", "stage3_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def dq_net(self) -> DequantNet:
        return DequantNet(self.dq_groups, self.dq_blocks, self.dq_channels)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key == "lambda":
                key = "lam"
            raw = raw.strip()
            values[key] = raw
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            typ = by_name[key].type
            if typ == "int":
                kwargs[key] = int(raw)
            elif typ == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


@dataclass
class LossReport:
    bpp: float
    l_obj: float
    total: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.bpp, self.l_obj, self.total))


def loss_rd(original, reconstructed, rate_bits: float, lam: float,
            normalize: bool = False) -> LossReport:
    """Rate-distortion report: bits-per-pixel plus weighted Frobenius error.

    With normalize=True the Frobenius norm is scaled by 1/sqrt(pixels),
    which is the form the trainer optimizes.
    """
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape:
        raise ValueError("image dimensions differ")
    if rate_bits < 0:
        raise ValueError("rate must be nonnegative")
    n = original.size
    l_obj = float(np.linalg.norm(original - reconstructed))
    if normalize:
        l_obj /= math.sqrt(n)
    bpp = rate_bits / n
    return LossReport(bpp, l_obj, bpp + lam * l_obj)


# ---------------------------------------------------------------------------
# Loss graphs
# ---------------------------------------------------------------------------

def _const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64))


def rate_bits_tensor(params, kind: str, s_t: Tensor, l_t: Tensor, v: Tensor) -> Tensor:
    """Total -log2 mixture mass of values v given context grids (tensor graph)."""
    raw = context_forward(params, s_t, l_t, kind)
    k = GMM_K
    rw = [gt.slice_channels(raw, i, i + 1) for i in range(k)]
    ru = [gt.slice_channels(raw, k + i, k + i + 1) for i in range(k)]
    rs = [gt.slice_channels(raw, 2 * k + i, 2 * k + i + 1) for i in range(k)]
    # stable softmax: shifting by a constant leaves the value and gradient
    # of the softmax unchanged
    m = _const(np.max(np.stack([t.data for t in rw]), axis=0))
    e = [gt.exp(gt.sub(t, m)) for t in rw]
    denom = gt.reciprocal(gt.add(gt.add(e[0], e[1]), e[2]))
    half = _const(np.full(v.data.shape, 0.5))
    v_hi = gt.add(v, half)
    v_lo = gt.sub(v, half)
    mass = None
    for i in range(k):
        # bounded log-sigma keeps exp finite under untrained weights
        inv_sigma = gt.exp(gt.scale(gt.clamp(rs[i], -10.0, 10.0), -1.0))
        z_hi = gt.ndtr(gt.mul(gt.sub(v_hi, ru[i]), inv_sigma))
        z_lo = gt.ndtr(gt.mul(gt.sub(v_lo, ru[i]), inv_sigma))
        term = gt.mul(gt.mul(e[i], denom), gt.sub(z_hi, z_lo))
        mass = term if mass is None else gt.add(mass, term)
    safe = gt.clamp(mass, 1e-12, 2.0)
    return gt.scale(gt.tsum(gt.log(safe)), -1.0 / LN2)


def _distortion_tensor(params, dq_net: DequantNet, recon: Tensor, original) -> Tensor:
    """Normalized Frobenius distortion after the dequantization filter."""
    refined = dequant_filter(dq_net, params, recon)
    diff = gt.sub(refined, _const(original))
    n = diff.data.size
    return gt.scale(gt.sqrt(gt.tsum(gt.mul(diff, diff))), 1.0 / math.sqrt(n))


def _lt_tensor(grids, like: Tensor) -> Tensor:
    parts = []
    for g in grids:
        if g is None:
            parts.append(_const(np.zeros(like.data.shape)))
        else:
            parts.append(g if isinstance(g, Tensor) else _const(g))
    return gt.concat_channels(parts)


class SgdMomentum:
    """Plain gradient descent with momentum 0.9, per-name velocity state."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self._vel = {}

    def step(self, weights: ModelWeights, grads: dict, lr: float, names) -> None:
        for name in names:
            g = grads.get(name)
            if g is None:
                continue
            v = self._vel.get(name)
            v = g if v is None else self.momentum * v + g
            self._vel[name] = v
            weights.set(name, weights.get(name) - lr * v)


def _trainable_names(weights: ModelWeights, stage: int):
    if stage == 2:
        return list(weights.names())
    return [n for n in weights.names() if n.startswith(("ctx.", "dq."))]


def _check_finite(report: LossReport, stage: str) -> LossReport:
    if not report.finite():
        raise TrainingError(f"non-finite loss in {stage}: {report}")
    return report


# ---------------------------------------------------------------------------
# Stage steps
# ---------------------------------------------------------------------------

def pretrain_step(batch: np.ndarray, weights: ModelWeights, cfg: TrainConfig,
                  opt: SgdMomentum) -> LossReport:
    """Stage 1: train context/dequant nets over the fixed classical transform.

    The rate term only reaches the context nets and the distortion (MSE)
    only reaches the dequant net; everything else stays untouched.
    """
    backend = Cdf97()
    qstep = cfg.pretrain_qstep
    pyr = forward_pyramid(backend, batch, cfg.levels)
    qpyr = pyr.map(lambda g: quantize(g, qstep))
    deq = qpyr.map(lambda g: g.astype(np.float64) * qstep)

    tape = gt.Tape()
    params = tape.params(weights)
    bits = None
    ltc = LongTermContext(backend, cfg.levels)
    for level, kind in coding_order(cfg.levels):
        v = _const(qpyr.get(level, kind))
        s_t = _const(deq.get(level, kind))
        l_t = _lt_tensor(ltc.stack_for(level, kind), s_t)
        term = rate_bits_tensor(params, kind, s_t, l_t, v)
        bits = term if bits is None else gt.add(bits, term)
        ltc.advance(level, kind, deq.get(level, kind))
    bpp = gt.scale(bits, 1.0 / batch.size)

    recon = inverse_pyramid(backend, deq)
    refined = dequant_filter(cfg.dq_net(), params, _const(recon))
    diff = gt.sub(refined, _const(batch))
    mse = gt.tmean(gt.mul(diff, diff))
    total = gt.add(bpp, gt.scale(mse, cfg.lam))

    grads = tape.backward(total)
    opt.step(weights, grads, cfg.lr1, _trainable_names(weights, 1))
    rms = math.sqrt(float(mse.data))
    report = LossReport(float(bpp.data), rms, float(bpp.data) + cfg.lam * rms)
    return _check_finite(report, "stage 1")


def soft_rd_graph(batch: np.ndarray, weights: ModelWeights, cfg: TrainConfig,
                  alpha: float, rng: np.random.Generator):
    """Full end-to-end RD graph under the soft quantization surrogate.

    Returns (tape, total loss tensor, LossReport); noise is drawn from rng
    per coefficient, so a reseeded generator reproduces the loss exactly.
    """
    if not (2.0 <= alpha <= 12.0):
        raise ValueError(f"alpha {alpha} outside [2, 12]")
    tape = gt.Tape()
    params = tape.params(weights)
    backend = make_backend(cfg.mode, params=params, steps=cfg.steps)
    x = _const(batch)
    pyr = forward_pyramid(backend, x, cfg.levels)

    order = coding_order(cfg.levels)
    soft = {}
    deq = {}
    for level, kind in order:
        logq = params[_logq_name(level, kind, cfg.levels)]
        inv_q = gt.exp(gt.scale(logq, -1.0))
        q = gt.exp(logq)
        coeff = pyr.get(level, kind)
        y = gt.smul(coeff, inv_q)
        noise = rng.uniform(-0.5, 0.5, size=y.data.shape)
        v = soft_to_hard_quant(y, alpha, noise)
        soft[(level, kind)] = v
        deq[(level, kind)] = gt.smul(v, q)

    bits = None
    ltc = LongTermContext(backend, cfg.levels)
    for level, kind in order:
        s_t = deq[(level, kind)]
        l_t = _lt_tensor(ltc.stack_for(level, kind), s_t)
        term = rate_bits_tensor(params, kind, s_t, l_t, soft[(level, kind)])
        bits = term if bits is None else gt.add(bits, term)
        ltc.advance(level, kind, deq[(level, kind)])
    bpp = gt.scale(bits, 1.0 / batch.size)

    deq_pyr = SubbandPyramid(
        cfg.levels,
        deq[(cfg.levels, "LL")],
        [tuple(deq[(level, kind)] for kind in ("HL", "LH", "HH"))
         for level in range(1, cfg.levels + 1)],
    )
    recon = inverse_pyramid(backend, deq_pyr)
    l_obj = _distortion_tensor(params, cfg.dq_net(), recon, batch)
    total = gt.add(bpp, gt.scale(l_obj, cfg.lam))
    report = LossReport(float(bpp.data), float(l_obj.data), float(total.data))
    return tape, total, report


def e2e_soft_step(batch: np.ndarray, weights: ModelWeights, cfg: TrainConfig,
                  opt: SgdMomentum, alpha: float, rng: np.random.Generator) -> LossReport:
    """Stage 2: end-to-end step with the soft quantization surrogate."""
    tape, total, report = soft_rd_graph(batch, weights, cfg, alpha, rng)
    _check_finite(report, "stage 2")
    grads = tape.backward(total)
    opt.step(weights, grads, cfg.lr2, _trainable_names(weights, 2))
    return report


def hard_finetune_step(batch: np.ndarray, weights: ModelWeights, cfg: TrainConfig,
                       opt: SgdMomentum, rng: np.random.Generator) -> LossReport:
    """Stage 3: hard rounding with a random step offset; transform frozen."""
    offset = float(rng.uniform(-cfg.qstep_offset_range, cfg.qstep_offset_range))
    backend = make_backend(cfg.mode, weights=weights, steps=cfg.steps)
    pyr = forward_pyramid(backend, _const(batch), cfg.levels)

    tape = gt.Tape()
    params = tape.params(weights)
    order = coding_order(cfg.levels)
    qpyr, deq = {}, {}
    for level, kind in order:
        q = math.exp(float(weights.get(_logq_name(level, kind, cfg.levels)))) * (1.0 + offset)
        if q <= 0:
            raise ValueError("offset drives qstep to zero or below")
        values = quantize(pyr.get(level, kind).data, q)
        qpyr[(level, kind)] = values
        deq[(level, kind)] = values.astype(np.float64) * q

    bits = None
    ltc = LongTermContext(backend, cfg.levels)
    for level, kind in order:
        s_t = _const(deq[(level, kind)])
        l_t = _lt_tensor(ltc.stack_for(level, kind), s_t)
        term = rate_bits_tensor(params, kind, s_t, l_t, _const(qpyr[(level, kind)]))
        bits = term if bits is None else gt.add(bits, term)
        ltc.advance(level, kind, deq[(level, kind)])
    bpp = gt.scale(bits, 1.0 / batch.size)

    deq_pyr = SubbandPyramid(
        cfg.levels,
        _const(deq[(cfg.levels, "LL")]),
        [tuple(_const(deq[(level, kind)]) for kind in ("HL", "LH", "HH"))
         for level in range(1, cfg.levels + 1)],
    )
    recon = inverse_pyramid(backend, deq_pyr)
    l_obj = _distortion_tensor(params, cfg.dq_net(), _const(recon.data), batch)
    total = gt.add(bpp, gt.scale(l_obj, cfg.lam))

    report = LossReport(float(bpp.data), float(l_obj.data), float(total.data))
    _check_finite(report, "stage 3")
    grads = tape.backward(total)
    opt.step(weights, grads, cfg.lr3, _trainable_names(weights, 3))
    return report


def _logq_name(level: int, kind: str, levels: int) -> str:
    if kind == "LL":
        return "q.ll.logq"
    return f"q.l{level}.{kind.lower()}.logq"


# ---------------------------------------------------------------------------
# Full schedule
# ---------------------------------------------------------------------------

def make_crops(images_rgb, cfg: TrainConfig, rng: np.random.Generator):
    """Fixed set of single-plane training crops from the color channels."""
    crops = []
    planes_all = []
    for rgb in images_rgb:
        planes = ImagePlanes.from_rgb(rgb, cfg.levels)
        planes_all.extend(np.asarray(p, dtype=np.float64) for p in planes.planes)
    for _ in range(cfg.n_crops):
        plane = planes_all[rng.integers(len(planes_all))]
        h, w = plane.shape
        size = cfg.crop
        if h < size or w < size:
            tile = np.tile(plane, (size // h + 1, size // w + 1))
            crops.append(tile[:size, :size].copy())
            continue
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        crops.append(plane[top : top + size, left : left + size].copy())
    return crops


def _sample_batch(crops, cfg, rng) -> np.ndarray:
    idx = rng.integers(len(crops), size=cfg.batch)
    return np.stack([crops[i] for i in idx])[:, None, :, :]


def run_training(cfg: TrainConfig, images_rgb, log_fn=None, snapshots=None):
    """Run stages 1-3 over crops of the given images.

    Returns (weights, history) where history holds (stage, step, alpha,
    LossReport) tuples, one per optimization step.  Pass a dict as
    `snapshots` to receive weight copies keyed 'init' and 'stage1'..'stage3'.
    """
    rng = np.random.default_rng(cfg.seed)
    crops = make_crops(images_rgb, cfg, rng)
    weights = models.init_weights(cfg.mode, cfg.levels, seed=cfg.seed,
                                  steps=cfg.steps, dq=cfg.dq_net(),
                                  init_qstep=cfg.init_qstep)
    history = []
    step_no = 0

    def record(stage, alpha, report):
        nonlocal step_no
        step_no += 1
        history.append((stage, step_no, alpha, report))
        if log_fn is not None:
            log_fn(step_no, alpha, report)

    def snap(tag):
        if snapshots is not None:
            snapshots[tag] = weights.copy()

    snap("init")
    opt = SgdMomentum(cfg.momentum)
    for _ in range(cfg.stage1_steps):
        batch = _sample_batch(crops, cfg, rng)
        record(1, 0.0, pretrain_step(batch, weights, cfg, opt))
    snap("stage1")

    opt = SgdMomentum(cfg.momentum)
    for step in range(cfg.stage2_steps):
        alpha = anneal_alpha(step, max(cfg.stage2_steps - 1, 1))
        batch = _sample_batch(crops, cfg, rng)
        record(2, alpha, e2e_soft_step(batch, weights, cfg, opt, alpha, rng))
    snap("stage2")

    opt = SgdMomentum(cfg.momentum)
    for _ in range(cfg.stage3_steps):
        batch = _sample_batch(crops, cfg, rng)
        record(3, 0.0, hard_finetune_step(batch, weights, cfg, opt, rng))
    snap("stage3")

    return weights, history


def eval_rd(weights: ModelWeights, planes, cfg: TrainConfig,
            qstep_offset: float = 0.0) -> LossReport:
    """Deterministic hard-quantization RD of single planes under a model."""
    backend = make_backend(cfg.mode, weights=weights, steps=cfg.steps)
    params = {name: Tensor(values) for name, values in weights.items()}
    total_bits = 0.0
    sq_err = 0.0
    n_pix = 0
    for plane in planes:
        plane = np.asarray(plane, dtype=np.float64)
        batch = plane[None, None]
        pyr = forward_pyramid(backend, _const(batch), cfg.levels)
        order = coding_order(cfg.levels)
        qpyr, deq = {}, {}
        for level, kind in order:
            q = math.exp(float(weights.get(_logq_name(level, kind, cfg.levels))))
            q *= 1.0 + qstep_offset
            values = quantize(pyr.get(level, kind).data, q)
            qpyr[(level, kind)] = values
            deq[(level, kind)] = values.astype(np.float64) * q
        ltc = LongTermContext(backend, cfg.levels)
        for level, kind in order:
            s_t = _const(deq[(level, kind)])
            l_t = _lt_tensor(ltc.stack_for(level, kind), s_t)
            raw = context_forward(params, s_t, l_t, kind).data[0]
            v = qpyr[(level, kind)][0, 0]
            total_bits += gmm_bits(raw, v, int(v.min()), int(v.max()))
            ltc.advance(level, kind, deq[(level, kind)])
        deq_pyr = SubbandPyramid(
            cfg.levels,
            _const(deq[(cfg.levels, "LL")]),
            [tuple(_const(deq[(level, kind)]) for kind in ("HL", "LH", "HH"))
             for level in range(1, cfg.levels + 1)],
        )
        recon = inverse_pyramid(backend, deq_pyr)
        refined = dequant_filter(cfg.dq_net(), params, recon)
        sq_err += float(np.sum((refined.data[0, 0] - plane) ** 2))
        n_pix += plane.size
    l_obj = math.sqrt(sq_err / n_pix)
    bpp = total_bits / n_pix
    return LossReport(bpp, l_obj, bpp + cfg.lam * l_obj)


# ---------------------------------------------------------------------------
# Online optimization
# ---------------------------------------------------------------------------

def measure_rd(rgb, reference_rgb, weights: ModelWeights, mode: str,
               lam: float, qstep_offset: float = 0.0) -> LossReport:
    """Actual-encode RD: payload bits plus distortion against a reference."""
    bs = pipeline.encode_rgb(rgb, weights, mode, qstep_offset=qstep_offset)
    packed = bs.pack()
    _, pyramids = decode_image(packed, weights)
    recon = pipeline.reconstruct(bs, pyramids, weights)
    return loss_rd(reference_rgb, recon, 8.0 * len(packed), lam, normalize=True)


def online_optimize(rgb: np.ndarray, weights: ModelWeights, lr: float = 1e-3,
                    iters: int = 100, lam: float = 0.05):
    """Gradient-descend the image itself against the RD loss, guarded.

    Returns (image, before_report, after_report); the original image is
    returned unchanged whenever the optimized one fails to improve the
    measured RD loss (distortion always against the original).
    """
    mode = models.infer_transform_kind(weights)
    levels, steps, dq_net = models.validate_weights(weights, mode)
    grid = pipeline.build_quantgrid(weights, mode, levels)
    planes0 = ImagePlanes.from_rgb(rgb, levels)
    cur = [np.asarray(p, dtype=np.float64) for p in planes0.planes]
    order = coding_order(levels)

    for _ in range(iters):
        if lr == 0.0:
            break
        for ch in range(3):
            tape = gt.Tape()
            x = tape.leaf(cur[ch][None, None], name="image", requires_grad=True)
            const_params = gt.constant_params(weights)
            backend = make_backend(mode, params=const_params, steps=steps)
            pyr = forward_pyramid(backend, x, levels)
            soft, deq = {}, {}
            for level, kind in order:
                q = grid.qstep(ch, level, kind)
                y = gt.scale(pyr.get(level, kind), 1.0 / q)
                v = soft_to_hard_quant(y, 12.0, 0.0)
                soft[(level, kind)] = v
                deq[(level, kind)] = gt.scale(v, q)
            bits = None
            ltc = LongTermContext(backend, levels)
            for level, kind in order:
                s_t = deq[(level, kind)]
                l_t = _lt_tensor(ltc.stack_for(level, kind), s_t)
                term = rate_bits_tensor(const_params, kind, s_t, l_t, soft[(level, kind)])
                bits = term if bits is None else gt.add(bits, term)
                ltc.advance(level, kind, deq[(level, kind)])
            bpp = gt.scale(bits, 1.0 / cur[ch].size)
            deq_pyr = SubbandPyramid(
                levels,
                deq[(levels, "LL")],
                [tuple(deq[(level, kind)] for kind in ("HL", "LH", "HH"))
                 for level in range(1, levels + 1)],
            )
            recon = inverse_pyramid(backend, deq_pyr)
            l_obj = _distortion_tensor(const_params, dq_net, recon, cur[ch][None, None])
            total = gt.add(bpp, gt.scale(l_obj, lam))
            if not math.isfinite(float(total.data)):
                raise TrainingError("non-finite gradient target in online optimization")
            tape.backward(total)
            cur[ch] = cur[ch] - lr * x.grad[0, 0]

    y = np.clip(np.rint(cur[0]), 0, 255).astype(np.int16)
    co = np.clip(np.rint(cur[1]), -255, 255).astype(np.int16)
    cg = np.clip(np.rint(cur[2]), -255, 255).astype(np.int16)
    opt_planes = ImagePlanes(y, co, cg, planes0.true_width, planes0.true_height,
                             planes0.padded_width, planes0.padded_height)
    candidate = opt_planes.to_rgb()

    before = measure_rd(rgb, rgb, weights, mode, lam)
    if iters == 0 or lr == 0.0 or np.array_equal(candidate, rgb):
        return rgb, before, before
    after = measure_rd(candidate, rgb, weights, mode, lam)
    if after.total <= before.total:
        return candidate, before, after
    return rgb, before, before
