"""QStep quantization and its differentiable training surrogates.

Hard coding divides by the step and rounds half away from zero.  Training
replaces the rounding with the annealed soft approximation
s_a(s_a(y) + u): a tanh-shaped staircase whose temperature a runs from 2
to 12, with u drawn uniformly from [-0.5, 0.5] per coefficient per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradtape as gt
from .gradtape import Tensor

ALPHA_MIN = 2.0
ALPHA_MAX = 12.0


def quantize(coeffs, qstep: float) -> np.ndarray:
    """Divide by the step and round half away from zero; returns int32."""
    if qstep <= 0:
        raise ValueError("qstep must be positive")
    scaled = np.asarray(coeffs, dtype=np.float64) / qstep
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int32)


def dequantize(ints, qstep: float) -> np.ndarray:
    if qstep <= 0:
        raise ValueError("qstep must be positive")
    return np.asarray(ints, dtype=np.float64) * qstep


def soft_round(y, alpha: float):
    """Monotone differentiable staircase fixing integers and half-integers."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    denom = math.tanh(alpha / 2.0)
    if isinstance(y, Tensor):
        base = gt.floor_const(y)
        r = gt.sub(gt.sub(y, base), gt.scale(_ones_like(y), 0.5))
        ramp = gt.scale(gt.tanh(gt.scale(r, alpha)), 0.5 / denom)
        return gt.add(gt.add(base, ramp), gt.scale(_ones_like(y), 0.5))
    y = np.asarray(y, dtype=np.float64)
    base = np.floor(y)
    r = y - base - 0.5
    return base + 0.5 * np.tanh(alpha * r) / denom + 0.5


def _ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def soft_to_hard_quant(y, alpha: float, noise):
    """Differentiable rounding surrogate s_a(s_a(y) + u), u in [-0.5, 0.5]."""
    inner = soft_round(y, alpha)
    if isinstance(y, Tensor):
        u = np.broadcast_to(np.asarray(noise, dtype=np.float64), y.data.shape)
        inner = gt.add(inner, Tensor(u.copy()))
    else:
        inner = inner + np.asarray(noise, dtype=np.float64)
    return soft_round(inner, alpha)


def anneal_alpha(step: int, total_steps: int) -> float:
    """Linear schedule from 2 to 12 inclusive, clamped at 12."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError("step out of range")
    return min(ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * step / total_steps, ALPHA_MAX)


@dataclass
class SoftQuantConfig:
    """Temperature and noise stream for one soft-quantization pass."""

    alpha: float
    noise_seed: int = 0

    def __post_init__(self):
        if not (ALPHA_MIN <= self.alpha <= ALPHA_MAX):
            raise ValueError(f"alpha {self.alpha} outside [{ALPHA_MIN}, {ALPHA_MAX}]")

    def noise_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.noise_seed)


CHANNELS = (0, 1, 2)


class QuantGrid:
    """Positive quantization step per (channel, level, subband type)."""

    def __init__(self, levels: int, entries: dict):
        self.levels = levels
        self._entries = dict(entries)
        for key, q in self._entries.items():
            if q <= 0:
                raise ValueError(f"non-positive qstep at {key}")

    @staticmethod
    def _keys(levels: int):
        for ch in CHANNELS:
            yield (ch, levels, "LL")
            for level in range(1, levels + 1):
                for kind in ("HL", "LH", "HH"):
                    yield (ch, level, kind)

    @classmethod
    def uniform(cls, levels: int, qstep: float = 1.0) -> "QuantGrid":
        return cls(levels, {key: float(qstep) for key in cls._keys(levels)})

    @classmethod
    def from_weights(cls, weights, levels: int) -> "QuantGrid":
        """Channel-uniform grid from trained log-step parameters."""
        entries = {}
        for ch in CHANNELS:
            entries[(ch, levels, "LL")] = math.exp(float(weights.get("q.ll.logq")))
            for level in range(1, levels + 1):
                for kind in ("HL", "LH", "HH"):
                    name = f"q.l{level}.{kind.lower()}.logq"
                    entries[(ch, level, kind)] = math.exp(float(weights.get(name)))
        return cls(levels, entries)

    def qstep(self, channel: int, level: int, kind: str) -> float:
        return self._entries[(channel, level, kind)]

    def scaled(self, offset: float) -> "QuantGrid":
        """Apply a relative step offset: q -> q * (1 + offset)."""
        factor = 1.0 + offset
        if factor <= 0:
            raise ValueError("offset drives qstep to zero or below")
        return QuantGrid(self.levels, {k: q * factor for k, q in self._entries.items()})

    def channel_uniform(self) -> bool:
        return all(
            self._entries[(ch, lvl, kind)] == self._entries[(0, lvl, kind)]
            for (ch, lvl, kind) in self._entries
        )

    def items(self):
        return self._entries.items()
