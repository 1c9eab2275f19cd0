"""End-to-end encode/decode paths composing the codec modules.

encode_rgb: color transform -> pad -> pyramid -> quantize -> entropy code.
decode_bytes: entropy decode -> dequantize -> inverse pyramid -> optional
dequantization filter -> inverse color transform.
"""

from __future__ import annotations

import numpy as np

from . import models
from .entropy import Bitstream, coding_order, decode_image, encode_image
from .imageio import ImagePlanes
from .lifting import forward_pyramid, inverse_pyramid, make_backend
from .postproc import dequant_filter_plane
from .quant import QuantGrid, quantize


def build_quantgrid(weights, mode: str, levels: int, qstep_offset: float = 0.0) -> QuantGrid:
    """Effective quantization grid, rounded through float32 like the header."""
    if mode == "lossless":
        if qstep_offset != 0.0:
            raise ValueError("lossless mode has no quantization step to offset")
        return QuantGrid.uniform(levels, 1.0)
    grid = QuantGrid.from_weights(weights, levels)
    if qstep_offset != 0.0:
        grid = grid.scaled(qstep_offset)
    return QuantGrid(levels, {k: float(np.float32(q)) for k, q in grid.items()})


def encode_rgb(rgb: np.ndarray, weights, mode: str, levels: int | None = None,
               qstep_offset: float = 0.0, threads: int = 1) -> Bitstream:
    """Encode an (H, W, 3) uint8 image into a Bitstream."""
    levels, steps, _ = models.validate_weights(weights, mode, levels)
    if mode == "lossless" and levels is None:
        levels = 3
    planes = ImagePlanes.from_rgb(rgb, levels)
    grid = build_quantgrid(weights, mode, levels, qstep_offset)
    if mode == "lossless":
        backend = make_backend("lossless")
        channel_planes = [p.astype(np.int32) for p in planes.planes]
    else:
        backend = make_backend(mode, weights=weights, steps=steps)
        channel_planes = [p.astype(np.float64) for p in planes.planes]
    qpyramids = []
    for ch, plane in enumerate(channel_planes):
        pyr = forward_pyramid(backend, plane, levels)
        qpyr = pyr.map(lambda g: g)
        for level, kind in coding_order(levels):
            q = grid.qstep(ch, level, kind)
            qpyr.set(level, kind, quantize(pyr.get(level, kind), q))
        qpyramids.append(qpyr)
    return encode_image(qpyramids, grid, weights, mode,
                        (planes.true_width, planes.true_height),
                        steps=steps or models.DEFAULT_STEPS,
                        threads=threads)


def reconstruct(bs: Bitstream, pyramids, weights) -> np.ndarray:
    """Rebuild the RGB image a decoder would emit for decoded pyramids."""
    levels = bs.levels
    order = coding_order(levels)
    if bs.mode == "lossless":
        backend = make_backend("lossless")
    else:
        steps = models.infer_steps(weights)
        backend = make_backend(bs.mode, weights=weights, steps=steps)
    qsteps = dict(zip(order, (q for q, _, _ in bs.subband_info)))
    out_planes = []
    for pyr in pyramids:
        if bs.mode == "lossless":
            plane = inverse_pyramid(backend, pyr).astype(np.int16)
        else:
            deq = pyr.map(lambda g: g.astype(np.float64))
            for level, kind in order:
                deq.set(level, kind,
                        pyr.get(level, kind).astype(np.float64) * qsteps[(level, kind)])
            plane = inverse_pyramid(backend, deq)
            dq_net = models.infer_dq_shape(weights)
            plane = dequant_filter_plane(dq_net, weights, plane)
            plane = np.rint(plane).astype(np.int32)
        out_planes.append(plane)
    y, co, cg = out_planes
    y = np.clip(y, 0, 255).astype(np.int16)
    co = np.clip(co, -255, 255).astype(np.int16)
    cg = np.clip(cg, -255, 255).astype(np.int16)
    ph, pw = y.shape
    planes = ImagePlanes(y, co, cg, bs.true_width, bs.true_height, pw, ph)
    return planes.to_rgb()


def decode_bytes(data: bytes, weights) -> np.ndarray:
    """Decode a packed stream to an (H, W, 3) uint8 image."""
    bs, pyramids = decode_image(data, weights)
    return reconstruct(bs, pyramids, weights)


def stream_bpp(packed: bytes, bs: Bitstream) -> float:
    return 8.0 * len(packed) / (bs.true_width * bs.true_height)
