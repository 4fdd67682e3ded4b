"""Tiled inference and the bilinear baseline."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import VIIRS_CEIL
from .errors import CheckpointError, DataError
from .model import forward, load_checkpoint, to_model_units
from .raster import Raster


def bilinear_upsample2x(r: Raster) -> Raster:
    """2x bilinear resampling with half-pixel-centre alignment.

    Output pixel ``i`` samples input coordinate ``(i + 0.5) / 2 - 0.5``,
    clamped to the edge pixels.  Nodata cells are treated as 0.
    """
    src = np.where(r.valid, r.data.astype(np.float64), 0.0)
    out = _interp_axis(_interp_axis(src, 0), 1)
    return Raster(out, r.x0, r.y0, r.dx / 2, r.dy / 2, r.nodata)


def _interp_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    pos = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1, 1]
    shape[axis] = 2 * n
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


@dataclass(frozen=True)
class TileLayout:
    """Grid of equal tiles covering a raster padded at the bottom/right.

    With ``overlap = 0`` (the default) tiles abut and
    ``grid_rows * tile_h == source_rows + pad_bottom``.  A positive overlap
    makes consecutive tiles share ``overlap`` rows/columns.
    """

    source_rows: int
    source_cols: int
    tile_h: int
    tile_w: int
    grid_rows: int
    grid_cols: int
    pad_bottom: int
    pad_right: int
    overlap: int = 0

    @property
    def stride_h(self) -> int:
        return self.tile_h - self.overlap

    @property
    def stride_w(self) -> int:
        return self.tile_w - self.overlap

    @property
    def count(self) -> int:
        return self.grid_rows * self.grid_cols

    def anchors(self):
        """Upper-left pixel of every tile, row-major."""
        return [(i * self.stride_h, j * self.stride_w)
                for i in range(self.grid_rows) for j in range(self.grid_cols)]

    def scaled(self, factor: int) -> "TileLayout":
        return TileLayout(self.source_rows * factor, self.source_cols * factor,
                          self.tile_h * factor, self.tile_w * factor, self.grid_rows,
                          self.grid_cols, self.pad_bottom * factor, self.pad_right * factor,
                          self.overlap * factor)


def plan_layout(rows: int, cols: int, tile_h: int, tile_w: int, overlap: int = 0) -> TileLayout:
    if tile_h < 1 or tile_w < 1:
        raise DataError(f"tile dims must be >= 1, got {tile_h}x{tile_w}")
    if not 0 <= overlap < min(tile_h, tile_w):
        raise DataError(f"overlap {overlap} must be in [0, min(tile dims))")

    def count(n, t):
        return max(1, math.ceil((n - overlap) / (t - overlap)))

    gr, gc = count(rows, tile_h), count(cols, tile_w)
    pad_b = (gr - 1) * (tile_h - overlap) + tile_h - rows
    pad_r = (gc - 1) * (tile_w - overlap) + tile_w - cols
    return TileLayout(rows, cols, tile_h, tile_w, gr, gc, pad_b, pad_r, overlap)


def tile_grid(r: Raster, tile_h: int, tile_w: int, overlap: int = 0):
    """Split ``r`` into row-major tiles over a zero-padded grid.

    Returns ``(tiles, layout)``.
    """
    layout = plan_layout(r.rows, r.cols, tile_h, tile_w, overlap)
    padded = np.pad(r.data, ((0, layout.pad_bottom), (0, layout.pad_right)))
    tiles = [Raster(padded[a:a + tile_h, b:b + tile_w], r.x0 + b * r.dx, r.y0 + a * r.dy,
                    r.dx, r.dy, r.nodata)
             for a, b in layout.anchors()]
    return tiles, layout


def reassemble(tiles, layout: TileLayout) -> Raster:
    """Inverse of :func:`tile_grid`; overlapping regions are averaged."""
    if len(tiles) != layout.count:
        raise DataError(f"expected {layout.count} tiles, got {len(tiles)}")
    for t in tiles:
        if t.shape != (layout.tile_h, layout.tile_w):
            raise DataError(f"tile shape {t.shape} does not match layout "
                            f"{(layout.tile_h, layout.tile_w)}")
    ph = layout.source_rows + layout.pad_bottom
    pw = layout.source_cols + layout.pad_right
    first = tiles[0]
    if layout.overlap == 0:
        out = np.empty((ph, pw), dtype=np.float32)
        for t, (a, b) in zip(tiles, layout.anchors()):
            out[a:a + layout.tile_h, b:b + layout.tile_w] = t.data
    else:
        acc = np.zeros((ph, pw))
        hits = np.zeros((ph, pw))
        for t, (a, b) in zip(tiles, layout.anchors()):
            acc[a:a + layout.tile_h, b:b + layout.tile_w] += t.data
            hits[a:a + layout.tile_h, b:b + layout.tile_w] += 1
        out = acc / hits
    return Raster(out[:layout.source_rows, :layout.source_cols], first.x0, first.y0,
                  first.dx, first.dy, first.nodata)


def reconstruct_year(checkpoint, dmsp_ref: Raster, dmsp_tgt: Raster, viirs_ref: Raster,
                     tile_h: int | None = None, tile_w: int | None = None,
                     ceil: float = VIIRS_CEIL, batch_size: int = 8, threads: int = 1,
                     overlap: int = 0) -> Raster:
    """Reconstruct a target-year VIIRS-like raster at twice the DMSP resolution.

    ``checkpoint`` is either checkpoint bytes or a ``(params, config)`` pair.
    All three inputs are tiled on the same grid (VIIRS at 2x), the model runs
    per batch of tiles in inference mode, and the output tiles are
    reassembled and clamped to ``[0, ceil]``.
    """
    params, cfg = load_checkpoint(checkpoint) if isinstance(checkpoint, (bytes, bytearray)) \
        else checkpoint
    tile_h = cfg.h if tile_h is None else tile_h
    tile_w = cfg.w if tile_w is None else tile_w
    if (tile_h, tile_w) != (cfg.h, cfg.w):
        raise CheckpointError(f"tile size {tile_h}x{tile_w} differs from the checkpoint's "
                              f"{cfg.h}x{cfg.w}")
    if dmsp_tgt.shape != dmsp_ref.shape:
        raise DataError(f"DMSP target {dmsp_tgt.shape} and reference {dmsp_ref.shape} differ")
    if viirs_ref.shape != (2 * dmsp_ref.rows, 2 * dmsp_ref.cols):
        raise DataError(f"VIIRS reference {viirs_ref.shape} is not twice DMSP {dmsp_ref.shape}")

    ref_tiles, layout = tile_grid(_zero_nodata(dmsp_ref), tile_h, tile_w, overlap)
    tgt_tiles, _ = tile_grid(_zero_nodata(dmsp_tgt), tile_h, tile_w, overlap)
    v_tiles, vlayout = tile_grid(_zero_nodata(viirs_ref), 2 * tile_h, 2 * tile_w, 2 * overlap)
    assert vlayout == layout.scaled(2)

    def run(start: int):
        stop = min(start + batch_size, layout.count)
        x = to_model_units(np.stack([t.data for t in ref_tiles[start:stop]]),
                           np.stack([t.data for t in tgt_tiles[start:stop]]),
                           np.stack([t.data for t in v_tiles[start:stop]]), cfg)
        with ad.no_grad():
            y = forward(*x, params, cfg, training=False).data[:, 0]
        return np.clip(y.astype(np.float64) * cfg.viirs_scale, 0.0, ceil)

    starts = range(0, layout.count, batch_size)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            batches = list(pool.map(run, starts))
    else:
        batches = [run(s) for s in starts]
    outs = np.concatenate(batches)
    tiles = [Raster(o, t.x0, t.y0, t.dx, t.dy, viirs_ref.nodata) for o, t in zip(outs, v_tiles)]
    out = reassemble(tiles, vlayout)
    return Raster(out.data, viirs_ref.x0, viirs_ref.y0, viirs_ref.dx, viirs_ref.dy,
                  viirs_ref.nodata)


def _zero_nodata(r: Raster) -> Raster:
    return r if r.valid.all() else r.with_data(np.where(r.valid, r.data, 0.0))
