"""Raster data model and file formats.

A :class:`Raster` is a georeferenced 2-D float32 grid with a single nodata
sentinel.  It is the carrier for both DMSP-OLS digital numbers and VIIRS
radiances.  Two on-disk formats are supported:

* ``NTLR v1``, a small little-endian binary format that round-trips
  bit-exactly (:func:`write_raster` / :func:`read_raster`);
* ESRI ASCII grids, read-only (:func:`parse_ascii_grid`).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AsciiGridError, DataError, RasterFormatError

DEFAULT_NODATA = -1.0
DMSP_MAX_DN = 63

NTLR_MAGIC = b"NTLR"
NTLR_VERSION = 1
_NTLR_HEADER = struct.Struct("<4sHBBIIddddf")


@dataclass(frozen=True, eq=False)
class Raster:
    """Immutable georeferenced grid.

    ``x0, y0`` is the upper-left corner of the upper-left pixel; ``dy`` is
    negative for north-up grids.  ``data`` is stored as a read-only float32
    array of shape ``(rows, cols)``.
    """

    data: np.ndarray
    x0: float = 0.0
    y0: float = 0.0
    dx: float = 1.0
    dy: float = -1.0
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 2:
            raise DataError(f"raster data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(f"raster must have at least one row and column, got {data.shape}")
        nodata = float(np.float32(self.nodata))
        if not math.isfinite(nodata):
            raise DataError("nodata sentinel must be finite")
        valid = data != np.float32(nodata)
        if not np.all(np.isfinite(data[valid])):
            raise DataError("raster contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "nodata", nodata)
        for name in ("x0", "y0", "dx", "dy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def valid(self) -> np.ndarray:
        """Boolean array, True where the pixel is not nodata."""
        return self.data != np.float32(self.nodata)

    def with_data(self, data: np.ndarray) -> "Raster":
        """Same georeferencing and nodata, new values."""
        return Raster(data, self.x0, self.y0, self.dx, self.dy, self.nodata)

    def is_dmsp_range(self) -> bool:
        v = self.data[self.valid]
        return bool(np.all((v >= 0) & (v <= DMSP_MAX_DN)))

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        header = (self.x0, self.y0, self.dx, self.dy, self.nodata)
        other_header = (other.x0, other.y0, other.dx, other.dy, other.nodata)
        return (
            self.shape == other.shape
            and struct.pack("<5d", *header) == struct.pack("<5d", *other_header)
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return (f"Raster({self.rows}x{self.cols}, origin=({self.x0}, {self.y0}), "
                f"pixel=({self.dx}, {self.dy}), nodata={self.nodata})")


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary 0/1 grid derived from a raster."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.dtype != np.uint8:
            if not np.all((bits == 0) | (bits == 1)):
                raise DataError("mask values must be exactly 0 or 1")
            bits = bits.astype(np.uint8)
        elif np.any(bits > 1):
            raise DataError("mask values must be exactly 0 or 1")
        bits = bits.copy()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def issubset(self, other: "Mask") -> bool:
        return bool(np.all(self.bits <= other.bits))

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


@dataclass(frozen=True)
class TileRef:
    anchor_row: int
    anchor_col: int
    height: int
    width: int

    def scaled(self, factor: int) -> "TileRef":
        """Co-located tile on a grid ``factor`` times finer."""
        return TileRef(self.anchor_row * factor, self.anchor_col * factor,
                       self.height * factor, self.width * factor)

    def fits(self, rows: int, cols: int) -> bool:
        return (self.anchor_row >= 0 and self.anchor_col >= 0
                and self.height >= 1 and self.width >= 1
                and self.anchor_row + self.height <= rows
                and self.anchor_col + self.width <= cols)


# --------------------------------------------------------------------------
# NTLR binary format

def write_raster(r: Raster) -> bytes:
    header = _NTLR_HEADER.pack(NTLR_MAGIC, NTLR_VERSION, 0, 0, r.rows, r.cols,
                               r.x0, r.y0, r.dx, r.dy, r.nodata)
    return header + r.data.astype("<f4", copy=False).tobytes()


def read_raster(payload: bytes) -> Raster:
    payload = bytes(payload)
    if len(payload) < 4 or payload[:4] != NTLR_MAGIC:
        raise RasterFormatError(f"bad magic {payload[:4]!r}, expected {NTLR_MAGIC!r}")
    if len(payload) < _NTLR_HEADER.size:
        raise RasterFormatError(f"truncated header: {len(payload)} bytes")
    magic, version, dtype, _reserved, rows, cols, x0, y0, dx, dy, nodata = \
        _NTLR_HEADER.unpack_from(payload)
    if version != NTLR_VERSION:
        raise RasterFormatError(f"unsupported NTLR version {version}")
    if dtype != 0:
        raise RasterFormatError(f"unsupported dtype code {dtype}")
    if rows < 1 or cols < 1:
        raise RasterFormatError(f"invalid dimensions {rows}x{cols}")
    expected = _NTLR_HEADER.size + 4 * rows * cols
    if len(payload) < expected:
        raise RasterFormatError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise RasterFormatError(f"{len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4", count=rows * cols,
                         offset=_NTLR_HEADER.size).reshape(rows, cols)
    return Raster(data, x0, y0, dx, dy, nodata)


def save_raster(path, r: Raster) -> None:
    Path(path).write_bytes(write_raster(r))


def load_raster(path) -> Raster:
    return read_raster(Path(path).read_bytes())


# --------------------------------------------------------------------------
# ESRI ASCII grid

_HEADER_KEYS = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter",
                "yllcenter", "cellsize", "nodata_value"}


def _tokens(text: str):
    """Yield (token, line, column) with 1-based positions."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        col = 0
        n = len(line)
        while col < n:
            while col < n and line[col].isspace():
                col += 1
            if col >= n:
                break
            start = col
            while col < n and not line[col].isspace():
                col += 1
            yield line[start:col], lineno, start + 1


def parse_ascii_grid(text: str, nodata: float = DEFAULT_NODATA) -> Raster:
    """Parse an ESRI ASCII grid.

    Header keys are case-insensitive.  Both ``xllcorner``/``yllcorner`` and
    ``xllcenter``/``yllcenter`` are accepted; the result always uses the
    upper-left-corner convention of :class:`Raster`.  Cells equal to the
    file's ``NODATA_value`` become ``nodata``.
    """
    toks = _tokens(text)
    header: dict[str, float] = {}
    pending = None
    for tok, line, col in toks:
        key = tok.lower()
        if key not in _HEADER_KEYS:
            pending = (tok, line, col)
            break
        try:
            value_tok, vline, vcol = next(toks)
        except StopIteration:
            raise AsciiGridError(f"header key {tok!r} has no value", line, col) from None
        if vline != line:
            raise AsciiGridError(f"header key {tok!r} has no value", line, col)
        if key in header:
            raise AsciiGridError(f"duplicate header key {tok!r}", line, col)
        try:
            header[key] = float(value_tok)
        except ValueError:
            raise AsciiGridError(f"non-numeric header value {value_tok!r}", vline, vcol) from None

    for required in ("ncols", "nrows", "cellsize"):
        if required not in header:
            raise AsciiGridError(f"missing header key {required!r}", 1, 1)
    if ("xllcorner" in header) == ("xllcenter" in header):
        raise AsciiGridError("header needs exactly one of xllcorner/xllcenter", 1, 1)
    if ("yllcorner" in header) == ("yllcenter" in header):
        raise AsciiGridError("header needs exactly one of yllcorner/yllcenter", 1, 1)

    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise AsciiGridError(f"invalid grid dimensions {nrows} x {ncols}", 1, 1)
    ncols, nrows = int(ncols), int(nrows)
    cell = header["cellsize"]
    if not cell > 0:
        raise AsciiGridError(f"cellsize must be positive, got {cell}", 1, 1)
    file_nodata = header.get("nodata_value", -9999.0)

    xll = header["xllcorner"] if "xllcorner" in header else header["xllcenter"] - cell / 2
    yll = header["yllcorner"] if "yllcorner" in header else header["yllcenter"] - cell / 2

    expected = nrows * ncols
    values = np.empty(expected, dtype=np.float64)
    count = 0
    last_pos = (1, 1)
    stream = toks if pending is None else _chain_first(pending, toks)
    for tok, line, col in stream:
        last_pos = (line, col)
        if count >= expected:
            raise AsciiGridError(
                f"token count exceeds {nrows}x{ncols}={expected} values", line, col)
        try:
            v = float(tok)
        except ValueError:
            raise AsciiGridError(f"non-numeric value {tok!r}", line, col) from None
        if not math.isfinite(v):
            raise AsciiGridError(f"non-finite value {tok!r}", line, col)
        values[count] = v
        count += 1
    if count != expected:
        raise AsciiGridError(
            f"token count {count} does not match {nrows}x{ncols}={expected}", *last_pos)

    data = values.reshape(nrows, ncols)
    data = np.where(data == file_nodata, nodata, data)
    return Raster(data, x0=xll, y0=yll + nrows * cell, dx=cell, dy=-cell, nodata=nodata)


def _chain_first(first, rest):
    yield first
    yield from rest


# --------------------------------------------------------------------------
# statistics and masks

def quantile(values: Iterable[float], q: float) -> float:
    """Linear-interpolation quantile between order statistics.

    With sorted values ``v`` and rank ``h = q*(n-1)`` the result is
    ``v[floor(h)] + (h - floor(h)) * (v[ceil(h)] - v[floor(h)])``.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DataError("quantile of empty input")
    if not 0.0 <= q <= 1.0:
        raise DataError(f"quantile fraction must be in [0, 1], got {q}")
    h = q * (v.size - 1)
    lo = math.floor(h)
    hi = math.ceil(h)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def mask_product(masks: Sequence[Mask]) -> Mask:
    if not masks:
        raise DataError("mask_product needs at least one mask")
    shape = masks[0].shape
    out = masks[0].bits.copy()
    for m in masks[1:]:
        if m.shape != shape:
            raise DataError(f"mask dimension mismatch: {m.shape} vs {shape}")
        out &= m.bits
    return Mask(out)


def extract_tile(r: Raster, t: TileRef) -> Raster:
    if not t.fits(r.rows, r.cols):
        raise DataError(f"tile {t} out of bounds for {r.rows}x{r.cols} raster")
    sub = r.data[t.anchor_row:t.anchor_row + t.height, t.anchor_col:t.anchor_col + t.width]
    return Raster(sub, r.x0 + t.anchor_col * r.dx, r.y0 + t.anchor_row * r.dy,
                  r.dx, r.dy, r.nodata)


def lit_fraction(r: Raster) -> float:
    lit = np.count_nonzero(r.valid & (r.data > 0))
    return lit / (r.rows * r.cols)


def export_pgm(r: Raster, path, vmin: float | None = None, vmax: float | None = None) -> None:
    """Write a 16-bit binary PGM plus a ``.txt`` sidecar with the scaling.

    Values are mapped linearly from ``[vmin, vmax]`` to ``[0, 65535]``;
    nodata pixels are written as 0.
    """
    path = Path(path)
    valid = r.valid
    v = r.data[valid].astype(np.float64)
    lo = float(v.min()) if vmin is None and v.size else (vmin if vmin is not None else 0.0)
    hi = float(v.max()) if vmax is None and v.size else (vmax if vmax is not None else 1.0)
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip((r.data.astype(np.float64) - lo) * scale, 0, 65535)
    img = np.where(valid, np.rint(img), 0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{r.cols} {r.rows}\n65535\n".encode("ascii"))
        fh.write(img.tobytes())
    sidecar = path.with_suffix(path.suffix + ".txt")
    sidecar.write_text(
        f"source_min={lo!r}\nsource_max={hi!r}\nscale={scale!r}\n"
        f"mapping=pgm = round((value - source_min) * scale), clipped to [0, 65535]\n"
        f"nodata_written_as=0\n")
