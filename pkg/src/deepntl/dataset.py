"""Training data: VIIRS cleaning, tile sampling, example construction.

Also holds a synthetic scene generator so the whole pipeline can be run at
desk scale without the global archives.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .calib import ProductId
from .errors import DataError, InsufficientLitAreaError
from .raster import DMSP_MAX_DN, Raster, TileRef, extract_tile, lit_fraction, load_raster, \
    quantile, write_raster

VIIRS_FLOOR = 0.5
VIIRS_CEIL = 496.0

REFERENCE_DMSP = ProductId(2014, "F15")
REFERENCE_VIIRS = ProductId(2014, "", "VIIRS")

SPLITS = ("train", "val", "test")


def clean_viirs(r: Raster, floor: float = VIIRS_FLOOR, ceil: float = VIIRS_CEIL) -> Raster:
    """Zero background noise below ``floor`` and cap outliers at ``ceil``."""
    if not floor < ceil:
        raise DataError(f"floor {floor} must be below ceil {ceil}")
    v = r.data
    out = np.where(v < floor, 0.0, np.where(v > ceil, ceil, v))
    return r.with_data(np.where(r.valid, out, v))


def viirs_ceiling(rasters: Sequence[Raster], q: float = 0.9999) -> float:
    """Quantile of the lit pixels pooled across all rasters."""
    lit = [r.data[r.valid & (r.data > 0)] for r in rasters]
    pooled = np.concatenate(lit) if lit else np.empty(0)
    if pooled.size == 0:
        raise DataError("no lit pixels to take a ceiling from")
    return quantile(pooled, q)


def sample_points(dmsp_ref: Raster, viirs_ref: Raster, n: int, tile_h: int = 128,
                  tile_w: int = 128, min_lit: float = 0.01, seed: int = 0,
                  max_attempts: int | None = None) -> list[TileRef]:
    """Draw ``n`` tile anchors whose DMSP tile and co-located VIIRS tile are
    both lit on more than ``min_lit`` of their pixels.

    Point ``i`` draws from its own generator seeded with ``(seed, i)``, so the
    result does not depend on evaluation order.  The total number of draws is
    capped at ``max_attempts`` (default ``1000 * n``).
    """
    if viirs_ref.shape != (2 * dmsp_ref.rows, 2 * dmsp_ref.cols):
        raise DataError(f"VIIRS reference {viirs_ref.shape} is not twice DMSP {dmsp_ref.shape}")
    if tile_h > dmsp_ref.rows or tile_w > dmsp_ref.cols or tile_h < 1 or tile_w < 1:
        raise DataError(f"tile {tile_h}x{tile_w} does not fit a {dmsp_ref.shape} raster")
    budget = 1000 * n if max_attempts is None else max_attempts
    max_row = dmsp_ref.rows - tile_h
    max_col = dmsp_ref.cols - tile_w
    points: list[TileRef] = []
    attempts = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        while True:
            if attempts >= budget:
                raise InsufficientLitAreaError(
                    f"found {len(points)} of {n} lit tiles in {attempts} attempts")
            attempts += 1
            t = TileRef(int(rng.integers(0, max_row + 1)), int(rng.integers(0, max_col + 1)),
                        tile_h, tile_w)
            if (lit_fraction(extract_tile(dmsp_ref, t)) > min_lit
                    and lit_fraction(extract_tile(viirs_ref, t.scaled(2))) > min_lit):
                points.append(t)
                break
    return points


@dataclass(frozen=True, eq=False)
class Example:
    """One training quadruple, all tiles co-located."""

    dmsp_ref: Raster
    dmsp_tgt: Raster
    viirs_ref: Raster
    viirs_tgt: Raster
    product_tgt: ProductId
    tile: TileRef
    point_index: int = 0

    def __post_init__(self):
        h, w = self.dmsp_ref.shape
        if self.dmsp_tgt.shape != (h, w):
            raise DataError(f"DMSP target tile {self.dmsp_tgt.shape} != reference {(h, w)}")
        for name in ("viirs_ref", "viirs_tgt"):
            if getattr(self, name).shape != (2 * h, 2 * w):
                raise DataError(f"{name} tile {getattr(self, name).shape} is not {(2 * h, 2 * w)}")


@dataclass
class DatasetManifest:
    examples: list[Example]
    splits: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not self.splits:
            self.splits = ["train"] * len(self.examples)
        if len(self.splits) != len(self.examples):
            raise DataError(f"{len(self.splits)} split labels for {len(self.examples)} examples")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split labels {sorted(bad)}")

    def __len__(self):
        return len(self.examples)

    def subset(self, split: str) -> list[Example]:
        return [e for e, s in zip(self.examples, self.splits) if s == split]

    def counts(self) -> dict[str, int]:
        return {s: self.splits.count(s) for s in SPLITS}


def build_examples(points: Sequence[TileRef], ref_dmsp: Raster, ref_viirs: Raster,
                   targets: Sequence[tuple[ProductId, Raster, Raster]]) -> DatasetManifest:
    """One example per (point, target product), point-major order."""
    shape = ref_dmsp.shape
    vshape = (2 * shape[0], 2 * shape[1])
    if ref_viirs.shape != vshape:
        raise DataError(f"reference VIIRS {ref_viirs.shape} is not twice DMSP {shape}")
    for product, d, v in targets:
        if d.shape != shape or v.shape != vshape:
            raise DataError(f"target {product}: DMSP {d.shape} / VIIRS {v.shape} do not match "
                            f"reference {shape} / {vshape}")
    examples = []
    for i, t in enumerate(points):
        if not t.fits(*shape):
            raise DataError(f"tile {t} out of bounds for {shape}")
        vt = t.scaled(2)
        d_ref = extract_tile(ref_dmsp, t)
        v_ref = extract_tile(ref_viirs, vt)
        for product, d, v in targets:
            examples.append(Example(d_ref, extract_tile(d, t), v_ref, extract_tile(v, vt),
                                    product, t, i))
    return DatasetManifest(examples)


def split_manifest(m: DatasetManifest, train_frac: float = 0.95, seed: int = 0,
                   by_point: bool = False) -> DatasetManifest:
    """Random train/val assignment.

    By default examples are shuffled individually and exactly
    ``round(train_frac * n)`` go to training.  ``by_point=True`` keeps all
    examples of one anchor point in the same split (avoids spatial leakage);
    counts are then only approximate.
    """
    if len(m) == 0:
        raise DataError("cannot split an empty manifest")
    if not 0.0 <= train_frac <= 1.0:
        raise DataError(f"train_frac must be in [0, 1], got {train_frac}")
    rng = np.random.default_rng(seed)
    n = len(m)
    n_train = int(round(train_frac * n))
    splits = ["val"] * n
    if by_point:
        groups: dict[tuple, list[int]] = {}
        for i, e in enumerate(m.examples):
            groups.setdefault((e.tile.anchor_row, e.tile.anchor_col), []).append(i)
        keys = list(groups)
        assigned = 0
        for k in rng.permutation(len(keys)):
            if assigned >= n_train:
                break
            for i in groups[keys[k]]:
                splits[i] = "train"
            assigned += len(groups[keys[k]])
    else:
        for i in rng.permutation(n)[:n_train]:
            splits[i] = "train"
    return replace(m, splits=splits, seed=seed)


# --------------------------------------------------------------------------
# persistence: manifest CSV + content-addressed tile store

MANIFEST_COLUMNS = ("example_id", "split", "target_year", "target_satellite", "anchor_row",
                    "anchor_col", "dmsp_ref_path", "dmsp_tgt_path", "viirs_ref_path",
                    "viirs_tgt_path")


def store_tile(root: Path, r: Raster) -> str:
    """Write ``r`` under ``tiles/<2 hex>/<sha256>.ntlr``; returns the relative path."""
    payload = write_raster(r)
    digest = hashlib.sha256(payload).hexdigest()
    rel = Path("tiles") / digest[:2] / f"{digest}.ntlr"
    path = root / rel
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    return rel.as_posix()


def save_manifest(m: DatasetManifest, root) -> Path:
    """Write tiles and ``manifest.csv`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for i, (e, s) in enumerate(zip(m.examples, m.splits)):
        paths = [store_tile(root, r) for r in (e.dmsp_ref, e.dmsp_tgt, e.viirs_ref, e.viirs_tgt)]
        w.writerow([i, s, e.product_tgt.year, e.product_tgt.satellite,
                    e.tile.anchor_row, e.tile.anchor_col, *paths])
    path = root / "manifest.csv"
    path.write_text(buf.getvalue())
    return path


def load_manifest(path) -> DatasetManifest:
    """Read a manifest CSV; tile paths are relative to its directory."""
    path = Path(path)
    root = path.parent
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    if rows and tuple(rows[0].keys()) != MANIFEST_COLUMNS:
        raise DataError(f"manifest columns must be {MANIFEST_COLUMNS}")
    examples, splits = [], []
    anchors: dict[tuple[int, int], int] = {}
    for row in rows:
        tiles = [load_raster(root / row[k]) for k in MANIFEST_COLUMNS[6:]]
        ar, ac = int(row["anchor_row"]), int(row["anchor_col"])
        h, w = tiles[0].shape
        sat = row["target_satellite"]
        product = ProductId(int(row["target_year"]), sat, "DMSP" if sat else "VIIRS")
        point = anchors.setdefault((ar, ac), len(anchors))
        examples.append(Example(*tiles, product, TileRef(ar, ac, h, w), point))
        splits.append(row["split"])
    return DatasetManifest(examples, splits)


# --------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class SceneParams:
    """Knobs of the synthetic generator (VIIRS radiance units)."""

    n_blobs: int = 12
    n_lines: int = 4
    blob_amplitude: tuple[float, float] = (8.0, 400.0)
    blob_sigma: tuple[float, float] = (1.5, 6.0)
    line_amplitude: tuple[float, float] = (3.0, 25.0)
    growth: tuple[float, float] = (-0.08, 0.25)
    saturation_radiance: float = 60.0
    overglow_sigma: float = 1.2


def _scene_elements(rng: np.random.Generator, vr: int, vc: int, p: SceneParams):
    lo, hi = np.log(p.blob_amplitude[0]), np.log(p.blob_amplitude[1])
    blobs = []
    for _ in range(p.n_blobs):
        blobs.append(dict(
            r=rng.uniform(0, vr), c=rng.uniform(0, vc),
            amp=float(np.exp(rng.uniform(lo, hi))),
            sigma=rng.uniform(*p.blob_sigma),
            growth=rng.uniform(*p.growth),
            onset=int(rng.integers(-6, 4)),
        ))
    lines = []
    for _ in range(p.n_lines):
        lines.append(dict(
            r0=rng.uniform(0, vr), c0=rng.uniform(0, vc), theta=rng.uniform(0, np.pi),
            amp=rng.uniform(*p.line_amplitude), width=rng.uniform(0.6, 1.5),
            growth=rng.uniform(0.0, 0.1),
        ))
    return blobs, lines


def _render_viirs(blobs, lines, vr: int, vc: int, t: int) -> np.ndarray:
    rr, cc = np.mgrid[0:vr, 0:vc].astype(np.float64)
    img = np.zeros((vr, vc))
    for b in blobs:
        if t < b["onset"]:
            continue
        amp = b["amp"] * (1.0 + b["growth"]) ** t
        img += amp * np.exp(-((rr - b["r"]) ** 2 + (cc - b["c"]) ** 2) / (2 * b["sigma"] ** 2))
    for ln in lines:
        d = np.abs((rr - ln["r0"]) * np.cos(ln["theta"]) - (cc - ln["c0"]) * np.sin(ln["theta"]))
        amp = ln["amp"] * (1.0 + ln["growth"]) ** t
        img += amp * np.exp(-(d ** 2) / (2 * ln["width"] ** 2))
    return np.clip(img, 0.0, VIIRS_CEIL)


def viirs_to_dmsp(viirs: np.ndarray, params: SceneParams = SceneParams(),
                  gain: float = 1.0, keep_intermediates: bool = False):
    """Degrade a VIIRS-like array into DMSP-like digital numbers.

    2x box downsampling, Gaussian blur as an overglow surrogate, linear
    rescale so ``saturation_radiance`` maps to DN 63, saturation clip, and
    rounding to integer DNs.
    """
    r, c = viirs.shape
    box = viirs.reshape(r // 2, 2, c // 2, 2).mean(axis=(1, 3))
    blurred = ndimage.gaussian_filter(box, params.overglow_sigma, mode="constant")
    scaled = gain * blurred * DMSP_MAX_DN / params.saturation_radiance
    dn = np.rint(np.clip(scaled, 0.0, DMSP_MAX_DN))
    if keep_intermediates:
        return dn, {"box": box, "blurred": blurred, "scaled": scaled}
    return dn


def synth_series(seed: int, rows: int, cols: int, n_frames: int,
                 params: SceneParams = SceneParams(), start: int = 0,
                 gains: Sequence[float] | None = None) -> list[tuple[Raster, Raster]]:
    """Consistent multi-year scenes: the same settlements and roads, growing
    (or dimming) from frame to frame, some appearing late.

    Frame ``k`` corresponds to time offset ``start + k``.  ``gains`` gives a
    per-frame DMSP sensor gain, mimicking inter-satellite differences.
    """
    if rows % 2 or cols % 2 or rows < 2 or cols < 2:
        raise DataError(f"scene dimensions must be positive and even, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    vr, vc = 2 * rows, 2 * cols
    blobs, lines = _scene_elements(rng, vr, vc, params)
    noise_rng = np.random.default_rng([seed, 1])
    out = []
    for k in range(n_frames):
        v = _render_viirs(blobs, lines, vr, vc, start + k)
        v = v + noise_rng.uniform(0.0, 0.45, size=v.shape)
        viirs = clean_viirs(Raster(np.clip(v, 0.0, VIIRS_CEIL), 0.0, 0.0, 0.5, -0.5, -1.0))
        gain = 1.0 if gains is None else gains[k]
        dmsp = Raster(viirs_to_dmsp(viirs.data.astype(np.float64), params, gain),
                      0.0, 0.0, 1.0, -1.0, -1.0)
        out.append((dmsp, viirs))
    return out


def synth_scene(seed: int, rows: int, cols: int,
                params: SceneParams = SceneParams()) -> tuple[Raster, Raster]:
    """A single DMSP-like ``rows x cols`` scene and its VIIRS-like 2x
    counterpart.  Deterministic per seed."""
    return synth_series(seed, rows, cols, 1, params)[0]
