"""Inter-calibration of DMSP-OLS products.

Calibration fields are pixels that are spatially uniform in every product,
temporally stable across the whole archive and never saturated.  Each
product is then mapped onto a base product (1999/F12 by convention) with a
quadratic fitted over those pixels.

Variation coefficients are computed as ``sqrt(n*S2 - S1**2) / S1`` from the
window (or series) sum ``S1`` and sum of squares ``S2``.  That equals the
population standard deviation over the mean, and for integer digital numbers
every intermediate is exact, so the masks do not depend on summation order.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, SingularFitError
from .raster import DMSP_MAX_DN, Mask, Raster, mask_product, quantile

DMSP_SATELLITES = ("F10", "F12", "F14", "F15", "F16", "F18")


@dataclass(frozen=True, order=True)
class ProductId:
    year: int
    satellite: str = ""
    sensor: str = "DMSP"

    def __post_init__(self):
        if self.sensor not in ("DMSP", "VIIRS"):
            raise DataError(f"unknown sensor {self.sensor!r}")
        if self.sensor == "DMSP" and not 1992 <= self.year <= 2019:
            raise DataError(f"DMSP products cover 1992-2019, got {self.year}")
        if self.sensor == "VIIRS" and self.year < 2012:
            raise DataError(f"VIIRS products start in 2012, got {self.year}")

    @classmethod
    def parse(cls, text: str) -> "ProductId":
        """Parse ``"2014F15"``, ``"2014:F15"`` or ``"VIIRS2014"``."""
        t = text.strip().replace(":", "")
        if t.upper().startswith("VIIRS"):
            return cls(int(t[5:]), "", "VIIRS")
        if len(t) < 5 or not t[:4].isdigit():
            raise DataError(f"cannot parse product id {text!r}")
        return cls(int(t[:4]), t[4:].upper(), "DMSP")

    def __str__(self):
        return f"VIIRS{self.year}" if self.sensor == "VIIRS" else f"{self.year}{self.satellite}"


BASE_PRODUCT = ProductId(1999, "F12")


@dataclass(frozen=True)
class CalibrationFit:
    """``base_equivalent = a*dn**2 + b*dn + c``."""

    product: ProductId
    a: float
    b: float
    c: float
    r2: float

    @classmethod
    def identity(cls, product: ProductId = BASE_PRODUCT) -> "CalibrationFit":
        return cls(product, 0.0, 1.0, 0.0, 1.0)

    def __call__(self, dn):
        return self.a * dn * dn + self.b * dn + self.c


def _table(years, sats, a, b, c, r2):
    return [CalibrationFit(ProductId(y, s), *v) for y, s, *v in zip(years, sats, a, b, c, r2)]


# Reference coefficients for the global archive (base 1999/F12), in table order.
REFERENCE_FITS: tuple[CalibrationFit, ...] = tuple(
    _table([1992, 1993, 1994, 1994, 1995, 1996, 1997, 1997, 1998],
           ["F10", "F10", "F10", "F12", "F12", "F12", "F12", "F14", "F12"],
           [-0.0107, -0.0118, -0.0075, -0.0102, -0.0062, -0.0072, -0.0041, -0.0157, -0.0033],
           [1.6983, 1.7771, 1.4614, 1.6623, 1.4031, 1.4873, 1.2572, 1.9777, 1.1930],
           [-2.3134, -2.8972, -0.1966, -2.5930, -1.5095, -2.0035, -0.3701, -2.1581, -0.2953],
           [0.9236, 0.9311, 0.9155, 0.9627, 0.9677, 0.9712, 0.9660, 0.9661, 0.9678])
    + _table([1998, 1999, 1999, 2000, 2000, 2001, 2001, 2002, 2002],
             ["F14", "F12", "F14", "F14", "F15", "F14", "F15", "F14", "F15"],
             [-0.0143, 0.0, -0.0119, -0.0074, -0.0039, -0.0072, -0.0023, -0.006, -0.0023],
             [1.8884, 1.0, 1.7665, 1.4813, 1.2645, 1.4321, 1.1326, 1.3605, 1.1322],
             [-1.8454, 0.0, -2.2813, -1.5059, -1.7579, -0.0765, 0.4873, -0.2098, 0.2721],
             [0.974, 1.0, 0.9883, 0.9721, 0.9740, 0.9659, 0.9705, 0.9645, 0.9696])
    + _table([2003, 2003, 2004, 2004, 2005, 2005, 2006, 2006, 2007],
             ["F14", "F15", "F15", "F16", "F15", "F16", "F15", "F16", "F15"],
             [-0.0064, -0.0131, -0.0127, -0.0093, -0.0094, -0.0116, -0.0087, -0.006, -0.0111],
             [1.3760, 1.8092, 1.7658, 1.5971, 1.5570, 1.7041, 1.5121, 1.3510, 1.6814],
             [0.5644, -0.6368, -0.0817, -1.8401, 0.9574, -0.2285, 1.7289, 1.3256, -0.3691],
             [0.9635, 0.9602, 0.9565, 0.9467, 0.9531, 0.9489, 0.9402, 0.9229, 0.9432])
    + _table([2007, 2008, 2009, 2010, 2011, 2012, 2013, 2013, 2014],
             ["F16", "F16", "F16", "F18", "F18", "F18", "F15", "F18", "F15"],
             [-0.0038, -0.0039, -0.003, 0.0102, -0.0009, 0.0030, -0.0176, 0.0006, -0.0194],
             [1.1971, 1.1952, 1.1484, 0.1829, 0.9751, 0.6763, 1.9709, 0.8688, 2.0911],
             [0.3308, 0.8991, 1.2554, 7.4196, 1.6559, 4.6656, 0.7879, 2.5010, -0.3125],
             [0.9334, 0.9407, 0.9371, 0.9261, 0.9190, 0.9044, 0.8723, 0.9208, 0.8719])
    + _table([2015, 2016, 2016, 2017, 2017, 2018, 2018, 2019, 2019],
             ["F15", "F15", "F16", "F15", "F16", "F15", "F16", "F15", "F16"],
             [-0.0209, -0.0213, -0.0269, -0.0218, -0.0239, -0.0211, -0.0199, -0.0200, -0.0191],
             [2.1549, 2.1562, 2.4526, 2.1726, 2.2963, 2.1457, 2.0848, 2.0940, 2.0538],
             [0.7466, 1.1204, 1.6481, 1.0962, 1.1565, 1.0301, 0.7396, 0.8782, 0.0231],
             [0.8667, 0.8531, 0.8564, 0.8344, 0.8369, 0.8471, 0.8461, 0.8516, 0.8552])
)


@dataclass(frozen=True)
class CalibrationStack:
    """Co-registered DMSP products, one raster per product."""

    products: tuple[ProductId, ...]
    rasters: tuple[Raster, ...]

    def __post_init__(self):
        object.__setattr__(self, "products", tuple(self.products))
        object.__setattr__(self, "rasters", tuple(self.rasters))
        if len(self.products) != len(self.rasters):
            raise DataError(f"{len(self.products)} products but {len(self.rasters)} rasters")
        if self.rasters:
            shape = self.rasters[0].shape
            for p, r in zip(self.products, self.rasters):
                if r.shape != shape:
                    raise DataError(f"raster for {p} has shape {r.shape}, expected {shape}")

    def __len__(self):
        return len(self.rasters)

    @property
    def shape(self):
        return self.rasters[0].shape


def _coefficient_of_variation(s1: np.ndarray, s2: np.ndarray, n: int) -> np.ndarray:
    num = np.maximum(n * s2 - s1 * s1, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(num) / s1


def spatial_vc(r: Raster, size: int = 3) -> Raster:
    """Per-pixel coefficient of variation over a ``size x size`` window.

    Border pixels, windows touching nodata and windows with zero mean get the
    raster's nodata value.
    """
    if r.rows < size or r.cols < size:
        raise DataError(f"raster {r.rows}x{r.cols} is smaller than the {size}x{size} window")
    x = r.data.astype(np.float64)
    valid = r.valid
    xz = np.where(valid, x, 0.0)
    win = sliding_window_view(xz, (size, size))
    s1 = win.sum(axis=(2, 3))
    s2 = (win * win).sum(axis=(2, 3))
    all_valid = sliding_window_view(valid, (size, size)).all(axis=(2, 3))
    vc = _coefficient_of_variation(s1, s2, size * size)
    inner = np.where(all_valid & (s1 > 0), vc, r.nodata)
    out = np.full(r.shape, r.nodata, dtype=np.float64)
    k = size // 2
    out[k:r.rows - k, k:r.cols - k] = inner
    return r.with_data(out)


def temporal_vc(s: CalibrationStack) -> Raster:
    """Per-pixel coefficient of variation across the products of a stack."""
    if len(s) < 2:
        raise DataError("temporal variation needs at least two products")
    cube = np.stack([r.data.astype(np.float64) for r in s.rasters])
    valid = np.stack([r.valid for r in s.rasters]).all(axis=0)
    cube = np.where(valid, cube, 0.0)
    s1 = cube.sum(axis=0)
    s2 = (cube * cube).sum(axis=0)
    vc = _coefficient_of_variation(s1, s2, len(s))
    ref = s.rasters[0]
    return ref.with_data(np.where(valid & (s1 > 0), vc, ref.nodata))


def vc_mask(vc: Raster, threshold: float, inclusive: bool = False) -> Mask:
    """1 where ``vc < threshold`` (``<=`` if ``inclusive``) and vc is valid."""
    v = vc.data.astype(np.float64)
    below = v <= threshold if inclusive else v < threshold
    return Mask((vc.valid & below).astype(np.uint8))


def unsaturated_mask(r: Raster) -> Mask:
    return Mask((r.data != DMSP_MAX_DN).astype(np.uint8))


def _pooled_quantile(rasters: Sequence[Raster], q: float) -> float | None:
    pooled = np.concatenate([r.data[r.valid].astype(np.float64) for r in rasters])
    if pooled.size == 0:
        return None
    return quantile(pooled, q)


def calibration_masks(s: CalibrationStack, spatial_q: float = 0.25,
                      temporal_q: float = 0.25) -> dict[str, Mask]:
    """All intermediate masks: ``TSM``, ``TM``, ``TUSM`` and ``CF``.

    Thresholds are quantiles of the data, so pixels equal to the threshold
    are kept.  Otherwise a stack where most pixels never vary (threshold 0)
    would select nothing.
    """
    if len(s) < 2:
        raise DataError("calibration fields need at least two products")
    empty = Mask(np.zeros(s.shape, dtype=np.uint8))

    svcs = [spatial_vc(r) for r in s.rasters]
    spatial_thr = _pooled_quantile(svcs, spatial_q)
    if spatial_thr is None:
        tsm = empty
    else:
        tsm = mask_product([vc_mask(v, spatial_thr, inclusive=True) for v in svcs])

    tvc = temporal_vc(s)
    temporal_thr = _pooled_quantile([tvc], temporal_q)
    tm = empty if temporal_thr is None else vc_mask(tvc, temporal_thr, inclusive=True)

    tusm = mask_product([unsaturated_mask(r) for r in s.rasters])
    cf = mask_product([tsm, tm, tusm])
    return {"TSM": tsm, "TM": tm, "TUSM": tusm, "CF": cf,
            "spatial_threshold": spatial_thr, "temporal_threshold": temporal_thr}


def calibration_fields(s: CalibrationStack, spatial_q: float = 0.25,
                       temporal_q: float = 0.25) -> Mask:
    return calibration_masks(s, spatial_q, temporal_q)["CF"]


def fit_quadratic(target: Raster, base: Raster, cf: Mask,
                  product: ProductId | None = None) -> CalibrationFit:
    """Least-squares quadratic mapping target DNs onto base DNs over ``cf``.

    Solves the 3x3 normal equations for ``(a, b, c)`` minimising
    ``sum((a*t**2 + b*t + c - base)**2)`` over selected pixels.  If target and
    base agree exactly on the selection, the exact identity is returned.
    """
    if target.shape != base.shape or target.shape != cf.shape:
        raise DataError(f"shape mismatch: target {target.shape}, base {base.shape}, "
                        f"mask {cf.shape}")
    sel = cf.bits.astype(bool) & target.valid & base.valid
    t = target.data[sel].astype(np.float64)
    y = base.data[sel].astype(np.float64)
    if np.unique(t).size < 3:
        raise SingularFitError(
            f"need at least 3 distinct target values in calibration fields, got {np.unique(t).size}")
    product = product if product is not None else BASE_PRODUCT
    if np.array_equal(t, y):
        return CalibrationFit.identity(product)

    design = np.column_stack([t * t, t, np.ones_like(t)])
    normal = design.T @ design
    rhs = design.T @ y
    try:
        a, b, c = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(f"normal equations are singular: {exc}") from None

    resid = y - (a * t * t + b * t + c)
    ss_res = float(resid @ resid)
    dev = y - y.mean()
    ss_tot = float(dev @ dev)
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return CalibrationFit(product, float(a), float(b), float(c), r2)


def apply_calibration(r: Raster, fit: CalibrationFit) -> Raster:
    """Map lit pixels through the fit, clamped to the DMSP range [0, 63].

    Dark pixels stay 0 and nodata is preserved.
    """
    v = r.data.astype(np.float64)
    lit = r.valid & (v > 0)
    mapped = np.clip(fit.a * v * v + fit.b * v + fit.c, 0.0, DMSP_MAX_DN)
    return r.with_data(np.where(lit, mapped, v))


def tlv(r: Raster) -> float:
    """Total light value: sum of valid pixels, accumulated in float64."""
    return float(np.sum(r.data[r.valid], dtype=np.float64))


def calibrate_stack(s: CalibrationStack, base: ProductId = BASE_PRODUCT,
                    spatial_q: float = 0.25, temporal_q: float = 0.25):
    """Run the whole procedure: calibration fields, one fit per product, and
    the calibrated rasters.  Returns ``(cf, fits, calibrated)``."""
    if base not in s.products:
        raise DataError(f"base product {base} is not in the stack")
    cf = calibration_fields(s, spatial_q, temporal_q)
    base_raster = s.rasters[s.products.index(base)]
    fits = [fit_quadratic(r, base_raster, cf, product=p) for p, r in zip(s.products, s.rasters)]
    calibrated = [apply_calibration(r, f) for r, f in zip(s.rasters, fits)]
    return cf, fits, calibrated


# --------------------------------------------------------------------------
# CSV persistence

FIT_COLUMNS = ("year", "satellite", "a", "b", "c", "r2")


def fits_to_csv(fits: Sequence[CalibrationFit]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIT_COLUMNS)
    for f in fits:
        w.writerow([f.product.year, f.product.satellite, repr(f.a), repr(f.b), repr(f.c), repr(f.r2)])
    return buf.getvalue()


def fits_from_csv(text: str) -> list[CalibrationFit]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != FIT_COLUMNS:
        raise DataError(f"fit CSV columns must be {FIT_COLUMNS}")
    return [CalibrationFit(ProductId(int(r["year"]), r["satellite"]), float(r["a"]),
                           float(r["b"]), float(r["c"]), float(r["r2"])) for r in rows]


def tlv_to_csv(products: Sequence[ProductId], rasters: Sequence[Raster]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("year", "satellite", "tlv"))
    for p, r in zip(products, rasters):
        w.writerow([p.year, p.satellite, repr(tlv(r))])
    return buf.getvalue()
