"""Image agreement metrics between a ground-truth and a reconstructed raster.

All three metrics use every pixel (dark ones included) and float64
arithmetic.  SSIM is the single-window form over the whole image with
population statistics, not the usual sliding-window average.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, UndefinedCorrelationError
from .raster import Raster

DEFAULT_MAX = 496.0


def _pair(gt, sr) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(gt.data if isinstance(gt, Raster) else gt, dtype=np.float64).ravel()
    b = np.asarray(sr.data if isinstance(sr, Raster) else sr, dtype=np.float64).ravel()
    gshape = gt.shape if hasattr(gt, "shape") else np.shape(gt)
    sshape = sr.shape if hasattr(sr, "shape") else np.shape(sr)
    if tuple(gshape) != tuple(sshape):
        raise DataError(f"image shapes differ: {tuple(gshape)} vs {tuple(sshape)}")
    if a.size == 0:
        raise DataError("empty images")
    return a, b


def pearson_r(gt, sr) -> float:
    a, b = _pair(gt, sr)
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("correlation undefined: an image has zero variance")
    # sqrt of the product keeps r(a, a) exactly 1; the clamp absorbs rounding
    return min(1.0, max(-1.0, float(da @ db) / math.sqrt(saa * sbb)))


def mse(gt, sr) -> float:
    a, b = _pair(gt, sr)
    d = a - b
    return float(d @ d) / a.size


def psnr(gt, sr, max_val: float = DEFAULT_MAX) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    if not max_val > 0:
        raise DataError(f"max_val must be positive, got {max_val}")
    e = mse(gt, sr)
    if e == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / e)


def ssim_global(gt, sr, max_val: float = DEFAULT_MAX) -> float:
    a, b = _pair(gt, sr)
    n = a.size
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a = float(da @ da) / n
    var_b = float(db @ db) / n
    cov = float(da @ db) / n
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(num / den)


@dataclass(frozen=True)
class MetricsReport:
    r: float
    psnr: float
    ssim: float
    n: int
    max_used: float
    label: str = ""


def evaluate_pair(gt, sr, max_val: float = DEFAULT_MAX, label: str = "") -> MetricsReport:
    a, _ = _pair(gt, sr)
    return MetricsReport(pearson_r(gt, sr), psnr(gt, sr, max_val), ssim_global(gt, sr, max_val),
                         a.size, float(max_val), label)


REPORT_COLUMNS = ("scope_label", "r", "psnr", "ssim", "n", "max_used")


def _fmt(x: float) -> str:
    return "inf" if x == math.inf else repr(float(x))


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for m in reports:
        w.writerow([m.label, _fmt(m.r), _fmt(m.psnr), _fmt(m.ssim), m.n, _fmt(m.max_used)])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricsReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(MetricsReport(float(row["r"]), float(row["psnr"]), float(row["ssim"]),
                                 int(row["n"]), float(row["max_used"]), row["scope_label"]))
    return out
