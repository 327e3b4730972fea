"""Image quality metrics between super-resolved and reference volumes.

All metrics are computed in float64. PSNR of identical volumes is
``math.inf`` in Python and the token ``INF`` in text reports.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

INF_TOKEN = "INF"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(x, y):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, data_range=1.0):
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def nrmse(x, y):
    """``||x - y|| / ||y||`` with ``y`` the reference."""
    x, y = _pair(x, y)
    ref = np.linalg.norm(y.ravel())
    if ref == 0:
        raise ValueError("nrmse reference volume has zero norm")
    return float(np.linalg.norm((x - y).ravel()) / ref)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(vol, g):
    out = vol
    for axis in range(3):
        out = sliding_window_view(out, g.size, axis=axis) @ g
    return out


def ssim3d(x, y, data_range=1.0):
    """Mean local SSIM with an isotropic Gaussian window, valid region only."""
    x, y = _pair(x, y)
    x, y = np.squeeze(x), np.squeeze(y)
    if x.ndim != 3:
        raise ShapeError(f"ssim3d needs 3-D volumes, got {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"volume {x.shape} is smaller than the {SSIM_WINDOW}^3 SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    # second moments are filtered from symmetric products so ssim(x,y) == ssim(y,x)
    s_xx = _filter_valid(x * x, g) - mu_x * mu_x
    s_yy = _filter_valid(y * y, g) - mu_y * mu_y
    s_xy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * s_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (s_xx + s_yy + c2)
    return float(np.mean(num / den))


def format_value(v):
    if math.isinf(v):
        return INF_TOKEN
    return f"{v:.6f}"


def parse_value(text):
    return math.inf if text == INF_TOKEN else float(text)


def mean_std(values):
    """Mean and population standard deviation; infinite entries make both INF."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no values to aggregate")
    if any(math.isinf(v) for v in values):
        return math.inf, (0.0 if all(math.isinf(v) for v in values) else math.inf)
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std())


@dataclass
class SubjectMetrics:
    id: str
    psnr: float
    ssim: float
    nrmse: float


@dataclass
class MetricReport:
    subjects: list = field(default_factory=list)
    baseline: "MetricReport | None" = None

    def add(self, subject_id, sr, hr, data_range=1.0):
        m = SubjectMetrics(subject_id, psnr(sr, hr, data_range), ssim3d(sr, hr, data_range), nrmse(sr, hr))
        self.subjects.append(m)
        return m

    def aggregate(self):
        return {
            name: mean_std([getattr(s, name) for s in self.subjects])
            for name in ("psnr", "ssim", "nrmse")
        }

    def lines(self, prefix=""):
        out = []
        for s in self.subjects:
            out.append(
                f"{prefix}subject={s.id} psnr={format_value(s.psnr)} "
                f"ssim={format_value(s.ssim)} nrmse={format_value(s.nrmse)}"
            )
        agg = self.aggregate()
        out.append(
            f"{prefix}aggregate n={len(self.subjects)} "
            + " ".join(
                f"{k}_mean={format_value(m)} {k}_std={format_value(sd)}" for k, (m, sd) in agg.items()
            )
        )
        return out

    def to_text(self):
        lines = self.lines()
        if self.baseline is not None:
            lines += self.baseline.lines(prefix="baseline ")
        return "\n".join(lines) + "\n"
