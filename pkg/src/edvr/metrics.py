"""PSNR / SSIM on RGB or luminance."""
import dataclasses
import math

import numpy as np

from .tensor import ShapeError

_Y_COEF = np.array([65.481, 128.553, 24.966])


def rgb_to_y(image):
    """BT.601 studio-range luma of a (..., 3, H, W) image in [0, 1], returned in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 3 or image.shape[-3] != 3:
        raise ShapeError(f"rgb_to_y: expected 3 channels on axis -3, got shape {image.shape}")
    y = np.tensordot(_Y_COEF, np.moveaxis(image, -3, 0), axes=1) + 16.0
    return (y / 255.0)[..., None, :, :]


def _select(a, mode):
    if mode == "y":
        return rgb_to_y(a)
    if mode == "rgb":
        return np.asarray(a, dtype=np.float64)
    raise ValueError(f"unknown metric mode {mode!r}")


def psnr(a, b, mode="rgb"):
    """10*log10(1/MSE) over the selected channels; ``inf`` for identical inputs."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    d = _select(a, mode) - _select(b, mode)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean single-scale SSIM of two single-channel (H, W) images.

    Gaussian-weighted local statistics over every fully contained window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 and np.prod(a.shape[:-2]) == 1 else a
    b = b.reshape(b.shape[-2:]) if b.ndim > 2 and np.prod(b.shape[:-2]) == 1 else b
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"ssim: expected a single-channel image, got shape {a.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"ssim: image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_ssim(a, b, mode="rgb"):
    """SSIM of (3, H, W) images: luma SSIM, or the mean of per-channel SSIM."""
    if mode == "y":
        return ssim(rgb_to_y(a)[0], rgb_to_y(b)[0])
    if mode == "rgb":
        return float(np.mean([ssim(a[c], b[c]) for c in range(a.shape[0])]))
    raise ValueError(f"unknown metric mode {mode!r}")


@dataclasses.dataclass
class MetricReport:
    """Per-clip PSNR/SSIM plus their averages."""

    mode: str
    clips: list = dataclasses.field(default_factory=list)  # (name, psnr, ssim, n_frames)

    def add(self, name, preds, gts):
        ps = [psnr(p, g, self.mode) for p, g in zip(preds, gts)]
        ss = [image_ssim(p, g, self.mode) for p, g in zip(preds, gts)]
        self.clips.append((name, _mean_psnr(ps), float(np.mean(ss)), len(ps)))

    @property
    def frame_count(self):
        return sum(c[3] for c in self.clips)

    def average(self):
        if not self.clips:
            return math.nan, math.nan
        return _mean_psnr([c[1] for c in self.clips]), float(np.mean([c[2] for c in self.clips]))

    def lines(self):
        out = [f"{name} {_fmt(p)} {s:.6f} {self.mode}" for name, p, s, _ in self.clips]
        if len(self.clips) > 1:
            p, s = self.average()
            out.append(f"average {_fmt(p)} {s:.6f} {self.mode}")
        return out


def _mean_psnr(values):
    return float(np.mean(values))


def _fmt(p):
    return "inf" if math.isinf(p) else f"{p:.4f}"
