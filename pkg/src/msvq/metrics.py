"""PSNR / SSIM on 8-bit quantized frames, clip aggregation and rate accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class MetricConfig:
    data_range: float = 255.0
    psnr_cap: float = 100.0
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.data_range <= 0 or not math.isfinite(self.psnr_cap):
            raise ValidationError("data_range must be > 0 and psnr_cap finite")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


DEFAULT_METRICS = MetricConfig()


def to_uint8(x) -> np.ndarray:
    """[0, 1] floats -> 0..255 with round-half-up; uint8 input passes through."""
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x
    return np.clip(np.floor(x.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _pair(a, b):
    a = to_uint8(a).astype(np.float64)
    b = to_uint8(b).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(frame_a, frame_b, config: MetricConfig = DEFAULT_METRICS) -> float:
    a, b = _pair(frame_a, frame_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return config.psnr_cap
    return min(config.psnr_cap, 10.0 * math.log10(config.data_range ** 2 / mse))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim(frame_a, frame_b, config: MetricConfig = DEFAULT_METRICS) -> float:
    """Mean SSIM (11x11 Gaussian, 'valid' windows), averaged over channels.

    Frames are ``(H, W)`` or ``(C, H, W)``.
    """
    a, b = _pair(frame_a, frame_b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"expected (H, W) or (C, H, W) frames, got {a.shape}")
    if a.shape[1] < config.window or a.shape[2] < config.window:
        raise DimensionError(f"frame {a.shape[1:]} smaller than the {config.window}x{config.window} window")
    g = gaussian_window(config.window, config.sigma)
    stack = np.concatenate([a, b, a * a, b * b, a * b], axis=0)
    filt = kernels.filter_valid(stack, g)
    c = a.shape[0]
    mu_a, mu_b = filt[:c], filt[c:2 * c]
    var_a = filt[2 * c:3 * c] - mu_a ** 2
    var_b = filt[3 * c:4 * c] - mu_b ** 2
    cov = filt[4 * c:] - mu_a * mu_b
    c1, c2 = config.c1, config.c2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.mean(smap.reshape(c, -1).mean(axis=1)))


def clip_metrics(clip_a, clip_b, config: MetricConfig = DEFAULT_METRICS) -> tuple[float, float]:
    """Frame-averaged (PSNR, SSIM) of two ``(3, T, H, W)`` clips."""
    a = np.asarray(clip_a)
    b = np.asarray(clip_b)
    if a.shape != b.shape or a.ndim != 4:
        raise DimensionError(f"clip shapes must match as (C, T, H, W): {a.shape} vs {b.shape}")
    ps, ss = [], []
    for t in range(a.shape[1]):
        ps.append(psnr(a[:, t], b[:, t], config))
        ss.append(ssim(a[:, t], b[:, t], config))
    return float(np.mean(ps)), float(np.mean(ss))


def bpp_theoretical(n_top: int, k_top: int, n_bottom: int, k_bottom: int,
                    t: int, h: int, w: int) -> float:
    pixels = t * h * w
    if pixels <= 0:
        raise ValidationError("T*H*W must be positive")
    bits = 0.0
    for n, k in ((n_top, k_top), (n_bottom, k_bottom)):
        if n < 0:
            raise ValidationError("index counts must be non-negative")
        if n:
            bits += n * math.log2(k)
    return bits / pixels


@dataclass(frozen=True)
class RateReport:
    n_top: int
    n_bottom: int
    k_top: int
    k_bottom: int
    theoretical_bpp: float
    deflate_bpp: float
    payload_bytes: int
    header_bytes: int
    raw_index_bytes: int

    @property
    def ratio_vs_raw24(self) -> float:
        """Compressed payload bits relative to 24-bit RGB pixels."""
        return self.deflate_bpp / 24.0


def bpp_deflate(container: bytes, t: int | None = None, h: int | None = None,
                w: int | None = None) -> float:
    """8 * compressed payload bytes / (T*H*W).  Clip dims default to the header."""
    from .bitstream import parse_header

    header = parse_header(container)
    t = header.dims[0] if t is None else t
    h = header.dims[1] if h is None else h
    w = header.dims[2] if w is None else w
    if t * h * w <= 0:
        raise ValidationError("T*H*W must be positive")
    if header.total_indices == 0:
        return 0.0
    return 8.0 * header.payload_bytes / (t * h * w)


def rate_report(container: bytes) -> RateReport:
    from .bitstream import parse_header

    header = parse_header(container)
    levels = {lv.name: lv for lv in header.levels}
    top = levels.get("top")
    bottom = levels["bottom"]
    n_top = top.count if top else 0
    k_top = top.alphabet if top else 1
    t, h, w = header.dims
    return RateReport(
        n_top=n_top, n_bottom=bottom.count, k_top=k_top, k_bottom=bottom.alphabet,
        theoretical_bpp=bpp_theoretical(n_top, k_top, bottom.count, bottom.alphabet, t, h, w),
        deflate_bpp=bpp_deflate(container),
        payload_bytes=header.payload_bytes,
        header_bytes=header.header_bytes,
        raw_index_bytes=2 * header.total_indices,
    )
