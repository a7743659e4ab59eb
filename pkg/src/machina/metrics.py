"""Fidelity, rate and rate-accuracy curve measurement."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import coder as B
from . import task as K
from .params import ParameterSet

PEAK = 255.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
SSIM_K = (0.01, 0.03)
REGIME_ORDER = ("BASELINE", "T_FT", "C_FT", "J_FT", "J_FT_FD")
CURVE_COLUMNS = ("regime", "q", "beta", "bpp", "map50", "map5095", "psnr_db", "msssim")


class MetricError(ValueError):
    pass


def _as_peak_scale(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64)
    return arr.astype(np.float64) * PEAK


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_peak_scale(a), _as_peak_scale(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with a 255 peak; float inputs are in [0, 1]. Identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / mse)


def _gauss_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the two trailing axes of [C,H,W]."""
    x = sliding_window_view(x, len(win), axis=1) @ win
    return sliding_window_view(x, len(win), axis=2) @ win


def _ssim_terms(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (ssim, contrast-structure) means for [C,H,W] arrays."""
    c1 = (SSIM_K[0] * PEAK) ** 2
    c2 = (SSIM_K[1] * PEAK) ** 2
    mu1, mu2 = _filter(a, win), _filter(b, win)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _filter(a * a, win) - mu1_sq
    s2 = _filter(b * b, win) - mu2_sq
    s12 = _filter(a * b, win) - mu12
    cs_map = (2 * s12 + c2) / (s1 + s2 + c2)
    ssim_map = ((2 * mu12 + c1) / (mu1_sq + mu2_sq + c1)) * cs_map
    return ssim_map.mean(axis=(1, 2)), cs_map.mean(axis=(1, 2))


def _pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sizes get one zero pad row/column counted in the average."""
    c, h, w = x.shape
    x = np.pad(x, ((0, 0), (h % 2, h % 2), (w % 2, w % 2)))
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    return x[:, :2 * h2, :2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def ms_ssim_scales(height: int, width: int) -> int:
    """Number of scales usable for an image: the coarsest must still exceed the window 2^(L-1) times."""
    side = min(height, width)
    for levels in range(len(MS_SSIM_WEIGHTS), 0, -1):
        if side > (WINDOW - 1) * 2 ** (levels - 1):
            return levels
    return 0


def ms_ssim_weights(levels: int) -> np.ndarray:
    """Standard weights at full scale; fewer scales take the leading weights rescaled to sum to 1."""
    w = np.asarray(MS_SSIM_WEIGHTS[:levels])
    return w if levels == len(MS_SSIM_WEIGHTS) else w / w.sum()


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale SSIM of two H x W x 3 images (mean over channels).

    Images smaller than 161 px use fewer scales with the leading weights renormalized to sum to 1.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    a, b = a.transpose(2, 0, 1), b.transpose(2, 0, 1)
    levels = ms_ssim_scales(a.shape[1], a.shape[2])
    if levels == 0:
        raise MetricError(f"image {a.shape[1]}x{a.shape[2]} too small for MS-SSIM (need > {WINDOW - 1} px)")
    weights = ms_ssim_weights(levels)
    win = _gauss_window()
    factors = []
    for i in range(levels):
        ssim_c, cs_c = _ssim_terms(a, b, win)
        if i < levels - 1:
            factors.append(np.maximum(cs_c, 0.0))
            a, b = _pool2(a), _pool2(b)
    factors.append(np.maximum(ssim_c, 0.0))
    per_channel = np.prod(np.stack(factors) ** weights[:, None], axis=0)
    return float(per_channel.mean())


def measure_bpp(bs: B.Bitstream | bytes, width: int, height: int) -> float:
    """File-size rate, 8 * total container bytes / pixels (header included)."""
    if not isinstance(bs, B.Bitstream):
        bs = B.Bitstream.from_bytes(bytes(bs))
    if (bs.width, bs.height) != (width, height):
        raise MetricError(f"stream header says {bs.width}x{bs.height}, caller says {width}x{height}")
    return 8.0 * len(bs) / (width * height)


# ------------------------------------------------------------------- curves


@dataclass(frozen=True)
class CurvePoint:
    regime: str
    q: int
    beta: float
    bpp: float
    map50: float
    map5095: float
    psnr_db: float
    msssim: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise MetricError(f"bpp must be positive, got {self.bpp}")
        if not (self.psnr_db > 0):
            raise MetricError(f"psnr must be positive or inf, got {self.psnr_db}")
        if not 0.0 <= self.msssim <= 1.0:
            raise MetricError(f"ms-ssim outside [0, 1]: {self.msssim}")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_curve_csv(path: str | Path, points: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for p in sorted(points, key=lambda p: (p.bpp, p.q, p.beta)):
            w.writerow([_fmt(v) for v in astuple(p)])


def read_curve_csv(path: str | Path) -> list[CurvePoint]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    types = {f.name: f.type for f in fields(CurvePoint)}
    out = []
    for r in rows:
        out.append(CurvePoint(**{k: (r[k] if types[k] in (str, "str") else
                                     int(r[k]) if types[k] in (int, "int") else float(r[k]))
                                 for k in CURVE_COLUMNS}))
    return out


def nearest_deltas(reference: Sequence[CurvePoint], other: Sequence[CurvePoint]) -> list[dict]:
    """For each point of ``other``, metric differences (other - ref) against the nearest-bpp reference point.

    Ties in bpp distance go to the lower-rate reference point.
    """
    if not reference or not other:
        raise MetricError("nearest-bpp deltas need two non-empty curves")
    ref = sorted(reference, key=lambda p: p.bpp)
    rows = []
    for p in sorted(other, key=lambda p: p.bpp):
        r = min(ref, key=lambda c: (abs(c.bpp - p.bpp), c.bpp))
        rows.append({
            "regime": p.regime, "reference": r.regime, "q": p.q, "beta": p.beta,
            "bpp": p.bpp, "ref_bpp": r.bpp,
            "d_map50": p.map50 - r.map50, "d_map5095": p.map5095 - r.map5095,
            "d_psnr_db": p.psnr_db - r.psnr_db, "d_msssim": p.msssim - r.msssim,
        })
    return rows


SUMMARY_COLUMNS = ("regime", "reference", "q", "beta", "bpp", "ref_bpp", "d_map50", "d_map5095", "d_psnr_db",
                   "d_msssim")


def _regime_rank(name: str) -> tuple[int, str]:
    return (REGIME_ORDER.index(name) if name in REGIME_ORDER else len(REGIME_ORDER), name)


def build_curves(points: Iterable[CurvePoint], out_dir: str | Path) -> dict[str, Path]:
    """Write ``curves_<regime>.csv`` per regime and ``curves_summary.csv`` of nearest-bpp deltas.

    Every later regime (in BASELINE, T_FT, C_FT, J_FT, J_FT_FD order) is compared against every earlier one.
    """
    points = list(points)
    if not points:
        raise MetricError("no curve points to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_regime: dict[str, list[CurvePoint]] = {}
    for p in points:
        by_regime.setdefault(p.regime, []).append(p)
    paths: dict[str, Path] = {}
    for regime, pts in by_regime.items():
        paths[regime] = out / f"curves_{regime}.csv"
        write_curve_csv(paths[regime], pts)
    names = sorted(by_regime, key=_regime_rank)
    rows = []
    for i, ref in enumerate(names):
        for other in names[i + 1:]:
            rows.extend(nearest_deltas(by_regime[ref], by_regime[other]))
    paths["summary"] = out / "curves_summary.csv"
    with open(paths["summary"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    return paths


# --------------------------------------------------------------- evaluation


@dataclass
class ImageResult:
    bpp: float
    psnr_db: float
    msssim: float
    reconstruction: np.ndarray  # [3,H,W], clamped and 8-bit quantized


def _code_one(args: tuple[np.ndarray, ParameterSet, int]) -> ImageResult:
    x, params, q = args
    bs = B.serialize(x[None], params, q)
    data = bs.to_bytes()
    rec = B.deserialize(data, params)[0]
    rec = np.floor(rec * PEAK + 0.5) / PEAK
    ref_hwc, rec_hwc = x.transpose(1, 2, 0), rec.transpose(1, 2, 0)
    _, h, w = x.shape
    return ImageResult(measure_bpp(data, w, h), psnr(ref_hwc, rec_hwc), ms_ssim(ref_hwc, rec_hwc), rec)


def code_images(images: np.ndarray, params: ParameterSet, q: int, workers: int | None = None) -> list[ImageResult]:
    """Round-trip each image through a real bitstream; ``workers`` > 1 fans out over processes."""
    workers = workers or int(os.environ.get("MACHINA_THREADS", "1") or 1)
    jobs = [(x, params, q) for x in images]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_code_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_code_one(j) for j in jobs]


def _finite_mean(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()) if np.isfinite(arr).all() else math.inf


def evaluate_point(scenes: Sequence[K.Scene], codec_params: ParameterSet, task_params: ParameterSet,
                   regime: str, q: int, beta: float, workers: int | None = None) -> CurvePoint:
    """Code every scene, run the detector on the decoded images and average the metrics."""
    images = K.images_nchw(scenes)
    results = code_images(images, codec_params, q, workers)
    recs = np.stack([r.reconstruction for r in results])
    m = K.evaluate_map(K.detect(recs, task_params), scenes)
    return CurvePoint(regime=str(regime), q=int(q), beta=float(beta),
                      bpp=float(np.mean([r.bpp for r in results])),
                      map50=m["map50"], map5095=m["map5095"],
                      psnr_db=_finite_mean([r.psnr_db for r in results]),
                      msssim=float(np.mean([r.msssim for r in results])))
