"""Quantitative metrics and diagnostics: PSNR, SSIM, a Fréchet distance
over frozen random conv features (within-artifact comparisons only), PCA
projections of latent grids, and loss-curve merging.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import PerceptualExtractor

PSNR_CAP = 99.0


@dataclass
class MetricReport:
    config_hash: str
    seed: int
    step: int
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not np.isfinite(value):
                raise ValueError(f"metric {name!r} is not finite: {value}")

    def lines(self):
        out = [f"config_hash={self.config_hash}", f"seed={self.seed}", f"step={self.step}"]
        out += [f"{k}={v:.6g}" for k, v in sorted(self.metrics.items())]
        return out

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.lines()) + "\n")


def _to_unit(a):
    return (np.asarray(a, dtype=np.float64) + 1.0) / 2.0


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on the unit range; capped at 99."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    mse = float(((_to_unit(a) - _to_unit(b)) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gray(a):
    u = _to_unit(a)
    return u.mean(axis=0) if u.ndim == 3 else u


def ssim(a, b, window=8):
    """Mean local SSIM with a uniform window (C1=0.01^2, C2=0.03^2)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    ga, gb = _gray(a), _gray(b)
    if min(ga.shape) < window:
        raise ValueError(f"ssim: image {ga.shape} smaller than {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def windows(x):
        return np.lib.stride_tricks.sliding_window_view(x, (window, window))

    wa, wb = windows(ga), windows(gb)
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa ** 2).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _floored_covariance(feats, floor=1e-6):
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, floor, None)
    return mu, (v * w) @ v.T, (v * np.sqrt(w)) @ v.T


def rfid_proxy(set_a, set_b, extractor=None):
    """Fréchet distance between Gaussian fits of pooled random-conv features.

    Values are only meaningful relative to other values computed with the
    same extractor; they are not comparable to Inception-feature FIDs.
    """
    set_a, set_b = np.asarray(set_a), np.asarray(set_b)
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("rfid_proxy: need at least 2 samples per set")
    if extractor is None:
        extractor = PerceptualExtractor()
    fa = extractor.pooled_features(set_a).astype(np.float64)
    fb = extractor.pooled_features(set_b).astype(np.float64)
    mu_a, cov_a, _ = _floored_covariance(fa)
    mu_b, cov_b, sqrt_b = _floored_covariance(fb)
    inner = sqrt_b @ cov_a @ sqrt_b
    w = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_cross = float(np.sqrt(w).sum())
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(d2, 0.0)


@dataclass
class PcaProjection:
    basis: np.ndarray              # [d, k] orthonormal columns, variance-ordered
    explained_variance: np.ndarray  # [k], nonincreasing
    mean: np.ndarray               # [d]


def fit_pca(latents):
    """Fit a PCA basis on per-position latent vectors of [n,d,h,w] grids."""
    lat = np.asarray(latents, dtype=np.float64)
    if lat.ndim != 4:
        raise ValueError(f"fit_pca: expected [n,d,h,w], got {lat.shape}")
    n, d, h, w = lat.shape
    if n * h * w < d:
        raise ValueError(f"fit_pca: {n * h * w} samples cannot fit {d} components")
    x = lat.transpose(0, 2, 3, 1).reshape(-1, d)
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False)
    w_, v = np.linalg.eigh(cov)
    order = np.argsort(w_)[::-1]
    w_, v = w_[order], v[:, order]
    rank = int((w_ > 1e-12).sum())
    if rank < d:
        warnings.warn(f"fit_pca: covariance rank {rank} < {d}, keeping available rank")
        w_, v = w_[:max(rank, 1)], v[:, :max(rank, 1)]
    return PcaProjection(basis=v, explained_variance=np.clip(w_, 0, None), mean=mean)


def pca_project(latents, projection=None):
    """Project latent grids onto a PCA basis; returns (projection, rgb).

    rgb is [n,3,h,w] in [0,1]: the top-3 components, min-max normalized per
    image per component. Pass a fitted `projection` to reuse one basis
    across models so renderings stay comparable.
    """
    lat = np.asarray(latents, dtype=np.float64)
    if projection is None:
        projection = fit_pca(lat)
    n, d, h, w = lat.shape
    k = min(3, projection.basis.shape[1])
    x = lat.transpose(0, 2, 3, 1).reshape(n, h * w, d)
    proj = (x - projection.mean) @ projection.basis[:, :k]  # [n, h*w, k]
    rgb = np.zeros((n, 3, h, w), dtype=np.float32)
    for i in range(n):
        for c in range(k):
            comp = proj[i, :, c].reshape(h, w)
            lo, hi = comp.min(), comp.max()
            rgb[i, c] = 0.5 if hi == lo else (comp - lo) / (hi - lo)
    return projection, rgb


def read_metrics_csv(path):
    """Rows of a metrics CSV; leading '# key=value' comment lines skipped."""
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if not rows:
        raise ValueError(f"{path}: empty metrics CSV")
    return rows


def ema_smooth(values, decay=0.9):
    out = []
    acc = None
    for v in values:
        acc = v if acc is None else decay * acc + (1.0 - decay) * v
        out.append(acc)
    return out


def emit_curves(csv_paths, out_path, decay=0.9):
    """Merge metric CSVs on the shared step column into one wide CSV,
    adding an EMA-smoothed column per series."""
    tables = {}
    for path in csv_paths:
        stem = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
        rows = read_metrics_csv(path)
        if "step" not in rows[0]:
            raise ValueError(f"{path}: no 'step' column")
        tables[stem] = {int(r["step"]): r for r in rows}
    shared = None
    for t in tables.values():
        shared = set(t) if shared is None else shared & set(t)
    if not shared:
        raise ValueError("emit_curves: no shared steps across inputs")
    steps = sorted(shared)
    header = ["step"]
    columns = {}
    for stem, t in tables.items():
        series = [c for c in t[steps[0]] if c != "step"]
        for col in series:
            vals = [float(t[s][col]) for s in steps]
            columns[f"{stem}.{col}"] = vals
            columns[f"{stem}.{col}.smooth"] = ema_smooth(vals, decay)
            header += [f"{stem}.{col}", f"{stem}.{col}.smooth"]
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i, s in enumerate(steps):
            writer.writerow([s] + [f"{columns[c][i]:.8g}" for c in header[1:]])
    return out_path
