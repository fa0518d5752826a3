"""Post-hoc per-pixel uncertainty for a frozen segmenter.

A small head reads a patch of the input image and the same patch of the frozen
prediction and emits, per pixel, a mean ``mu``, a scale ``a > 0`` and a shape
``b > 0`` of a generalized Gaussian. The implied variance
``a**2 * G(3/b) / G(1/b)`` is the uncertainty map. The head is fitted with a
negative log-likelihood plus a term pulling ``mu`` towards the prediction.

The test bed is synthetic: bright discs on a textured background, a frozen
smooth-then-threshold segmenter, and corruptions (noise, contrast loss, blur)
that play the part of unseen target domains. The uncertain area (pixels above
the Otsu threshold of the map) is then compared to the segmenter's Dice.
"""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import digamma, expit, gammaln

from .config import to_dict
from .core import NumericError, atomic_write_text, clip_global_norm, ggd_uncertainty, load_named, make_rng, save_named
from .optim import AdamState, adam_update, cosine_lr

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8
GAUSS_SHAPE = 2.0
# targets are masks in [0, 1], so residuals never need a scale above 1
LOG_SCALE_CAP = 0.0
OTSU_BINS = 256


# --- configuration -----------------------------------------------------------

@dataclass
class ShiftSpec:
    noise_sigma: float = 0.0
    contrast_gain: float = 0.0
    blur_radius: float = 0.0

    def validate(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be a finite value >= 0")


def default_shift_grid(levels=6, noise=0.03, contrast=2.0, blur=0.2):
    """Monotone grid: level 0 is the clean source domain, the last the strongest shift."""
    ts = np.linspace(0.0, 1.0, levels)
    return [ShiftSpec(float(noise * t), float(contrast * t), float(blur * t)) for t in ts]


@dataclass
class BlobConfig:
    H: int = 32
    W: int = 32
    min_blobs: int = 1
    max_blobs: int = 3
    min_radius: float = 3.0
    max_radius: float = 7.0
    background: float = 0.2
    foreground: float = 0.8
    foreground_jitter: float = 0.15  # per-image foreground level drawn from foreground +- jitter
    texture_sigma: float = 0.05
    noise_sigma: float = 0.02
    noise_sigma_max: float = 0.1  # per-image noise level drawn from [noise_sigma, noise_sigma_max]

    def validate(self):
        if self.H < 8 or self.W < 8:
            raise ValueError("images must be at least 8x8")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ValueError("need 1 <= min_blobs <= max_blobs")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("need 0 < min_radius <= max_radius")
        if self.texture_sigma < 0 or not 0 <= self.noise_sigma <= self.noise_sigma_max:
            raise ValueError("need texture_sigma >= 0 and 0 <= noise_sigma <= noise_sigma_max")
        if self.foreground_jitter < 0:
            raise ValueError("foreground_jitter must be >= 0")


@dataclass
class PredictorConfig:
    smooth_sigma: float = 1.0
    threshold: float = 0.5

    def validate(self):
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be >= 0")


@dataclass
class UQConfig:
    patch: int = 5
    hidden: int = 16
    ggd: bool = False
    lam_rec: float = 1.0
    epochs: int = 60
    batch: int = 16
    n_train: int = 128
    n_eval: int = 24
    lr: float = 3e-3
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    blobs: BlobConfig = field(default_factory=BlobConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    shifts: List[ShiftSpec] = field(default_factory=default_shift_grid)

    def validate(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("patch must be a positive odd integer")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.lam_rec < 0:
            raise ValueError("lam_rec must be >= 0")
        if self.epochs < 0 or self.batch < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ValueError("epochs must be >= 0 and batch, n_train, n_eval >= 1")
        if not (self.lr > 0 and 0 <= self.lr_min <= self.lr):
            raise ValueError("need lr > 0 and 0 <= lr_min <= lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("adam betas must lie in [0, 1) and eps > 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        self.blobs.validate()
        self.predictor.validate()
        for s in self.shifts:
            s.validate()


# --- synthetic images and the frozen predictor -------------------------------

def blob_image(rng, cfg):
    """(x, gt): a textured image with bright discs and its binary mask."""
    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W]
    gt = np.zeros((cfg.H, cfg.W), dtype=bool)
    for _ in range(int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))):
        r = rng.uniform(cfg.min_radius, cfg.max_radius)
        cy, cx = rng.uniform(0, cfg.H), rng.uniform(0, cfg.W)
        gt |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    fg = cfg.foreground + rng.uniform(-cfg.foreground_jitter, cfg.foreground_jitter)
    x = np.where(gt, fg, cfg.background)
    x = ndimage.gaussian_filter(x, 0.7, mode="nearest")
    texture = ndimage.gaussian_filter(rng.standard_normal(x.shape), 2.0, mode="wrap")
    texture *= cfg.texture_sigma / max(texture.std(), 1e-12)
    sigma = rng.uniform(cfg.noise_sigma, cfg.noise_sigma_max)
    x = x + texture + sigma * rng.standard_normal(x.shape)
    return x, gt.astype(np.float64)


def apply_shift(x, shift, rng):
    """Blur, then pull intensities towards the image mean, then add noise."""
    out = np.asarray(x, dtype=np.float64)
    if shift.blur_radius > 0:
        out = ndimage.gaussian_filter(out, shift.blur_radius, mode="nearest")
    if shift.contrast_gain > 0:
        m = out.mean()
        out = m + (out - m) / (1.0 + shift.contrast_gain)
    if shift.noise_sigma > 0:
        out = out + shift.noise_sigma * rng.standard_normal(out.shape)
    return out


@dataclass(frozen=True)
class FrozenPredictor:
    """Smooth-then-threshold segmenter. It has no trainable state."""

    smooth_sigma: float = 1.0
    threshold: float = 0.5

    def __call__(self, x):
        s = ndimage.gaussian_filter(np.asarray(x, dtype=np.float64), self.smooth_sigma, mode="nearest")
        return (s > self.threshold).astype(np.float64)


def source_set(cfg, rng, n):
    return [blob_image(rng, cfg.blobs) for _ in range(n)]


# --- head --------------------------------------------------------------------

HEAD_NAMES = ("W1", "b1", "w_mu", "b_mu", "w_scale", "b_scale", "w_shape", "b_shape")


@dataclass
class UQHead:
    W1: np.ndarray  # 2p^2 x hidden
    b1: np.ndarray
    w_mu: np.ndarray
    b_mu: np.ndarray
    w_scale: np.ndarray
    b_scale: np.ndarray
    w_shape: np.ndarray
    b_shape: np.ndarray
    patch: int = 5
    ggd: bool = False

    def __post_init__(self):
        for name in HEAD_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        hidden = self.W1.shape[1]
        if self.W1.shape[0] != 2 * self.patch**2:
            raise ValueError(f"W1 has {self.W1.shape[0]} inputs, patch {self.patch} needs {2 * self.patch**2}")
        if self.b1.shape != (hidden,):
            raise ValueError("b1 width does not match W1")
        for name in ("w_mu", "w_scale", "w_shape"):
            if getattr(self, name).shape != (hidden,):
                raise ValueError(f"{name} must have shape ({hidden},)")
        for name in ("b_mu", "b_scale", "b_shape"):
            if getattr(self, name).shape != ():
                raise ValueError(f"{name} must be a scalar")

    @property
    def hidden(self):
        return self.W1.shape[1]

    def named(self):
        return {n: getattr(self, n) for n in HEAD_NAMES}

    def with_params(self, named):
        return UQHead(**{n: named[n] for n in HEAD_NAMES}, patch=self.patch, ggd=self.ggd)


def init_head(rng, patch=5, hidden=32, ggd=False):
    d = 2 * patch * patch
    return UQHead(
        W1=rng.standard_normal((d, hidden)) / math.sqrt(d),
        b1=np.zeros(hidden),
        w_mu=rng.standard_normal(hidden) * 0.1 / math.sqrt(hidden),
        b_mu=np.float64(0.0),
        w_scale=rng.standard_normal(hidden) * 0.1 / math.sqrt(hidden),
        b_scale=np.float64(0.0),
        w_shape=np.zeros(hidden),
        b_shape=np.float64(math.log(GAUSS_SHAPE)),
        patch=patch,
        ggd=ggd,
    )


def patch_features(x, y_hat, patch):
    """(H*W) x 2p^2 matrix of edge-replicated p x p patches of x and y_hat."""
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if x.shape != y_hat.shape or x.ndim != 2:
        raise ValueError(f"x and prediction must be equal 2-D shapes, got {x.shape} and {y_hat.shape}")
    r = patch // 2
    cols = []
    for img in (x, y_hat):
        padded = np.pad(img, r, mode="edge")
        cols.append(sliding_window_view(padded, (patch, patch)).reshape(img.size, patch * patch))
    return np.concatenate(cols, axis=1)


@dataclass
class UQOutput:
    mu: np.ndarray
    scale: np.ndarray
    shape: np.ndarray
    uncertainty: np.ndarray


@dataclass
class _HeadCache:
    feats: np.ndarray
    h: np.ndarray
    raw_scale: np.ndarray


def _first_bad_pixel(arr, W):
    k = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
    return f"pixel ({k // W}, {k % W})"


def uq_forward(x, y_hat, head, return_cache=False):
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape
    feats = patch_features(x, y_hat, head.patch)
    # non-finite values are reported below with the offending pixel
    with np.errstate(all="ignore"):
        h = np.tanh(feats @ head.W1 + head.b1)
        mu = h @ head.w_mu + head.b_mu
        raw = h @ head.w_scale + head.b_scale
        # soft cap: log(scale) = cap - softplus(cap - raw) <= cap
        scale = np.exp(LOG_SCALE_CAP - np.logaddexp(0.0, LOG_SCALE_CAP - raw))
        if head.ggd:
            shape = np.exp(h @ head.w_shape + head.b_shape)
        else:
            shape = np.full(H * W, GAUSS_SHAPE)
    for name, arr in (("mu", mu), ("scale", scale), ("shape", shape)):
        if not np.all(np.isfinite(arr)):
            raise NumericError("uq_forward", f"{name} at {_first_bad_pixel(arr, W)}")
    unc = ggd_uncertainty(scale, shape)
    if not np.all(np.isfinite(unc)):
        raise NumericError("uq_forward", f"uncertainty at {_first_bad_pixel(unc, W)}")
    out = UQOutput(mu.reshape(H, W), scale.reshape(H, W), shape.reshape(H, W), unc.reshape(H, W))
    if return_cache:
        return out, _HeadCache(feats, h, raw)
    return out


def head_backward(head, cache, d_mu, d_log_scale, d_log_shape=None):
    """Parameter gradients from gradients w.r.t. mu, log(scale) and log(shape)."""
    d_mu = np.ravel(d_mu)
    d_ls = np.ravel(d_log_scale) * expit(LOG_SCALE_CAP - cache.raw_scale)
    h = cache.h
    grads = {
        "w_mu": h.T @ d_mu,
        "b_mu": np.float64(d_mu.sum()),
        "w_scale": h.T @ d_ls,
        "b_scale": np.float64(d_ls.sum()),
    }
    dh = np.outer(d_mu, head.w_mu) + np.outer(d_ls, head.w_scale)
    if head.ggd and d_log_shape is not None:
        d_lb = np.ravel(d_log_shape)
        grads["w_shape"] = h.T @ d_lb
        grads["b_shape"] = np.float64(d_lb.sum())
        dh += np.outer(d_lb, head.w_shape)
    else:
        grads["w_shape"] = np.zeros_like(head.w_shape)
        grads["b_shape"] = np.float64(0.0)
    dpre = dh * (1.0 - h * h)
    grads["W1"] = cache.feats.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return grads


# --- losses ------------------------------------------------------------------

@dataclass
class LossTerms:
    loss: float
    d_mu: np.ndarray
    d_sigma2: np.ndarray  # Gaussian mode; zero where the floor was hit
    d_scale: np.ndarray
    d_shape: np.ndarray
    floored: int = 0


def uq_loss(out, y, y_hat, lam_rec=1.0):
    """Gaussian NLL with variance scale**2 / 2, plus lam_rec * (mu - y_hat)**2, summed over pixels."""
    if lam_rec < 0:
        raise ValueError("lam_rec must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    mu = out.mu
    raw = out.scale**2 / 2.0
    low = raw < SIGMA2_FLOOR
    floored = int(low.sum())
    if floored:
        log.warning("uq_loss: %d pixel variances clamped to %g", floored, SIGMA2_FLOOR)
    s2 = np.where(low, SIGMA2_FLOOR, raw)
    r = y - mu
    rec = mu - y_hat
    loss = float(np.sum(r * r / (2.0 * s2) + 0.5 * np.log(s2)) + lam_rec * np.sum(rec * rec))
    d_mu = -r / s2 + 2.0 * lam_rec * rec
    d_s2 = np.where(low, 0.0, -(r * r) / (2.0 * s2 * s2) + 0.5 / s2)
    d_scale = d_s2 * out.scale
    return LossTerms(loss, d_mu, d_s2, d_scale, np.zeros_like(mu), floored)


def ggd_loss(out, y, y_hat, lam_rec=1.0, eps=1e-6):
    """Generalized Gaussian NLL, summed over pixels:
    (|y - mu| / a)**b - log b + log(2a) + log G(1/b), plus the same reconstruction term.

    |r| is smoothed to sqrt(r**2 + eps**2) so the loss stays differentiable at r = 0.
    """
    if lam_rec < 0:
        raise ValueError("lam_rec must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    mu, a, b = out.mu, out.scale, out.shape
    r = y - mu
    ar = np.sqrt(r * r + eps * eps)
    q = ar / a
    qb = q**b
    rec = mu - y_hat
    nll = qb - np.log(b) + np.log(2.0 * a) + gammaln(1.0 / b)
    loss = float(nll.sum() + lam_rec * np.sum(rec * rec))
    d_mu = -b * qb / ar * (r / ar) + 2.0 * lam_rec * rec
    d_a = (1.0 - b * qb) / a
    d_b = qb * np.log(q) - 1.0 / b - digamma(1.0 / b) / (b * b)
    return LossTerms(loss, d_mu, np.zeros_like(mu), d_a, d_b, 0)


def head_loss(head, x, y, y_hat, lam_rec):
    """Mean per-pixel loss of the head on one image and its parameter gradients."""
    out, cache = uq_forward(x, y_hat, head, return_cache=True)
    terms = (ggd_loss if head.ggd else uq_loss)(out, y, y_hat, lam_rec)
    n = out.mu.size
    grads = head_backward(head, cache, terms.d_mu / n, terms.d_scale * out.scale / n, terms.d_shape * out.shape / n)
    return terms.loss / n, grads, terms.floored


# --- Otsu, area, Dice, Pearson -----------------------------------------------

def otsu_threshold(values):
    """Bin edge maximising between-class variance of a 256-bin histogram over [min, max].

    Candidates are the 255 interior edges; ties go to the lower edge. A constant
    input returns its value.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("otsu_threshold needs at least 2 values")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return lo
    counts, edges = np.histogram(v, bins=OTSU_BINS, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    mt = float(np.sum(p * centers))
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    return float(edges[1 + int(np.argmax(between))])


def uncertain_area(unc_map):
    """Fraction of pixels strictly above the Otsu threshold of the map (0 for a constant map)."""
    u = np.asarray(unc_map, dtype=np.float64)
    if u.size == 0:
        raise ValueError("empty uncertainty map")
    if u.min() == u.max():
        return 0.0
    return float(np.mean(u > otsu_threshold(u)))


def dice_score(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.sum(pred & gt)) / denom


def pearson_corr(xs, ys):
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("pearson_corr needs equal-length inputs")
    if x.size < 3:
        raise ValueError("pearson_corr needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(np.dot(dx, dx)), math.sqrt(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation is undefined: zero variance input")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


# --- training and evaluation --------------------------------------------------

def make_predictor(cfg):
    return FrozenPredictor(cfg.predictor.smooth_sigma, cfg.predictor.threshold)


def train_uq(cfg, predictor=None):
    """Fit a head on clean source images. Returns (head, per-epoch mean losses).

    The predictor is only ever called; its outputs are computed once up front.
    """
    cfg.validate()
    predictor = predictor or make_predictor(cfg)
    data_rng = make_rng(cfg.seed, 10)
    init_rng = make_rng(cfg.seed, 11)
    order_rng = make_rng(cfg.seed, 12)
    images = source_set(cfg, data_rng, cfg.n_train)
    triples = [(x, gt, predictor(x)) for x, gt in images]
    head = init_head(init_rng, cfg.patch, cfg.hidden, cfg.ggd)
    state = AdamState()
    steps_per_epoch = math.ceil(len(triples) / cfg.batch)
    total = cfg.epochs * steps_per_epoch
    history = []
    floored = 0
    step = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(triples))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            acc = {n: 0.0 for n in HEAD_NAMES}
            batch_loss = 0.0
            for i in idx:
                x, gt, y_hat = triples[i]
                loss, grads, nf = head_loss(head, x, gt, y_hat, cfg.lam_rec)
                floored += nf
                batch_loss += loss
                for n in HEAD_NAMES:
                    acc[n] = acc[n] + grads[n] / len(idx)
            if not math.isfinite(batch_loss):
                raise NumericError("train_uq", f"loss at epoch {len(history)}, step {step}")
            acc = dict(zip(HEAD_NAMES, clip_global_norm([acc[n] for n in HEAD_NAMES], cfg.clip_norm)))
            lr = cosine_lr(cfg.lr, step, total, cfg.lr_min)
            new, state = adam_update(head.named(), acc, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            head = head.with_params(new)
            losses.append(batch_loss / len(idx))
            step += 1
        history.append(float(np.mean(losses)))
    if floored:
        log.warning("train_uq: variance floor hit %d times", floored)
    return head, history


def save_head(directory, head, cfg=None, history=None):
    extra = {"kind": "uq_head", "patch": head.patch, "hidden": head.hidden, "ggd": head.ggd}
    if cfg is not None:
        extra["config"] = to_dict(cfg)
    if history is not None:
        extra["loss_history"] = [float(v) for v in history]
    save_named(directory, {n: np.atleast_1d(v) if np.ndim(v) == 0 else v for n, v in head.named().items()}, extra)


def load_head(directory):
    tensors, manifest = load_named(directory)
    named = {n: (tensors[n].reshape(()) if n.startswith("b_") else tensors[n]) for n in HEAD_NAMES}
    return UQHead(**named, patch=int(manifest["patch"]), ggd=bool(manifest["ggd"])), manifest


REPORT_COLUMNS = ["level", "noise_sigma", "contrast_gain", "blur_radius", "mean_area", "mean_dice", "mse_area_vs_error"]


def eval_ood(head, cfg, shifts=None, predictor=None):
    """Uncertain area and Dice of the frozen predictor at each shift level.

    Every level corrupts the same held-out clean images (fresh noise per level).
    """
    predictor = predictor or make_predictor(cfg)
    shifts = cfg.shifts if shifts is None else shifts
    images = source_set(cfg, make_rng(cfg.seed, 20), cfg.n_eval)
    levels = []
    for li, shift in enumerate(shifts):
        shift.validate()
        rng = make_rng(cfg.seed, 21, li)
        areas, dices = [], []
        for x, gt in images:
            xs = apply_shift(x, shift, rng)
            y_hat = predictor(xs)
            out = uq_forward(xs, y_hat, head)
            areas.append(uncertain_area(out.uncertainty))
            dices.append(dice_score(y_hat, gt))
        areas, dices = np.array(areas), np.array(dices)
        levels.append(
            {
                "level": li,
                **asdict(shift),
                "mean_area": float(areas.mean()),
                "mean_dice": float(dices.mean()),
                "mse_area_vs_error": float(np.mean((areas - (1.0 - dices)) ** 2)),
            }
        )
    report = {
        "seed": cfg.seed,
        "levels": levels,
        "mean_area": [lv["mean_area"] for lv in levels],
        "mean_dice": [lv["mean_dice"] for lv in levels],
    }
    try:
        report["pearson_area_dice"] = pearson_corr(report["mean_area"], report["mean_dice"])
    except ValueError:
        report["pearson_area_dice"] = None
    return report


def report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for lv in report["levels"]:
        w.writerow([lv["level"]] + [repr(float(lv[c])) for c in REPORT_COLUMNS[1:]])
    return buf.getvalue()


def write_report(path, report):
    """JSON report at ``path`` plus a CSV twin next to it (same stem, .csv)."""
    path = Path(path)
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    atomic_write_text(path.with_suffix(".csv"), report_csv(report))
