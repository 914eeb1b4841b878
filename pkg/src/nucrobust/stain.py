"""Stain separation and normalization for H&E images.

All routines work in optical density (OD = log10(I0 / I)), where stain
absorption mixes linearly.  Two normalizers are provided:

* Ruifrok: fixed H&E stain vectors, concentrations by pseudo-inverse,
  per-stain 99th-percentile alignment to the reference.
* Vahadane: stain vectors fitted per image by sparse non-negative matrix
  factorization, concentrations re-expressed with the reference's vectors.

``plausibility_check`` flags outputs with a teal cast or a degenerate stain
fit so they can be kept out of quantitative comparisons.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .colorspace import rgb_to_hsv
from .core import NumericalError

RUIFROK_HE = np.array([[0.650, 0.704, 0.286],
                       [0.072, 0.990, 0.105]]).T
RUIFROK_HE = RUIFROK_HE / np.linalg.norm(RUIFROK_HE, axis=0)

TISSUE_OD = 0.15
MIN_SEPARATION_DEG = 1.0
# one stain carrying under this fraction of the other's p99 counts as absent
MIN_SCALE_RATIO = 0.01
# OD data this close to a single direction cannot identify two stains
MIN_RANK_RATIO = 0.02


class StainFitError(NumericalError):
    pass


class StainWarning(UserWarning):
    pass


@dataclass
class StainModel:
    W: np.ndarray                   # (3, 2): columns haematoxylin, eosin
    conc_scale: np.ndarray          # (2,)
    method: str                     # "ruifrok_fixed" | "vahadane_fit"
    lam: Optional[float] = None
    seed: Optional[int] = None
    converged: bool = True
    n_iter: int = 0
    history: list = field(default_factory=list, repr=False, compare=False)
    # second/first singular value of the fitted OD data; None for fixed models
    rank_ratio: Optional[float] = field(default=None, compare=False)

    @property
    def separation_deg(self) -> float:
        return stain_separation_deg(self.W)

    @property
    def degenerate(self) -> bool:
        s = np.asarray(self.conc_scale, dtype=np.float64)
        return (self.separation_deg <= MIN_SEPARATION_DEG
                or not np.isfinite(s).all() or s.min() <= MIN_SCALE_RATIO * max(s.max(), 1e-12)
                or (self.rank_ratio is not None and self.rank_ratio < MIN_RANK_RATIO))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "W": [float(x) for x in np.asarray(self.W).ravel()],
            "conc_scale": [float(x) for x in self.conc_scale],
            "lambda": self.lam,
            "seed": self.seed,
            "converged": bool(self.converged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StainModel":
        return cls(np.asarray(d["W"], dtype=np.float64).reshape(3, 2),
                   np.asarray(d["conc_scale"], dtype=np.float64), d["method"],
                   d.get("lambda"), d.get("seed"), d.get("converged", True))


def stain_separation_deg(W: np.ndarray) -> float:
    a, b = W[:, 0], W[:, 1]
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-300)
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


def rgb_to_od(img: np.ndarray, I0: float = 255.0, eps: float = 1.0) -> np.ndarray:
    return np.log10(I0 / np.maximum(np.asarray(img, dtype=np.float64), eps))


def od_to_rgb(od: np.ndarray, I0: float = 255.0) -> np.ndarray:
    i = I0 * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.clip(np.floor(i + 0.5), 0, 255).astype(np.uint8)


def tissue_mask(od: np.ndarray, threshold: float = TISSUE_OD) -> np.ndarray:
    return np.linalg.norm(od, axis=-1) > threshold


def ruifrok_deconvolve(od: np.ndarray, W: np.ndarray = RUIFROK_HE) -> np.ndarray:
    """Per-pixel stain concentrations ``pinv(W) @ od``, clamped at zero."""
    W = np.asarray(W, dtype=np.float64)
    if stain_separation_deg(W) <= MIN_SEPARATION_DEG:
        raise StainFitError(
            f"degenerate stain matrix: columns {stain_separation_deg(W):.3f} deg apart")
    c = np.asarray(od, dtype=np.float64) @ np.linalg.pinv(W).T
    return np.clip(c, 0.0, None)


def _p99(conc: np.ndarray, mask: np.ndarray) -> np.ndarray:
    c = conc.reshape(-1, conc.shape[-1])[mask.ravel()]
    if len(c) == 0:
        return np.zeros(conc.shape[-1])
    return np.percentile(c, 99, axis=0)


def ruifrok_model(img: np.ndarray) -> StainModel:
    od = rgb_to_od(img)
    conc = ruifrok_deconvolve(od)
    return StainModel(RUIFROK_HE.copy(), _p99(conc, tissue_mask(od)), "ruifrok_fixed")


def ruifrok_normalize(src: np.ndarray, ref_model: StainModel,
                      return_concentrations: bool = False):
    """Rescale fixed-vector H&E concentrations of ``src`` to the reference's.

    Only the in-model part of each pixel's optical density is rewritten; the
    residual the two fixed vectors cannot explain is carried over, so a
    self-referenced image comes back unchanged up to quantisation.  An image
    without foreground concentration is returned unchanged and a
    :class:`StainWarning` is issued.
    """
    if ref_model.method != "ruifrok_fixed":
        raise ValueError(f"Ruifrok normalization needs a ruifrok_fixed model, got {ref_model.method}")
    od = rgb_to_od(src)
    conc = ruifrok_deconvolve(od, ref_model.W)
    scale = _p99(conc, tissue_mask(od))
    if not (scale > 0).all():
        warnings.warn("source has no foreground stain concentration; left unchanged",
                      StainWarning, stacklevel=2)
        out = np.array(src, dtype=np.uint8, copy=True)
        return (out, conc) if return_concentrations else out
    W = np.asarray(ref_model.W)
    residual = od - conc @ W.T
    conc = conc * (np.asarray(ref_model.conc_scale) / scale)
    out = od_to_rgb(conc @ W.T + residual)
    return (out, conc) if return_concentrations else out


# ------------------------------------------------------------------ Vahadane

def nmf_objective(V: np.ndarray, W: np.ndarray, H: np.ndarray, lam: float) -> float:
    R = V - W @ H
    return float(np.einsum("ij,ij->", R, R) + lam * H.sum())


def _update_h(V, W, H, R, lam, sweeps=1):
    """Exact coordinate minimisation of each concentration row (lasso, H >= 0)."""
    for _ in range(sweeps):
        for k in range(W.shape[1]):
            w = W[:, k]
            nn = float(w @ w)
            old = H[k].copy()
            q = w @ R + nn * old
            H[k] = np.maximum(0.0, (q - 0.5 * lam) / nn)
            R -= np.outer(w, H[k] - old)
    return H, R


def _update_w(W, H, R):
    """Best non-negative unit-norm column given the others.

    The gradient step on one column with unbounded step size, projected onto
    the non-negative orthant and renormalised, is that column's exact
    minimiser; columns whose concentrations vanish are left in place.
    """
    for k in range(W.shape[1]):
        h = H[k]
        if not h.any():
            continue
        w_old = W[:, k].copy()
        Rk = R + np.outer(w_old, h)
        g = np.maximum(Rk @ h, 0.0)
        n = np.linalg.norm(g)
        if n == 0.0:
            continue
        W[:, k] = g / n
        R[:] = Rk - np.outer(W[:, k], h)
    return W, R


def _tissue_od_matrix(img, max_pixels, rng):
    od = rgb_to_od(img).reshape(-1, 3)
    od = od[tissue_mask(od)]
    if len(od) < 100:
        raise StainFitError(f"only {len(od)} tissue pixels (need >= 100)")
    if len(od) > max_pixels:
        od = od[np.sort(rng.choice(len(od), max_pixels, replace=False))]
    return od.T


def vahadane_fit(img: np.ndarray, lam: float = 0.1, iters: int = 200, seed: int = 0,
                 tol: float = 1e-6, max_pixels: int = 50_000) -> StainModel:
    """Fit two stain vectors to an RGB image by sparse NMF of its tissue OD.

    At most ``max_pixels`` tissue pixels (OD norm above 0.15) are used,
    drawn uniformly with ``seed``.
    """
    rng = np.random.default_rng(seed)
    V = _tissue_od_matrix(img, max_pixels, rng)
    return vahadane_fit_od(V, lam, iters, seed, tol, rng)


def _init_w(V: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Angular extremes of the data in its principal OD plane.

    Starting both columns at a fixed pair lets the first sweeps pull them
    onto the mean direction, a saddle the descent leaves only very slowly.
    """
    U, sv, _ = np.linalg.svd(V, full_matrices=False)
    U = U[:, :2]
    U = U * np.where(U.sum(axis=0) < 0, -1.0, 1.0)
    P = U.T @ V
    phi = np.arctan2(P[1], P[0])
    W = np.stack([U @ [np.cos(a), np.sin(a)] for a in np.percentile(phi, [1, 99])], axis=1)
    W = np.clip(W + rng.normal(0.0, 1e-3, W.shape), 1e-3, None)
    return W / np.linalg.norm(W, axis=0), float(sv[1] / sv[0]) if sv[0] > 0 else 0.0


def vahadane_fit_od(V: np.ndarray, lam: float = 0.1, iters: int = 200, seed: int = 0,
                    tol: float = 1e-6, rng: Optional[np.random.Generator] = None) -> StainModel:
    """Sparse NMF of a (3, N) OD matrix.

    Minimises ||V - W H||_F^2 + lam * sum(H) with W, H >= 0 and unit-norm
    columns of W, alternating exact coordinate steps on H and W.  Stops when
    the relative objective decrease drops below ``tol``; ``converged`` is
    False if that never happens within ``iters`` iterations.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    V = np.asarray(V, dtype=np.float64)
    W, rank_ratio = _init_w(V, rng)
    H = np.zeros((2, V.shape[1]))
    R = V.copy()

    history = [nmf_objective(V, W, H, lam)]
    converged = False
    it = 0
    for it in range(1, iters + 1):
        W_prev, H_prev = W.copy(), H.copy()
        H, R = _update_h(V, W, H, R, lam)
        W, R = _update_w(W, H, R)
        R = V - W @ H       # refresh to stop drift from incremental updates
        cur = float(np.einsum("ij,ij->", R, R) + lam * H.sum())
        prev = history[-1]
        if cur > prev:
            # rounding noise at the optimum; keep the previous iterate
            W, H = W_prev, H_prev
            converged = True
            break
        history.append(cur)
        if prev - cur <= tol * max(abs(prev), 1e-300):
            converged = True
            break

    # haematoxylin is the column absorbing more in the red channel
    if W[0, 0] < W[0, 1]:
        W, H = W[:, ::-1].copy(), H[::-1].copy()
    # scale on the same concentrations the transfer rescales
    scale = np.percentile(nnls_concentrations(V.T, W), 99, axis=0)
    return StainModel(W, scale, "vahadane_fit", lam, seed, converged, it, history, rank_ratio)


def nnls_concentrations(od: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Exact two-stain non-negative least squares per pixel.

    Checks the unconstrained solution and every active-set face, keeping
    the feasible candidate with the smallest residual.
    """
    shape = od.shape[:-1]
    X = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    W = np.asarray(W, dtype=np.float64)
    cands = [X @ np.linalg.pinv(W).T]
    for k in range(2):
        c = np.zeros((len(X), 2))
        c[:, k] = np.maximum(X @ W[:, k] / (W[:, k] @ W[:, k]), 0.0)
        cands.append(c)
    cands.append(np.zeros((len(X), 2)))
    best = np.zeros((len(X), 2))
    best_r = np.full(len(X), np.inf)
    for c in cands:
        ok = (c >= 0).all(axis=1)
        r = np.einsum("ij,ij->i", X - c @ W.T, X - c @ W.T)
        take = ok & (r < best_r - 1e-15)
        best[take] = c[take]
        best_r[take] = r[take]
    return best.reshape(*shape, 2)


@dataclass
class PlausibilityRule:
    teal_band: tuple[float, float] = (150.0, 210.0)
    min_saturation: float = 0.15
    od_threshold: float = TISSUE_OD


@dataclass
class PlausibilityVerdict:
    plausible: bool
    reasons: list[str] = field(default_factory=list)
    mean_hue: Optional[float] = None
    mean_saturation: Optional[float] = None


def plausibility_check(img: np.ndarray, degenerate: bool = False,
                       rule: PlausibilityRule = PlausibilityRule()) -> PlausibilityVerdict:
    """Flag teal-cast outputs (mean tissue hue in the teal band and saturated)."""
    reasons = []
    px = np.asarray(img).reshape(-1, 3)
    fg = tissue_mask(rgb_to_od(px), rule.od_threshold)
    mean_h = mean_s = None
    if fg.any():
        hsv = rgb_to_hsv(px[fg])
        ang = np.deg2rad(hsv[:, 0])
        mean_h = math.degrees(math.atan2(np.sin(ang).sum(), np.cos(ang).sum())) % 360.0
        mean_s = float(hsv[:, 1].mean())
        lo, hi = rule.teal_band
        if lo <= mean_h <= hi and mean_s > rule.min_saturation:
            reasons.append(f"teal-hue: mean hue {mean_h:.1f} deg, saturation {mean_s:.2f}")
    if degenerate:
        reasons.append("degenerate stain matrix")
    return PlausibilityVerdict(not reasons, reasons, mean_h, mean_s)


def vahadane_normalize(src: np.ndarray, ref: Optional[np.ndarray] = None, lam: float = 0.1,
                       seed: int = 0, src_model: Optional[StainModel] = None,
                       ref_model: Optional[StainModel] = None,
                       rule: PlausibilityRule = PlausibilityRule()):
    """Re-render ``src`` with the reference's stain vectors and concentration scale.

    Pre-fitted models may be passed to avoid refitting.  Concentrations for
    the transfer are the exact non-negative least-squares solution under the
    source vectors; the sparsity term only shapes the fitted vectors.
    Returns ``(image, PlausibilityVerdict)``.
    """
    if src_model is None:
        src_model = vahadane_fit(src, lam=lam, seed=seed)
    if ref_model is None:
        if ref is None:
            raise ValueError("need a reference image or a fitted reference model")
        ref_model = vahadane_fit(ref, lam=lam, seed=seed)
    conc = nnls_concentrations(rgb_to_od(src), src_model.W)
    s_src = np.asarray(src_model.conc_scale, dtype=np.float64)
    s_ref = np.asarray(ref_model.conc_scale, dtype=np.float64)
    factor = np.divide(s_ref, s_src, out=np.zeros(2), where=s_src > 0)
    out = od_to_rgb((conc * factor) @ np.asarray(ref_model.W).T)
    verdict = plausibility_check(out, src_model.degenerate or ref_model.degenerate, rule)
    return out, verdict
