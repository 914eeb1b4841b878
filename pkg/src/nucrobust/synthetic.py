"""Seeded synthetic H&E-like patches with exact instance/class labels.

Images are composed in optical-density space from two stain vectors, so they
obey the Beer-Lambert mixing model that the stain routines assume.  Stain
vectors and concentrations are jittered per patch to spread the bundle over
a region of color space.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import Bundle, LabelledPatch

# typical fitted H&E optical-density directions (haematoxylin, eosin)
HE_VECTORS = np.array([[0.5626, 0.7201, 0.4062],
                       [0.2159, 0.8012, 0.5581]]).T
HE_VECTORS = HE_VECTORS / np.linalg.norm(HE_VECTORS, axis=0)

# nucleus classes drawn for the fixtures, with (radius range, elongation range)
_SHAPES = {
    1: ((6.0, 9.0), (1.0, 1.6)),    # epithelial: large, slightly oval
    2: ((3.0, 4.5), (1.0, 1.15)),   # lymphocyte: small, round
    6: ((3.0, 4.0), (2.2, 3.2)),    # connective: thin, elongated
}
_CLASS_P = (0.55, 0.3, 0.15)
PSF_SIGMA = 0.8
E_LEVEL = (0.15, 0.35)


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _jitter_vector(rng, v, angle_deg):
    v = v + rng.normal(0.0, np.deg2rad(angle_deg), 3)
    v = np.clip(v, 0.01, None)
    return v / np.linalg.norm(v)


def make_he_patch(rng: np.random.Generator, size: int = 128, pid: str = "p0",
                  stain_jitter_deg: float = 0.0, density: float = 1.0,
                  W: np.ndarray | None = None) -> LabelledPatch:
    """One synthetic patch: stroma texture, optional lumen, non-overlapping nuclei."""
    h = w = size
    inst = np.zeros((h, w), np.int32)
    cls = np.zeros((h, w), np.int32)
    yy, xx = np.mgrid[0:h, 0:w]

    n_target = int(rng.integers(8, 16) * density * (size / 128) ** 2)
    label = 0
    for _ in range(n_target * 6):
        if label >= n_target:
            break
        c = int(rng.choice(list(_SHAPES), p=_CLASS_P))
        (r_lo, r_hi), (e_lo, e_hi) = _SHAPES[c]
        r = rng.uniform(r_lo, r_hi)
        ratio = rng.uniform(e_lo, e_hi)
        a, b = r * np.sqrt(ratio), r / np.sqrt(ratio)
        cy, cx = rng.uniform(a + 1, h - a - 1), rng.uniform(a + 1, w - a - 1)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        blob = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        grown = ndimage.binary_dilation(blob, iterations=2)
        if blob.sum() < 12 or (inst[grown] > 0).any():
            continue
        label += 1
        inst[blob] = label
        cls[blob] = c

    if W is None:
        W = HE_VECTORS
    if stain_jitter_deg > 0:
        W = np.stack([_jitter_vector(rng, W[:, k], stain_jitter_deg) for k in range(2)], axis=1)

    e_level = rng.uniform(E_LEVEL[0], E_LEVEL[1])
    e_conc = e_level * (1.0 + 0.35 * _smooth_noise(rng, (h, w), 6.0))
    h_conc = 0.06 + 0.03 * _smooth_noise(rng, (h, w), 4.0)
    if rng.random() < 0.5:
        lumen = _smooth_noise(rng, (h, w), 14.0) > 1.2
        lumen &= ~ndimage.binary_dilation(inst > 0, iterations=3)
        e_conc[lumen] *= 0.08
        h_conc[lumen] *= 0.08
    h_level = rng.uniform(0.7, 1.1)
    nuc = inst > 0
    chrom = h_level * (1.0 + 0.2 * _smooth_noise(rng, (h, w), 1.2))
    h_conc = np.where(nuc, chrom, h_conc)
    e_conc = np.where(nuc, 0.5 * e_conc, e_conc)
    conc = np.clip(np.stack([h_conc, e_conc], axis=-1), 0.0, None)

    od = conc @ W.T
    od = od + rng.normal(0.0, 0.006, od.shape)
    # optical point spread; also keeps chroma band-limited like a real scan
    od = ndimage.gaussian_filter(od, (PSF_SIGMA, PSF_SIGMA, 0))
    img = np.clip(np.rint(255.0 * 10.0 ** (-np.clip(od, 0, None))), 0, 255).astype(np.uint8)
    return LabelledPatch(pid, img, inst, cls)


def make_he_bundle(n: int = 20, size: int = 128, seed: int = 0, stain_jitter_deg: float = 8.0,
                   name: str = "synthetic-he") -> Bundle:
    rng = np.random.default_rng(seed)
    patches = [make_he_patch(rng, size, f"{i:03d}", stain_jitter_deg) for i in range(n)]
    return Bundle(patches, name, [{"type": "synthetic", "seed": seed, "size": size}])


def make_teal_patch(rng: np.random.Generator, size: int = 128, pid: str = "teal",
                    amount: float = 0.35) -> LabelledPatch:
    """Near-monochrome teal tissue: one absorbing direction, strongest in red.

    Used as an adversarial stain-normalization reference: its OD matrix is
    close to rank one, so any two-stain fit degenerates.
    """
    d = np.array([0.80, 0.45, 0.40])
    d = d / np.linalg.norm(d)
    amount = amount * (1.0 + 0.3 * _smooth_noise(rng, (size, size), 5.0))
    od = np.clip(amount, 0.05, None)[..., None] * d + rng.normal(0.0, 0.004, (size, size, 3))
    img = np.clip(np.rint(255.0 * 10.0 ** (-np.clip(od, 0, None))), 0, 255).astype(np.uint8)
    zeros = np.zeros((size, size), np.int32)
    return LabelledPatch(pid, img, zeros, zeros.copy())


def make_training_bundle(n: int = 20, size: int = 128, seed: int = 100,
                         with_teal: bool = True, name: str = "synthetic-train") -> Bundle:
    """Reference pool: jittered H&E patches plus (optionally) one teal adversary."""
    rng = np.random.default_rng(seed)
    patches = [make_he_patch(rng, size, f"t{i:03d}", stain_jitter_deg=14.0) for i in range(n)]
    if with_teal:
        patches.append(make_teal_patch(rng, size, "teal"))
    return Bundle(patches, name, [{"type": "synthetic", "seed": seed, "size": size,
                                   "teal": with_teal}])
