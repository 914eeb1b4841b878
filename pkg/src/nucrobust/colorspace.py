"""Color conversions, per-patch mean color, 2-D KDE maps and reference sampling.

Two planes are supported: hue/saturation of HSV (value fixed) and a*/b* of
CIELAB (lightness fixed).  Conversions are vectorised over trailing
3-channel axes and accept 8-bit or float input in the 0..255 scale.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .core import Bundle, ValidationError

HSV = "hsv"
LAB = "lab"
SPACES = (HSV, LAB)

_SRGB_TO_XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                         [0.2126729, 0.7151522, 0.0721750],
                         [0.0193339, 0.1191920, 0.9503041]])
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)
# D65 white as the image of linear RGB (1, 1, 1), so white maps to exactly (100, 0, 0)
_WHITE = _SRGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0

# natural span of the fixed third channel, used to normalise its distance term
_W_SPAN = {HSV: 1.0, LAB: 100.0}


def _check_space(space: str) -> str:
    s = space.lower()
    if s in ("cielab", "lab"):
        return LAB
    if s == HSV:
        return HSV
    raise ValidationError(f"unknown color space {space!r}; expected 'hsv' or 'lab'")


def rgb_to_hsv(rgb) -> np.ndarray:
    """Hexcone HSV with H in degrees [0, 360) and S, V in [0, 1]."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    mx = c.max(axis=-1)
    mn = c.min(axis=-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h * 60.0, 0.0) % 360.0
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`; returns floats on the 0..255 scale."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 360.0, hsv[..., 1], hsv[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    choices = [np.stack(t, axis=-1) for t in
               [(c, x, z), (x, c, z), (z, c, x), (z, x, c), (x, z, c), (c, z, x)]]
    out = np.select([sector[..., None] == k for k in range(6)], choices)
    return (out + (v - c)[..., None]) * 255.0


def _srgb_decode(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb) -> np.ndarray:
    """sRGB (D65, 2 degree observer) to CIELAB."""
    lin = _srgb_decode(np.asarray(rgb, dtype=np.float64) / 255.0)
    xyz = lin @ _SRGB_TO_XYZ.T / _WHITE
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut values are clipped to 0..255."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * _WHITE
    rgb = _srgb_encode(xyz @ _XYZ_TO_SRGB.T)
    return np.clip(rgb, 0.0, 1.0) * 255.0


def convert(rgb, space: str) -> np.ndarray:
    return rgb_to_hsv(rgb) if _check_space(space) == HSV else rgb_to_lab(rgb)


def to_rgb(coords, space: str) -> np.ndarray:
    return hsv_to_rgb(coords) if _check_space(space) == HSV else lab_to_rgb(coords)


@dataclass(frozen=True)
class ColorPoint:
    space: str
    u: float
    v: float
    w: float


@dataclass(frozen=True)
class PlaneSpec:
    space: str
    u_range: tuple[float, float]
    v_range: tuple[float, float]
    steps: int = 16

    def __post_init__(self):
        object.__setattr__(self, "space", _check_space(self.space))
        for lo, hi in (self.u_range, self.v_range):
            if not hi > lo:
                raise ValidationError(f"degenerate plane range [{lo}, {hi}]")
        if self.steps < 2:
            raise ValidationError("plane needs at least 2 steps per axis")

    @classmethod
    def default(cls, space: str, steps: int = 16) -> "PlaneSpec":
        if _check_space(space) == HSV:
            return cls(HSV, (240.0, 360.0), (0.0, 1.0), steps)
        return cls(LAB, (0.0, 50.0), (-40.0, 10.0), steps)

    @property
    def u_label(self):
        return "H (deg)" if self.space == HSV else "a*"

    @property
    def v_label(self):
        return "S" if self.space == HSV else "b*"

    def grid_axes(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.linspace(*self.u_range, self.steps), np.linspace(*self.v_range, self.steps))

    def unwrap_u(self, u):
        """Place hues on the 360-degree branch closest to the window centre."""
        u = np.asarray(u, dtype=np.float64)
        if self.space != HSV:
            return u
        centre = 0.5 * (self.u_range[0] + self.u_range[1])
        return (u - centre + 180.0) % 360.0 + centre - 180.0


def mean_color(img: np.ndarray, space: str) -> ColorPoint:
    """Channel-wise mean of a patch in ``space``; hue is averaged circularly."""
    space = _check_space(space)
    px = np.asarray(img).reshape(-1, 3)
    if px.shape[0] == 0:
        raise ValidationError("mean_color of an empty image")
    c = convert(px, space)
    if space == HSV:
        ang = np.deg2rad(c[:, 0])
        sx, sy = np.cos(ang).sum(), np.sin(ang).sum()
        h = 0.0
        if math.hypot(sx, sy) > 1e-9 * len(ang):
            h = math.degrees(math.atan2(sy, sx)) % 360.0
        return ColorPoint(HSV, h, float(c[:, 1].mean()), float(c[:, 2].mean()))
    return ColorPoint(LAB, float(c[:, 1].mean()), float(c[:, 2].mean()), float(c[:, 0].mean()))


def dataset_color_stats(bundle: Bundle, space: str) -> tuple[float, list[tuple[str, ColorPoint]]]:
    """Per-patch mean colors and the mean of their fixed third channel."""
    if not len(bundle):
        raise ValidationError("dataset_color_stats on an empty bundle")
    pts = []
    for p in bundle:
        if p.image is None:
            raise ValidationError(f"patch {p.id} has no image layer")
        pts.append((p.id, mean_color(p.image, space)))
    return math.fsum(c.w for _, c in pts) / len(pts), pts


@dataclass
class DensityGrid:
    spec: PlaneSpec
    u_edges: np.ndarray
    v_edges: np.ndarray
    density: np.ndarray         # shape (len(v_edges) - 1, len(u_edges) - 1)
    bandwidth: tuple[float, float]

    @property
    def u_centers(self):
        return 0.5 * (self.u_edges[1:] + self.u_edges[:-1])

    @property
    def v_centers(self):
        return 0.5 * (self.v_edges[1:] + self.v_edges[:-1])

    @property
    def cell_area(self) -> float:
        return float((self.u_edges[1] - self.u_edges[0]) * (self.v_edges[1] - self.v_edges[0]))

    def mass(self) -> float:
        return float(self.density.sum() * self.cell_area)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["u", "v", "density"])
        for j, v in enumerate(self.v_centers):
            for i, u in enumerate(self.u_centers):
                wr.writerow([f"{u:.6f}", f"{v:.6f}", f"{self.density[j, i]:.6e}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"space": self.spec.space, "u_range": list(self.spec.u_range),
                "v_range": list(self.spec.v_range), "bins": [len(self.u_edges) - 1,
                                                             len(self.v_edges) - 1],
                "bandwidth": list(self.bandwidth), "density": self.density.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DensityGrid":
        spec = PlaneSpec(d["space"], tuple(d["u_range"]), tuple(d["v_range"]))
        bu, bv = d["bins"]
        return cls(spec, np.linspace(*spec.u_range, bu + 1), np.linspace(*spec.v_range, bv + 1),
                   np.asarray(d["density"], dtype=np.float64), tuple(d["bandwidth"]))


def scott_bandwidth(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) * len(x) ** (-1.0 / 6.0))


def kde_grid(points: Sequence[ColorPoint], spec: PlaneSpec, bins: int = 64,
             bandwidth: Optional[float | tuple[float, float]] = None) -> DensityGrid:
    """Gaussian product-kernel density of plane coordinates over the spec window.

    Each cell holds the kernel mass falling inside it divided by the cell
    area, so summing density x area gives exactly the mixture mass inside
    the window.  Points outside the window still contribute their tails.
    With ``bandwidth=None`` Scott's rule is used per axis; an axis with zero
    spread falls back to one cell width.
    """
    if len(points) < 2:
        raise ValidationError("kde_grid needs at least 2 points")
    if any(_check_space(p.space) != spec.space for p in points):
        raise ValidationError("points and plane spec use different color spaces")
    u = spec.unwrap_u([p.u for p in points])
    v = np.array([p.v for p in points], dtype=np.float64)
    u_edges = np.linspace(*spec.u_range, bins + 1)
    v_edges = np.linspace(*spec.v_range, bins + 1)

    if bandwidth is None:
        bu, bv = scott_bandwidth(u), scott_bandwidth(v)
        bu = bu if bu > 0 else u_edges[1] - u_edges[0]
        bv = bv if bv > 0 else v_edges[1] - v_edges[0]
    elif np.isscalar(bandwidth):
        bu = bv = float(bandwidth)
    else:
        bu, bv = map(float, bandwidth)
    if not (bu > 0 and bv > 0):
        raise ValidationError(f"bandwidth must be positive, got {(bu, bv)}")

    pu = np.diff(ndtr((u_edges[None, :] - u[:, None]) / bu), axis=1)
    pv = np.diff(ndtr((v_edges[None, :] - v[:, None]) / bv), axis=1)
    area = (u_edges[1] - u_edges[0]) * (v_edges[1] - v_edges[0])
    density = (pv.T @ pu) / (len(points) * area)
    return DensityGrid(spec, u_edges, v_edges, np.clip(density, 0.0, None), (float(bu), float(bv)))


@dataclass(frozen=True)
class Reference:
    grid_index: int
    grid_u: float
    grid_v: float
    patch_id: str
    distance: float


@dataclass
class ReferenceSet:
    spec: PlaneSpec
    w: float
    references: list[Reference] = field(default_factory=list)
    source: Optional[str] = None

    def __len__(self):
        return len(self.references)

    @property
    def patch_ids(self) -> list[str]:
        return [r.patch_id for r in self.references]

    def to_dict(self) -> dict:
        d = {
            "space": self.spec.space,
            "u_range": list(self.spec.u_range),
            "v_range": list(self.spec.v_range),
            "steps": self.spec.steps,
            "w": self.w,
            "references": [
                {"grid_index": r.grid_index, "grid_u": r.grid_u, "grid_v": r.grid_v,
                 "w": self.w, "patch_id": r.patch_id, "distance": r.distance}
                for r in self.references
            ],
        }
        if self.source is not None:
            d["source"] = self.source
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "ReferenceSet":
        spec = PlaneSpec(d["space"], tuple(d["u_range"]), tuple(d["v_range"]), d["steps"])
        refs = [Reference(r["grid_index"], r["grid_u"], r["grid_v"], r["patch_id"], r["distance"])
                for r in d["references"]]
        return cls(spec, d["w"], refs, d.get("source"))


def normalized_distances(spec: PlaneSpec, w_fixed: float, pts: Sequence[ColorPoint]) -> np.ndarray:
    """Distances (grid points x patches) with every axis scaled to unit span.

    Hue differences are taken around the circle before scaling.
    """
    gu, gv = spec.grid_axes()
    GU, GV = np.meshgrid(gu, gv)           # row j = v index, col i = u index
    GU, GV = GU.ravel(), GV.ravel()
    u = np.array([p.u for p in pts])
    v = np.array([p.v for p in pts])
    w = np.array([p.w for p in pts])
    du = GU[:, None] - u[None, :]
    if spec.space == HSV:
        du = (du + 180.0) % 360.0 - 180.0
    du /= spec.u_range[1] - spec.u_range[0]
    dv = (GV[:, None] - v[None, :]) / (spec.v_range[1] - spec.v_range[0])
    dw = (w_fixed - w)[None, :] / _W_SPAN[spec.space]
    return np.sqrt(du ** 2 + dv ** 2 + dw ** 2)


def sample_references(points: Sequence[tuple[str, ColorPoint]], spec: PlaneSpec,
                      w_fixed: float) -> ReferenceSet:
    """Pick the closest patch to every grid color, keeping each patch once.

    Grid points are ``spec.steps`` x ``spec.steps`` colors spanning the
    plane window at third channel ``w_fixed``; index = v_step * steps +
    u_step.  A patch nearest to several grid points is kept only for the one
    at smallest distance.  Ties go to the earlier patch / lower grid index.
    """
    if not points:
        raise ValidationError("sample_references on an empty dataset")
    ids = [pid for pid, _ in points]
    pts = [c for _, c in points]
    if any(_check_space(c.space) != spec.space for c in pts):
        raise ValidationError("points and plane spec use different color spaces")
    d = normalized_distances(spec, w_fixed, pts)
    nearest = np.argmin(d, axis=1)
    best: dict[int, int] = {}
    for g, k in enumerate(nearest.tolist()):
        if k not in best or d[g, k] < d[best[k], k]:
            best[k] = g
    gu, gv = spec.grid_axes()
    refs = []
    for k, g in sorted(best.items(), key=lambda kv: kv[1]):
        j, i = divmod(g, spec.steps)
        refs.append(Reference(g, float(gu[i]), float(gv[j]), ids[k], float(d[g, k])))
    return ReferenceSet(spec, float(w_fixed), refs)
