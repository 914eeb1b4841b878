"""Classical demo segmenter: fixed-vector haematoxylin threshold + components."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import Bundle, LabelledPatch, ValidationError
from ..stain import rgb_to_od, ruifrok_deconvolve

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SegmentParams:
    threshold: float = 0.45     # haematoxylin concentration, OD units
    min_area: int = 12          # pixels
    fill_holes: bool = True

    def __post_init__(self):
        if self.min_area < 0:
            raise ValidationError("min_area must be non-negative")


def baseline_segment(img: np.ndarray, params: SegmentParams = SegmentParams()):
    """Return (instance map, class map); every instance gets class 1."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got {img.shape}")
    h_conc = ruifrok_deconvolve(rgb_to_od(img))[..., 0]
    fg = h_conc > params.threshold
    if params.fill_holes:
        fg = ndimage.binary_fill_holes(fg)
    lab, n = ndimage.label(fg, structure=_EIGHT)
    inst = np.zeros(lab.shape, np.int32)
    if n:
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        keep = np.flatnonzero(sizes >= params.min_area)
        keep = keep[keep > 0]
        remap = np.zeros(n + 1, np.int32)
        remap[keep] = np.arange(1, len(keep) + 1, dtype=np.int32)
        inst = remap[lab]
    cls = (inst > 0).astype(np.int32)
    return inst, cls


def segment_bundle(bundle: Bundle, params: SegmentParams = SegmentParams(),
                   name: str | None = None) -> Bundle:
    """Prediction-only bundle (no image layer) from the baseline segmenter."""
    patches = []
    for p in bundle:
        if p.image is None:
            raise ValidationError(f"patch {p.id} has no image to segment")
        inst, cls = baseline_segment(p.image, params)
        patches.append(LabelledPatch(p.id, None, inst, cls))
    entry = {"type": "baseline_segment", "threshold": params.threshold,
             "min_area": params.min_area, "fill_holes": params.fill_holes}
    return Bundle(patches, name or f"{bundle.name}/baseline", list(bundle.lineage) + [entry])
