"""Perturbed variants of a bundle: lossy-codec sweeps and stain color shifts.

Only the image layer is ever rewritten; instance and class maps of every
variant are the parent's arrays, untouched.  Each variant carries a lineage
entry describing exactly how it was produced.
"""
from __future__ import annotations

import hashlib
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import PIL
from PIL import Image, features

from . import stain
from .colorspace import ReferenceSet
from .core import Bundle, NucRobustError, ValidationError
from .metrics import psnr

log = logging.getLogger(__name__)

JPEG = "jpeg"
WEBP = "webp"
CODECS = (JPEG, WEBP)
RECOMMENDED_QUALITY = {JPEG: 75, WEBP: 80}


class CodecError(NucRobustError):
    pass


@dataclass(frozen=True)
class CompressionSpec:
    codec: str
    qualities: tuple[int, ...]

    def __post_init__(self):
        codec = self.codec.lower()
        if codec not in CODECS:
            raise ValidationError(f"unknown codec {self.codec!r}")
        object.__setattr__(self, "codec", codec)
        q = tuple(int(x) for x in self.qualities)
        if not q:
            raise ValidationError("compression spec needs at least one quality")
        if any(not 1 <= x <= 100 for x in q):
            raise ValidationError(f"qualities must lie in [1, 100], got {q}")
        if list(q) != sorted(set(q)):
            raise ValidationError(f"qualities must be ascending and unique, got {q}")
        object.__setattr__(self, "qualities", q)


def default_compression_specs() -> tuple[CompressionSpec, CompressionSpec]:
    grid = set(range(10, 101, 10))
    return tuple(CompressionSpec(c, tuple(sorted(grid | {RECOMMENDED_QUALITY[c]})))
                 for c in CODECS)


def codec_identity(codec: str) -> dict:
    lib = {JPEG: "jpg", WEBP: "webp"}[codec]
    return {"pillow": PIL.__version__, "library": lib, "library_version": features.version(lib)}


def encode_decode(img: np.ndarray, codec: str, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    pil = Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8))
    if pil.mode != "RGB":
        raise ValidationError(f"expected an (H, W, 3) image, got {np.shape(img)}")
    if codec == JPEG:
        pil.save(buf, "JPEG", quality=quality, subsampling="4:2:0",
                 optimize=False, progressive=False)
    elif codec == WEBP:
        pil.save(buf, "WEBP", quality=quality, lossless=False, method=4, exact=False)
    else:
        raise ValidationError(f"unknown codec {codec!r}")
    buf.seek(0)
    with Image.open(buf) as dec:
        return np.asarray(dec.convert("RGB"), dtype=np.uint8).copy()


def compress_sweep(bundle: Bundle, spec: CompressionSpec) -> list[tuple[int, Bundle, float]]:
    """Encode/decode every image at each quality; returns (quality, variant, mean PSNR)."""
    for p in bundle:
        if p.image is None:
            raise ValidationError(f"patch {p.id} has no image to compress")
    ident = codec_identity(spec.codec)
    out = []
    for q in spec.qualities:
        patches, scores = [], []
        for p in bundle:
            try:
                dec = encode_decode(p.image, spec.codec, q)
            except (OSError, ValueError) as e:
                raise CodecError(f"{spec.codec} q={q} failed on patch {p.id}: {e}") from e
            if dec.shape != p.image.shape:
                raise CodecError(f"{spec.codec} q={q} changed the shape of patch {p.id}")
            scores.append(psnr(p.image, dec))
            patches.append(p.with_image(dec))
        entry = {"type": "compress", "codec": spec.codec, "quality": q, **ident, "excluded": []}
        if spec.codec == JPEG:
            entry["subsampling"] = "4:2:0"
        variant = Bundle(patches, f"{bundle.name}/{spec.codec}-q{q:03d}",
                         list(bundle.lineage) + [entry])
        finite = [s for s in scores if np.isfinite(s)]
        mean_psnr = float(np.mean(finite)) if finite else float("inf")
        out.append((q, variant, mean_psnr))
    return out


@dataclass
class ColorShiftSpec:
    method: str                                 # "ruifrok" | "vahadane"
    references: ReferenceSet
    reference_images: dict[str, np.ndarray]
    lam: float = 0.1
    seed: int = 0
    rule: stain.PlausibilityRule = field(default_factory=stain.PlausibilityRule)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in ("ruifrok", "vahadane"):
            raise ValidationError(f"unknown color-shift method {self.method!r}")
        if not len(self.references):
            raise ValidationError("color shift needs at least one reference")
        missing = [r for r in self.references.patch_ids if r not in self.reference_images]
        if missing:
            raise ValidationError(f"unresolved reference patches: {missing}")


@dataclass
class VariantManifest:
    parent: str
    descriptor: dict
    excluded: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    warnings: list[dict] = field(default_factory=list)
    aborted: bool = False

    @property
    def excluded_ids(self) -> list[str]:
        return [e["patch_id"] for e in self.excluded]

    def lineage_entry(self) -> dict:
        return {**self.descriptor, "excluded": list(self.excluded)}


def _fit_or_error(cache, key, img, method, lam, seed):
    if key not in cache:
        try:
            if method == "vahadane":
                cache[key] = stain.vahadane_fit(img, lam=lam, seed=seed)
            else:
                cache[key] = stain.ruifrok_model(img)
        except NucRobustError as e:
            cache[key] = e
    return cache[key]


def color_shift(bundle: Bundle, spec: ColorShiftSpec,
                fit_cache: Optional[dict] = None) -> list[tuple[str, Optional[Bundle], VariantManifest]]:
    """One variant per reference, each image normalized toward that reference.

    Implausible Vahadane outputs are kept in the variant but listed in the
    manifest exclusions.  Patches whose stain fit fails keep their original
    image and are excluded as well; a variant where fewer than half of the
    patches succeed is aborted (returned with ``None`` in place of a bundle).
    ``fit_cache`` may be shared across calls to reuse per-image fits.
    """
    for p in bundle:
        if p.image is None:
            raise ValidationError(f"patch {p.id} has no image to color-shift")
    cache = {} if fit_cache is None else fit_cache
    space = spec.references.spec.space
    out = []
    for ref in spec.references.references:
        descriptor = {"type": "color_shift", "method": spec.method, "space": space,
                      "reference_id": ref.patch_id, "grid_index": ref.grid_index,
                      "seed": spec.seed}
        if spec.method == "vahadane":
            descriptor["lambda"] = spec.lam
        manifest = VariantManifest(bundle.name, descriptor)
        ref_img = spec.reference_images[ref.patch_id]
        ref_model = _fit_or_error(cache, ("ref", spec.method, ref.patch_id, spec.lam, spec.seed,
                                           _digest(ref_img)),
                                  ref_img, spec.method, spec.lam, spec.seed)

        patches = []
        for p in bundle:
            if isinstance(ref_model, Exception):
                manifest.failures.append({"patch_id": p.id, "reason": f"reference fit: {ref_model}"})
                patches.append(p)
                continue
            try:
                if spec.method == "ruifrok":
                    with warnings.catch_warnings(record=True) as caught:
                        warnings.simplefilter("always", stain.StainWarning)
                        img = stain.ruifrok_normalize(p.image, ref_model)
                    for w in caught:
                        manifest.warnings.append({"patch_id": p.id, "reason": str(w.message)})
                else:
                    src_model = _fit_or_error(cache, ("src", p.id, spec.lam, spec.seed,
                                                      _digest(p.image)),
                                              p.image, "vahadane", spec.lam, spec.seed)
                    if isinstance(src_model, Exception):
                        raise src_model
                    img, verdict = stain.vahadane_normalize(
                        p.image, src_model=src_model, ref_model=ref_model, rule=spec.rule)
                    if not verdict.plausible:
                        manifest.excluded.append({"patch_id": p.id,
                                                  "reason": "; ".join(verdict.reasons)})
            except NucRobustError as e:
                manifest.failures.append({"patch_id": p.id, "reason": str(e)})
                patches.append(p)
                continue
            patches.append(p.with_image(img))

        for f in manifest.failures:
            if f["patch_id"] not in manifest.excluded_ids:
                manifest.excluded.append({"patch_id": f["patch_id"],
                                          "reason": f"stain fit failed: {f['reason']}"})
        ok = len(bundle) - len(manifest.failures)
        if len(bundle) and ok * 2 < len(bundle):
            manifest.aborted = True
            log.warning("color shift toward %s aborted: %d/%d patches failed",
                        ref.patch_id, len(manifest.failures), len(bundle))
            out.append((ref.patch_id, None, manifest))
            continue
        name = f"{bundle.name}/{spec.method}-{space}-ref-{ref.patch_id}"
        variant = Bundle(patches, name, list(bundle.lineage) + [manifest.lineage_entry()])
        out.append((ref.patch_id, variant, manifest))
    return out


def _digest(img: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest()
