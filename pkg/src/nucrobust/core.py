"""Patch and bundle data model shared by every other module.

Images are ``(H, W, 3)`` uint8 arrays, instance maps are ``(H, W)`` integer
arrays with 0 as background, class maps are ``(H, W)`` integer arrays holding
the nucleus category 1..6 (0 = background).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

NUM_CLASSES = 6
CLASS_NAMES = {
    1: "epithelial",
    2: "lymphocyte",
    3: "plasma",
    4: "neutrophil",
    5: "eosinophil",
    6: "connective",
}


class NucRobustError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(NucRobustError):
    pass


class BundleIOError(NucRobustError):
    pass


class NumericalError(NucRobustError):
    pass


@dataclass
class LabelledPatch:
    id: str
    image: Optional[np.ndarray]
    instances: np.ndarray
    classes: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.instances.shape[:2])

    def with_image(self, image: np.ndarray) -> "LabelledPatch":
        return LabelledPatch(self.id, image, self.instances, self.classes)


@dataclass
class Bundle:
    patches: list[LabelledPatch]
    name: str = "bundle"
    lineage: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.id for p in self.patches]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate patch ids in bundle {self.name!r}: {dupes}")

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patches]

    def get(self, patch_id: str) -> LabelledPatch:
        for p in self.patches:
            if p.id == patch_id:
                return p
        raise KeyError(patch_id)

    def subset(self, keep_ids) -> "Bundle":
        keep = set(keep_ids)
        return Bundle([p for p in self.patches if p.id in keep], self.name, list(self.lineage))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    instance: Optional[int] = None


@dataclass
class ValidationReport:
    patch_id: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        # truthy when there is something to report
        return bool(self.violations)

    def __str__(self):
        if self.ok:
            return f"{self.patch_id}: ok"
        return "\n".join(f"{self.patch_id}: [{v.kind}] {v.message}" for v in self.violations)


def validate_patch(patch: LabelledPatch) -> ValidationReport:
    """Check a patch against the layer invariants.

    Problems are collected, never raised: dimension mismatches, image
    layout/dtype issues, negative labels, class ids outside 0..6, labelled
    pixels with background class, and instances spanning several classes.
    """
    report = ValidationReport(patch.id)
    add = report.violations.append
    inst, cls = np.asarray(patch.instances), np.asarray(patch.classes)

    if inst.ndim != 2 or cls.ndim != 2:
        add(Violation("shape", f"label layers must be 2-D, got {inst.shape} and {cls.shape}"))
        return report
    if inst.shape != cls.shape:
        add(Violation("dimension-mismatch", f"instance map {inst.shape} vs class map {cls.shape}"))
        return report
    if inst.size == 0:
        add(Violation("shape", "empty label layers"))
        return report
    if patch.image is not None:
        img = np.asarray(patch.image)
        if img.ndim != 3 or img.shape[2] != 3:
            add(Violation("shape", f"image must be (H, W, 3), got {img.shape}"))
        elif img.shape[:2] != inst.shape:
            add(Violation("dimension-mismatch", f"image {img.shape[:2]} vs labels {inst.shape}"))
        if img.dtype != np.uint8:
            add(Violation("dtype", f"image dtype must be uint8, got {img.dtype}"))

    if not np.issubdtype(inst.dtype, np.integer) or not np.issubdtype(cls.dtype, np.integer):
        add(Violation("dtype", "label layers must be integer arrays"))
        return report
    if inst.min() < 0:
        add(Violation("negative-label", "instance labels must be non-negative"))
    bad_cls = (cls < 0) | (cls > NUM_CLASSES)
    if bad_cls.any():
        add(Violation("class-range", f"{int(bad_cls.sum())} pixels with class outside 0..{NUM_CLASSES}"))

    fg = inst > 0
    for label in np.unique(inst[fg & (cls == 0)]):
        add(Violation("unlabelled-class", f"instance {int(label)} has pixels with class 0", int(label)))

    pairs = np.unique(np.stack([inst[fg], cls[fg]], axis=1), axis=0)
    labels, counts = np.unique(pairs[:, 0], return_counts=True)
    for label in labels[counts > 1]:
        spanned = sorted(int(c) for c in pairs[pairs[:, 0] == label, 1] if c != 0)
        if len(spanned) > 1:
            add(Violation("mixed-class-instance",
                          f"instance {int(label)} spans classes {spanned}", int(label)))
    return report


def relabel_consecutive(m: np.ndarray) -> np.ndarray:
    """Relabel instances to 1..K in order of first appearance (row-major)."""
    m = np.asarray(m)
    flat = m.ravel()
    labels, first = np.unique(flat, return_index=True)
    nz = labels != 0
    labels, first = labels[nz], first[nz]
    order = labels[np.argsort(first, kind="stable")]
    lut_keys = order
    lut_vals = np.arange(1, len(order) + 1, dtype=np.int64)
    out = np.zeros(flat.shape, dtype=np.int64)
    if len(order):
        sorter = np.argsort(lut_keys)
        fg = flat != 0
        idx = np.searchsorted(lut_keys, flat[fg], sorter=sorter)
        out[fg] = lut_vals[sorter[idx]]
    return out.reshape(m.shape).astype(m.dtype if m.dtype.kind in "iu" else np.int64)


def instance_inventory(m: np.ndarray, c: np.ndarray) -> list[tuple[int, int, int]]:
    """List ``(instance id, class, pixel count)`` for every nonzero label."""
    m, c = np.asarray(m), np.asarray(c)
    if m.shape != c.shape:
        raise ValidationError(f"instance map {m.shape} vs class map {c.shape}")
    fg = m > 0
    if not fg.any():
        return []
    pairs, counts = np.unique(np.stack([m[fg], c[fg]], axis=1), axis=0, return_counts=True)
    out = []
    i = 0
    while i < len(pairs):
        label = int(pairs[i, 0])
        j = i
        while j < len(pairs) and pairs[j, 0] == label:
            j += 1
        classes = pairs[i:j, 1]
        if j - i > 1:
            raise ValidationError(
                f"instance {label} spans classes {sorted(int(x) for x in classes)}")
        if classes[0] == 0:
            raise ValidationError(f"instance {label} has background class")
        out.append((label, int(classes[0]), int(counts[i:j].sum())))
        i = j
    return out


def instance_classes(m: np.ndarray, c: np.ndarray) -> dict[int, int]:
    """Map instance id -> class for a valid patch."""
    return {label: cls for label, cls, _ in instance_inventory(m, c)}
