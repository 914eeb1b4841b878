"""Bundle directories on disk.

Layout: ``manifest.json`` plus ``img_{id}.png`` (8-bit RGB, optional),
``inst_{id}.png`` (16-bit grey) and ``cls_{id}.png`` (8-bit grey) for each
patch listed in the manifest.
"""
from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from ..core import Bundle, BundleIOError, LabelledPatch, ValidationError, validate_patch

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PNG_COMPRESS_LEVEL = 6
_SAFE_ID = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def dump_json(obj, path: Path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _check_id(pid: str) -> None:
    if not isinstance(pid, str) or not _SAFE_ID.match(pid):
        raise ValidationError(f"patch id {pid!r} is not usable as a file name")


def _write_png(arr: np.ndarray, mode: str, path: Path) -> None:
    im = Image.fromarray(arr)
    if im.mode != mode:
        raise ValidationError(f"{path.name}: expected PNG mode {mode}, got {im.mode}")
    im.save(path, format="PNG", compress_level=PNG_COMPRESS_LEVEL,
                                    optimize=False)


def save_bundle(bundle: Bundle, path) -> Path:
    """Write ``bundle`` as a directory; identical bundles give identical bytes."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for pid in bundle.ids:
            _check_id(pid)
        for p in sorted(bundle, key=lambda p: p.id):
            inst = np.asarray(p.instances)
            cls = np.asarray(p.classes)
            if inst.size and (inst.min() < 0 or inst.max() > 65535):
                raise ValidationError(f"patch {p.id}: instance labels do not fit 16 bits")
            if cls.size and (cls.min() < 0 or cls.max() > 255):
                raise ValidationError(f"patch {p.id}: class ids do not fit 8 bits")
            if p.image is not None:
                _write_png(np.ascontiguousarray(p.image, dtype=np.uint8), "RGB",
                           root / f"img_{p.id}.png")
            _write_png(np.ascontiguousarray(inst, dtype=np.uint16), "I;16", root / f"inst_{p.id}.png")
            _write_png(np.ascontiguousarray(cls, dtype=np.uint8), "L", root / f"cls_{p.id}.png")
        dump_json({"format_version": FORMAT_VERSION, "name": bundle.name,
                   "lineage": list(bundle.lineage), "patches": bundle.ids}, root / MANIFEST)
    except OSError as e:
        raise BundleIOError(f"cannot write bundle to {root}: {e}") from e
    return root


def _read_png(path: Path, pid: str, what: str) -> np.ndarray:
    if not path.is_file():
        raise BundleIOError(f"patch {pid}: missing {what} file {path.name}")
    try:
        with Image.open(path) as im:
            if what == "image":
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
            arr = np.asarray(im)
    except OSError as e:
        raise BundleIOError(f"patch {pid}: unreadable {what} file {path.name}: {e}") from e
    if arr.ndim != 2:
        raise BundleIOError(f"patch {pid}: {what} file {path.name} is not single-channel")
    return arr.astype(np.int32)


def read_manifest(path) -> dict:
    root = Path(path)
    mf = root / MANIFEST
    if not mf.is_file():
        raise BundleIOError(f"{root} has no {MANIFEST}")
    try:
        with open(mf, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise BundleIOError(f"malformed manifest {mf}: {e}") from e
    if not isinstance(data, dict) or data.get("format_version") != FORMAT_VERSION:
        raise BundleIOError(f"{mf}: unsupported or missing format_version")
    patches = data.get("patches")
    if not isinstance(patches, list) or not all(isinstance(p, str) for p in patches):
        raise BundleIOError(f"{mf}: 'patches' must be a list of ids")
    lineage = data.get("lineage", [])
    if not isinstance(lineage, list):
        raise BundleIOError(f"{mf}: 'lineage' must be a list")
    return data


def load_bundle(path, validate: bool = True) -> Bundle:
    """Read a bundle directory; with ``validate`` the first invalid patch raises."""
    root = Path(path)
    data = read_manifest(root)
    patches = []
    for pid in data["patches"]:
        _check_id(pid)
        img_path = root / f"img_{pid}.png"
        img = _read_png(img_path, pid, "image") if img_path.is_file() else None
        inst = _read_png(root / f"inst_{pid}.png", pid, "instance")
        cls = _read_png(root / f"cls_{pid}.png", pid, "class")
        patch = LabelledPatch(pid, img, inst, cls)
        if validate:
            report = validate_patch(patch)
            if not report.ok:
                raise ValidationError(str(report))
        patches.append(patch)
    return Bundle(patches, str(data.get("name", root.name)), list(data.get("lineage", [])))


def tree_digest(path) -> dict[str, bytes]:
    """Relative path -> file bytes, for comparing output directories."""
    root = Path(path)
    out = {}
    for dirpath, _, files in os.walk(root):
        for fn in files:
            p = Path(dirpath) / fn
            out[str(p.relative_to(root))] = p.read_bytes()
    return dict(sorted(out.items()))
