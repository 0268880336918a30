"""Image decoding, dataset manifests and the synthetic grating benchmark."""
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .core import resize_bilinear
from .rng import SplitMix64

LUMA = np.array([0.299, 0.587, 0.114])
MANIFEST_FIELDS = ("id", "view", "path", "label", "stratum")


class DataError(ValueError):
    """Unreadable image or invalid manifest."""


def read_image(path, grayscale=True):
    """Decode an 8-bit gray/RGB PNG or PGM to a float32 ``[C, H, W]`` array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "LA", "RGB", "RGBA"):
                raise DataError(f"{path}: unsupported pixel format {mode!r} (need 8-bit gray or RGB)")
            arr = np.asarray(im, dtype=np.float64)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None
    if mode in ("L", "LA"):
        gray = arr if arr.ndim == 2 else arr[..., 0]
        out = gray[None]
    elif grayscale:
        out = (arr[..., :3] @ LUMA)[None]
    else:
        out = np.moveaxis(arr[..., :3], -1, 0)
    return (out / 255.0).astype(np.float32)


def write_image(values, path):
    """Write a 2-D array in [0, 1] as 8-bit grayscale (PGM for ``.pgm``, else by extension)."""
    arr = np.clip(np.round(255.0 * np.asarray(values, dtype=np.float64)), 0, 255).astype(np.uint8)
    path = str(path)
    fmt = "PPM" if path.lower().endswith((".pgm", ".pnm")) else None
    Image.fromarray(arr, mode="L").save(path, format=fmt)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    view: str
    path: str
    label: int = None
    stratum: str = ""


@dataclass
class DatasetManifest:
    root: str
    entries: list = field(default_factory=list)
    grayscale: bool = True

    def resolve(self, entry):
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)

    def validate(self, check_files=True):
        seen = set()
        for e in self.entries:
            key = (e.id, e.view)
            if key in seen:
                raise DataError(f"duplicate manifest entry id={e.id!r} view={e.view!r}")
            seen.add(key)
            if check_files and not os.path.exists(self.resolve(e)):
                raise DataError(f"manifest entry {e.id!r}: file not found: {self.resolve(e)}")
        return self

    @property
    def labeled(self):
        return all(e.label is not None for e in self.entries)

    def subset(self, keep):
        return DatasetManifest(self.root, [e for e in self.entries if keep(e)], self.grayscale)


def _parse_label(text, row_number):
    text = (text or "").strip()
    if text == "":
        return None
    if text in ("0", "nominal"):
        return 0
    if text in ("1", "anomaly", "anomalous"):
        return 1
    raise DataError(f"manifest row {row_number}: label must be 0/1 or empty, got {text!r}")


def load_manifest(path, grayscale=True, check_files=True):
    """Read a ``id,view,path,label,stratum`` CSV; relative paths resolve against its directory."""
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [f for f in ("id", "path") if f not in (reader.fieldnames or [])]
            if missing:
                raise DataError(f"{path}: manifest header lacks {missing}")
            entries = [
                ManifestEntry(row["id"], row.get("view") or "", row["path"],
                              _parse_label(row.get("label"), i), row.get("stratum") or "")
                for i, row in enumerate(reader, start=2)
            ]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    return DatasetManifest(root, entries, grayscale).validate(check_files)


def save_manifest(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            writer.writerow([e.id, e.view, e.path, "" if e.label is None else e.label, e.stratum])


def ingest(manifest, size=None):
    """Decode every manifest image, optionally resizing to ``size = (h, w)``."""
    images = []
    for entry in manifest.entries:
        img = read_image(manifest.resolve(entry), manifest.grayscale)
        if size is not None:
            img = resize_bilinear(img, size)
        images.append(img)
    return images


# synthetic benchmark

GRATING_PERIOD = 8.0
GRATING_AMPLITUDE = 0.25
ORIENTATION_JITTER = math.radians(10)
NOISE_SIGMA = 0.04
PATCH_ROTATION = math.radians(90)
PATCH_AMPLITUDE = 0.45


@dataclass(frozen=True)
class SyntheticImage:
    id: str
    image: np.ndarray
    label: int
    patch: tuple = None  # (top, left, size) for anomalies

    @property
    def patch_center(self):
        top, left, size = self.patch
        return top + size // 2, left + size // 2

    def truth_mask(self):
        mask = np.zeros(self.image.shape[-2:], dtype=np.uint8)
        if self.patch is not None:
            top, left, size = self.patch
            mask[top:top + size, left:left + size] = 1
        return mask


def _grating(size, theta, phase, amplitude, yy=None, xx=None):
    if yy is None:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * math.cos(theta) + yy * math.sin(theta)
    return 0.5 + amplitude * np.cos(2 * math.pi * u / GRATING_PERIOD + phase)


def synthetic_dataset(seed=42, n_nominal=40, n_anomalous=40, size=64, patch_size=12):
    """Sinusoidal gratings plus noise; anomalies carry a rotated, higher-contrast patch.

    Every image is quantized to 8 bits so it survives a PGM round trip unchanged.
    """
    rng = SplitMix64(seed)
    out = []
    for k in range(n_nominal + n_anomalous):
        theta = rng.uniform(1, -ORIENTATION_JITTER, ORIENTATION_JITTER)[0]
        phase = rng.uniform(1, 0, 2 * math.pi)[0]
        img = _grating(size, theta, phase, GRATING_AMPLITUDE)
        img += NOISE_SIGMA * rng.normal(size * size).reshape(size, size)
        patch = None
        if k >= n_nominal:
            top = rng.below(size - patch_size + 1)
            left = rng.below(size - patch_size + 1)
            yy, xx = np.mgrid[top:top + patch_size, left:left + patch_size].astype(np.float64)
            texture = _grating(size, theta + PATCH_ROTATION, rng.uniform(1, 0, 2 * math.pi)[0],
                               PATCH_AMPLITUDE, yy, xx)
            noise = NOISE_SIGMA * rng.normal(patch_size * patch_size).reshape(patch_size, patch_size)
            img[top:top + patch_size, left:left + patch_size] = texture + noise
            patch = (top, left, patch_size)
        img = np.round(np.clip(img, 0, 1) * 255) / 255
        label = 0 if patch is None else 1
        name = f"nom{k:03d}" if label == 0 else f"ano{k - n_nominal:03d}"
        out.append(SyntheticImage(name, img[None].astype(np.float32), label, patch))
    return out


def write_synthetic(out_dir, seed=42, **kwargs):
    """Write the benchmark as PGM images, ``manifest.csv``, truth masks and ``patches.json``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    items = synthetic_dataset(seed, **kwargs)
    entries, patches = [], {}
    for item in items:
        rel = os.path.join("images", f"{item.id}.pgm")
        write_image(item.image[0], os.path.join(out_dir, rel))
        write_image(item.truth_mask(), os.path.join(out_dir, "masks", f"{item.id}.pgm"))
        entries.append(ManifestEntry(item.id, "top", rel, item.label, "synthetic"))
        if item.patch is not None:
            patches[item.id] = {"top": item.patch[0], "left": item.patch[1], "size": item.patch[2]}
    manifest = DatasetManifest(os.path.abspath(out_dir), entries)
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    with open(os.path.join(out_dir, "patches.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "patches": patches}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
