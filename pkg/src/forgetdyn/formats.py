"""On-disk formats: class-id masks, heat maps, and trace manifests.

Masks are 8-bit grayscale PNG or a small headered raw binary; heat maps are
written twice, as 16-bit grayscale PNG (with the epoch count in a text
chunk) and as a plain integer CSV. Every writer is deterministic so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .core import ForgetDynError, HeatMap

# Raw mask layout: magic, version byte, dtype code (0 = uint8, 1 = uint16),
# then height and width as little-endian uint32, then row-major pixel data.
RAW_MAGIC = b"FDRW"
_RAW_HEADER = struct.Struct("<4sBBII")
_RAW_DTYPES = {0: np.uint8, 1: np.uint16}
_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

MANIFEST_VERSION = 1


class FormatError(ForgetDynError):
    """A file could not be parsed as the format it claims to be."""


class ManifestError(FormatError):
    """The trace manifest is missing, malformed, or references bad paths."""


def save_mask(path: str | Path, grid: np.ndarray) -> None:
    """Write a class-id grid as PNG (.png) or raw binary (anything else)."""
    path = Path(path)
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {grid.shape}")
    if grid.min() < 0 or grid.max() > 65535:
        raise ValueError("mask values must fit in uint16")
    if path.suffix.lower() == ".png":
        if grid.max() > 255:
            raise ValueError("PNG masks are 8-bit; use the raw format instead")
        Image.fromarray(grid.astype(np.uint8)).save(path)
        return
    code = 0 if grid.max() <= 255 else 1
    data = grid.astype(_RAW_DTYPES[code])
    header = _RAW_HEADER.pack(RAW_MAGIC, 1, code, grid.shape[0], grid.shape[1])
    path.write_bytes(header + data.tobytes())


def load_mask(path: str | Path) -> np.ndarray:
    """Read a class-id grid written by save_mask; format detected by magic."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if blob.startswith(_PNG_MAGIC):
        try:
            img = Image.open(path)
            img.load()
        except Exception as exc:
            raise FormatError(f"{path}: broken PNG ({exc})") from exc
        if img.mode not in ("L", "I;16", "I", "P"):
            raise FormatError(f"{path}: expected grayscale PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.int64)
    if blob.startswith(RAW_MAGIC):
        if len(blob) < _RAW_HEADER.size:
            raise FormatError(f"{path}: truncated raw header")
        magic, version, code, height, width = _RAW_HEADER.unpack_from(blob)
        if version != 1 or code not in _RAW_DTYPES:
            raise FormatError(f"{path}: unsupported raw version {version}/dtype {code}")
        dtype = _RAW_DTYPES[code]
        expected = _RAW_HEADER.size + height * width * dtype().itemsize
        if len(blob) != expected:
            raise FormatError(
                f"{path}: raw payload is {len(blob)} bytes, expected {expected}"
            )
        flat = np.frombuffer(blob, dtype=dtype, offset=_RAW_HEADER.size)
        return flat.reshape(height, width).astype(np.int64)
    raise FormatError(f"{path}: neither PNG nor {RAW_MAGIC!r} raw mask")


def save_heatmap(png_path: str | Path, heatmap: HeatMap) -> None:
    """Write counts as a 16-bit grayscale PNG; epoch count rides in a text chunk."""
    png_path = Path(png_path)
    if heatmap.counts.max() > 65535:
        raise ValueError("counts exceed 16-bit range")
    info = PngInfo()
    info.add_text("epochs_observed", str(heatmap.epochs_observed))
    Image.fromarray(heatmap.counts.astype(np.uint16)).save(png_path, pnginfo=info)


def save_counts_csv(path: str | Path, heatmap: HeatMap) -> None:
    """Write counts as comma-separated integers, one image row per line."""
    rows = [",".join(str(int(v)) for v in row) for row in heatmap.counts]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_heatmap(path: str | Path) -> HeatMap:
    """Read a heat map from 16-bit PNG or counts CSV.

    Neither format stores the never-learned distinction, so ever_correct is
    reconstructed as counts > 0 (consistent: a forgotten pixel was correct
    once). Without the PNG text chunk, epochs_observed defaults to the
    smallest count compatible with the data.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        counts = _read_counts_csv(path)
        epochs = None
    else:
        try:
            img = Image.open(path)
            img.load()
        except Exception as exc:
            raise FormatError(f"{path}: broken PNG ({exc})") from exc
        counts = np.asarray(img, dtype=np.int64)
        if counts.ndim != 2:
            raise FormatError(f"{path}: heat map PNG must be single-channel")
        epochs = None
        text = getattr(img, "text", {})
        if "epochs_observed" in text:
            try:
                epochs = int(text["epochs_observed"])
            except ValueError as exc:
                raise FormatError(f"{path}: bad epochs_observed chunk") from exc
    if epochs is None:
        peak = int(counts.max())
        epochs = 1 if peak == 0 else 2 * peak
    if counts.min() < 0:
        raise FormatError(f"{path}: negative forgetting count")
    try:
        return HeatMap(counts=counts, epochs_observed=epochs,
                       ever_correct=(counts > 0).astype(np.uint8))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _read_counts_csv(path: Path) -> np.ndarray:
    try:
        rows = [
            [int(cell) for cell in line.split(",")]
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a counts CSV ({exc})") from exc
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise FormatError(f"{path}: ragged or empty counts CSV")
    return np.asarray(rows, dtype=np.int64)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    labels_path: Path
    prediction_paths: tuple[Path, ...]


@dataclass(frozen=True)
class TraceManifest:
    """Parsed description of which files form each image's epoch trace."""

    version: int
    num_classes: int
    ignore_label: int | None
    entries: tuple[ManifestEntry, ...]


def load_manifest(path: str | Path) -> TraceManifest:
    """Read and validate a JSON trace manifest.

    Relative paths are resolved against the manifest's directory. All
    referenced files must exist; error messages name the offending file.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    if "version" not in doc:
        raise ManifestError(f"{path}: missing mandatory 'version' field")
    if doc["version"] != MANIFEST_VERSION:
        raise ManifestError(
            f"{path}: unsupported manifest version {doc['version']!r}"
        )
    num_classes = doc.get("num_classes")
    if not isinstance(num_classes, int) or num_classes < 2:
        raise ManifestError(f"{path}: 'num_classes' must be an integer >= 2")
    ignore_label = doc.get("ignore_label")
    if ignore_label is not None and not isinstance(ignore_label, int):
        raise ManifestError(f"{path}: 'ignore_label' must be an integer or null")
    images = doc.get("images")
    if not isinstance(images, list) or not images:
        raise ManifestError(f"{path}: 'images' must be a non-empty list")

    root = path.parent
    entries = []
    seen: set[str] = set()
    for i, item in enumerate(images):
        if not isinstance(item, dict):
            raise ManifestError(f"{path}: images[{i}] is not an object")
        image_id = item.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            raise ManifestError(f"{path}: images[{i}] needs a string 'image_id'")
        if any(ch in image_id for ch in "/\\") or image_id in (".", ".."):
            # Ids become output file stems, so path syntax is rejected.
            raise ManifestError(f"{path}: image_id {image_id!r} is not a safe filename")
        if image_id in seen:
            raise ManifestError(f"{path}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        labels = item.get("labels")
        if not isinstance(labels, str):
            raise ManifestError(f"{path}: {image_id}: 'labels' must be a path")
        preds = item.get("predictions")
        if not isinstance(preds, list) or not preds or not all(
            isinstance(p, str) for p in preds
        ):
            raise ManifestError(
                f"{path}: {image_id}: 'predictions' must be a non-empty list of paths"
            )
        labels_path = root / labels
        pred_paths = tuple(root / p for p in preds)
        for ref in (labels_path, *pred_paths):
            if not ref.is_file():
                raise ManifestError(f"{path}: {image_id}: no such file {ref}")
        entries.append(ManifestEntry(image_id, labels_path, pred_paths))
    return TraceManifest(
        version=MANIFEST_VERSION,
        num_classes=num_classes,
        ignore_label=ignore_label,
        entries=tuple(entries),
    )
