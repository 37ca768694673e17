"""Raster containers, validation, and bit-exact file I/O.

Four raster kinds cross the file boundary:

* images       -- 8-bit RGB PNG
* label masks  -- 8-bit single-channel PNG with codes 0 (inlier),
                  1 (anomaly), 255 (void)
* logits       -- NPY v1.0, little-endian float64, C-order, shape [C,H,W]
* score maps   -- NPY v1.0, little-endian float64, C-order, shape [H,W]

All containers freeze their payload after validation so instances can be
shared across threads.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

LABEL_INLIER = 0
LABEL_ANOMALY = 1
LABEL_VOID = 255

_LABEL_CODES = (LABEL_INLIER, LABEL_ANOMALY, LABEL_VOID)

RASTER_KINDS = ("image", "logits", "scores", "labels")


class RasterError(ValueError):
    """Malformed raster payload or file."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageRaster:
    """8-bit RGB image, row-major [H,W,3]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise RasterError(f"image must have shape [H,W,3], got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise RasterError("image must be at least 1x1")
        if arr.dtype != np.uint8:
            raise RasterError(f"image dtype must be uint8, got {arr.dtype}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LogitMap:
    """Per-pixel class logits, layout [C,H,W], finite float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise RasterError(f"logits must have shape [C,H,W], got {arr.shape}")
        if arr.shape[0] < 2:
            raise RasterError(f"logits need at least 2 classes, got {arr.shape[0]}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise RasterError("logits lattice must be at least 1x1")
        if not np.isfinite(arr).all():
            raise RasterError("logits contain NaN or Inf")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel scalar anomaly score, [H,W], finite float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise RasterError(f"scores must have shape [H,W], got {arr.shape}")
        if not np.isfinite(arr).all():
            raise RasterError("scores contain NaN or Inf")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TriLabelMask:
    """Per-pixel ground truth: 0 inlier, 1 anomaly, 255 void."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise RasterError(f"labels must have shape [H,W], got {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8, casting="safe")
        bad = ~np.isin(arr, _LABEL_CODES)
        if bad.any():
            code = int(arr[bad][0])
            raise RasterError(f"unknown label code {code}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SemanticLabelMap:
    """Per-pixel semantic class id: 0..C-1 inliers, P anomaly, 255 void."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise RasterError(f"semantic map must have shape [H,W], got {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8, casting="safe")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ObjectCutout:
    """Out-of-distribution object: RGB image plus soft alpha in [0,1]."""

    image: ImageRaster
    alpha: np.ndarray
    tag: str = ""
    support_threshold: float = field(default=0.5, repr=False)

    def __post_init__(self):
        alpha = np.ascontiguousarray(self.alpha, dtype=np.float64)
        if alpha.shape != (self.image.height, self.image.width):
            raise RasterError(
                f"alpha shape {alpha.shape} does not match image "
                f"{(self.image.height, self.image.width)}"
            )
        if alpha.min() < 0.0 or alpha.max() > 1.0:
            raise RasterError("alpha values must lie in [0,1]")
        if not (alpha > self.support_threshold).any():
            raise RasterError("cutout has no pixel with alpha > 0.5")
        object.__setattr__(self, "alpha", _freeze(alpha))

    @property
    def height(self) -> int:
        return self.image.height

    @property
    def width(self) -> int:
        return self.image.width


def _atomic_write(path: str, writer) -> None:
    """Write via a temp file in the target directory, then rename.

    A failed write never leaves a partial file at `path`.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _load_npy(path: str) -> np.ndarray:
    try:
        arr = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise RasterError(f"malformed array file {path}: {exc}") from exc
    if arr.dtype != np.float64:
        raise RasterError(f"{path}: expected float64 payload, got {arr.dtype}")
    return arr


def load_raster(path, kind: str):
    """Load and validate a raster of the declared kind.

    Returns ImageRaster, LogitMap, ScoreMap, or TriLabelMask according to
    `kind`; raises RasterError for malformed files, dimension or channel
    mismatches, non-finite logits/scores, or unknown label codes.
    """
    path = os.fspath(path)
    if kind == "image":
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise RasterError(f"{path}: expected RGB image, got mode {img.mode}")
            return ImageRaster(np.asarray(img, dtype=np.uint8))
    if kind == "labels":
        with Image.open(path) as img:
            if img.mode != "L":
                raise RasterError(
                    f"{path}: expected single-channel label PNG, got mode {img.mode}"
                )
            return TriLabelMask(np.asarray(img, dtype=np.uint8))
    if kind == "logits":
        arr = _load_npy(path)
        if arr.ndim != 3:
            raise RasterError(f"{path}: logits must be [C,H,W], got shape {arr.shape}")
        return LogitMap(arr)
    if kind == "scores":
        arr = _load_npy(path)
        if arr.ndim != 2:
            raise RasterError(f"{path}: scores must be [H,W], got shape {arr.shape}")
        return ScoreMap(arr)
    raise RasterError(f"unknown raster kind {kind!r}")


def save_raster(raster, path) -> None:
    """Persist a raster; load_raster round-trips it bit-exactly."""
    path = os.fspath(path)
    if isinstance(raster, ImageRaster):
        img = Image.fromarray(np.asarray(raster.data), mode="RGB")
        _atomic_write(path, lambda fh: img.save(fh, format="PNG"))
    elif isinstance(raster, (TriLabelMask, SemanticLabelMap)):
        img = Image.fromarray(np.asarray(raster.data), mode="L")
        _atomic_write(path, lambda fh: img.save(fh, format="PNG"))
    elif isinstance(raster, (LogitMap, ScoreMap)):
        arr = np.ascontiguousarray(raster.data, dtype="<f8")
        _atomic_write(path, lambda fh: np.save(fh, arr, allow_pickle=False))
    else:
        raise RasterError(f"cannot save object of type {type(raster).__name__}")


def load_semantic_labels(path, num_classes: int, anomaly_id: int) -> SemanticLabelMap:
    """Load a semantic label PNG, checking codes against the class layout."""
    path = os.fspath(path)
    with Image.open(path) as img:
        if img.mode != "L":
            raise RasterError(
                f"{path}: expected single-channel label PNG, got mode {img.mode}"
            )
        arr = np.asarray(img, dtype=np.uint8)
    valid = (arr < num_classes) | (arr == anomaly_id) | (arr == LABEL_VOID)
    if not valid.all():
        code = int(arr[~valid][0])
        raise RasterError(f"{path}: unknown semantic code {code}")
    return SemanticLabelMap(arr)


def load_cutout(path, tag: str = "") -> ObjectCutout:
    """Load an object cutout from an RGBA PNG (alpha channel = soft mask)."""
    path = os.fspath(path)
    with Image.open(path) as img:
        if img.mode != "RGBA":
            raise RasterError(f"{path}: expected RGBA cutout, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.uint8)
    rgb = ImageRaster(np.ascontiguousarray(arr[:, :, :3]))
    alpha = arr[:, :, 3].astype(np.float64) / 255.0
    return ObjectCutout(image=rgb, alpha=alpha, tag=tag)


def save_cutout(cutout: ObjectCutout, path) -> None:
    """Store an object cutout as an RGBA PNG."""
    path = os.fspath(path)
    h, w = cutout.height, cutout.width
    rgba = np.empty((h, w, 4), dtype=np.uint8)
    rgba[:, :, :3] = cutout.image.data
    rgba[:, :, 3] = np.rint(cutout.alpha * 255.0).astype(np.uint8)
    img = Image.fromarray(rgba, mode="RGBA")
    _atomic_write(path, lambda fh: img.save(fh, format="PNG"))


def pad_embed(plane: np.ndarray, canvas: tuple, offset: tuple) -> np.ndarray:
    """Zero-pad a small plane into an H x W canvas at the given offset.

    The output is zero outside the embedded window and copies the plane
    inside it; the window must lie fully within the canvas.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise RasterError(f"plane must be 2-D, got shape {plane.shape}")
    height, width = canvas
    row, col = offset
    ph, pw = plane.shape
    if row < 0 or col < 0 or row + ph > height or col + pw > width:
        raise RasterError(
            f"window {plane.shape} at offset {offset} exceeds canvas {canvas}"
        )
    out = np.zeros((height, width), dtype=np.float64)
    out[row : row + ph, col : col + pw] = plane
    return out
