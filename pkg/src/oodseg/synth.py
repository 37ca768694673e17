"""Deterministic anomaly-image synthesis by compositing object cutouts.

An object cutout (RGB + soft alpha) is scaled with a linear
perspective model, illumination-matched to the target window by a
clamped luminance gain, and pasted into an inlier scene. The pasted
region takes the anomaly label id P and the tri-label mask marks it
as anomaly; void pixels stay void. With the alpha binarized at 0.5
the composite is bit-exact: masked pixels copy the harmonized cutout,
unmasked pixels copy the inlier image.

Placement searches eligible ground pixels by rejection sampling with
bottom-center anchoring; every item draws from its own counter-based
random stream keyed by (seed, item index), so serial and parallel
runs produce identical outputs and recorded manifests replay
byte-identically.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .raster import (
    LABEL_ANOMALY,
    LABEL_INLIER,
    LABEL_VOID,
    ImageRaster,
    ObjectCutout,
    RasterError,
    SemanticLabelMap,
    TriLabelMask,
    load_cutout,
    load_raster,
    load_semantic_labels,
    save_raster,
)

logger = logging.getLogger(__name__)

# ITU-R BT.601 luma weights, fixed for reproducibility
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

GAIN_MIN = 0.25
GAIN_MAX = 4.0


class SynthConfigError(ValueError):
    """Invalid synthesizer configuration."""


class PlacementSearchError(RuntimeError):
    """No feasible placement found within the attempt budget."""


@dataclass(frozen=True)
class SynthConfig:
    """Compositing parameters.

    anomaly_id is the label P written into the semantic map; it must
    exceed every inlier class id (e.g. 20 for a 19-class layout) and
    stay below the void code 255.
    """

    num_classes: int = 19
    anomaly_id: int = 20
    ground_ids: Tuple[int, ...] = (0, 1)
    scale_min: float = 0.5
    scale_max: float = 1.0
    luminance_matching: bool = True
    feather_radius: int = 0
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        if self.num_classes < 2:
            raise SynthConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.anomaly_id <= self.num_classes - 1:
            raise SynthConfigError(
                f"anomaly id {self.anomaly_id} must exceed the largest inlier "
                f"class id {self.num_classes - 1}"
            )
        if self.anomaly_id >= LABEL_VOID:
            raise SynthConfigError(
                f"anomaly id {self.anomaly_id} collides with the void code"
            )
        if any(g < 0 or g >= self.num_classes for g in self.ground_ids):
            raise SynthConfigError(f"ground ids {self.ground_ids} out of class range")
        if not 0 < self.scale_min <= self.scale_max:
            raise SynthConfigError(
                f"need 0 < scale_min <= scale_max, got ({self.scale_min}, {self.scale_max})"
            )
        if self.feather_radius < 0:
            raise SynthConfigError("feather radius must be >= 0")
        if self.max_attempts < 1:
            raise SynthConfigError("max_attempts must be >= 1")


@dataclass(frozen=True)
class Placement:
    """Top-left embedding offset plus the scale applied to the cutout."""

    row: int
    col: int
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise SynthConfigError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class HarmonizeResult:
    cutout: ObjectCutout
    gain: float
    gain_forced: bool


def scaled_size(height: int, width: int, scale: float) -> Tuple[int, int]:
    """Cutout size after scaling; each side at least 1 pixel."""
    sh = max(1, int(np.floor(height * scale + 0.5)))
    sw = max(1, int(np.floor(width * scale + 0.5)))
    return sh, sw


def _resample_bilinear(plane: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a 2-D float plane; identity when sizes match."""
    h, w = plane.shape
    oh, ow = out_shape
    if (oh, ow) == (h, w):
        return plane.astype(np.float64, copy=True)
    src_r = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0.0, h - 1.0)
    src_c = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0.0, w - 1.0)
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0)[:, None]
    fc = (src_c - c0)[None, :]
    p = plane.astype(np.float64, copy=False)
    top = p[np.ix_(r0, c0)] * (1 - fc) + p[np.ix_(r0, c1)] * fc
    bot = p[np.ix_(r1, c0)] * (1 - fc) + p[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def _box_blur(plane: np.ndarray, radius: int) -> np.ndarray:
    """Separable box filter with zero padding, window 2*radius+1."""
    if radius == 0:
        return plane
    size = 2 * radius + 1

    def blur_axis(a: np.ndarray, axis: int) -> np.ndarray:
        n = a.shape[axis]
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius + 1, radius)
        c = np.cumsum(np.pad(a, pad), axis=axis)
        hi = np.take(c, np.arange(size, n + size), axis=axis)
        lo = np.take(c, np.arange(0, n), axis=axis)
        return (hi - lo) / size

    return blur_axis(blur_axis(plane, 0), 1)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Scalar luma per pixel from an [H,W,3] array."""
    r, g, b = LUMA_WEIGHTS
    arr = np.asarray(rgb, dtype=np.float64)
    return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]


def harmonize_cutout(
    cutout: ObjectCutout,
    x_in: ImageRaster,
    place: Placement,
    cfg: SynthConfig,
) -> HarmonizeResult:
    """Scale the cutout and match its illumination to the target window.

    The gain is mean background-window luminance over mean cutout
    luminance (alpha > 0.5 support), clamped to [0.25, 4]; a
    zero-luminance cutout forces gain 1 and sets the flag. A positive
    feather radius box-blurs the alpha.
    """
    sh, sw = scaled_size(cutout.height, cutout.width, place.scale)
    if (
        place.row < 0
        or place.col < 0
        or place.row + sh > x_in.height
        or place.col + sw > x_in.width
    ):
        raise PlacementSearchError(
            f"placement {place} with scaled size {(sh, sw)} exceeds canvas "
            f"{(x_in.height, x_in.width)}"
        )

    img = np.stack(
        [
            _resample_bilinear(cutout.image.data[:, :, ch].astype(np.float64), (sh, sw))
            for ch in range(3)
        ],
        axis=-1,
    )
    alpha = np.clip(_resample_bilinear(cutout.alpha, (sh, sw)), 0.0, 1.0)

    gain = 1.0
    forced = False
    if cfg.luminance_matching:
        support = alpha > 0.5
        lum_cut = float(luminance(img)[support].mean()) if support.any() else 0.0
        window = x_in.data[place.row : place.row + sh, place.col : place.col + sw]
        lum_bg = float(luminance(window).mean())
        if lum_cut <= 0.0:
            gain, forced = 1.0, True
            logger.warning("zero-luminance cutout %r: gain forced to 1", cutout.tag)
        else:
            gain = float(np.clip(lum_bg / lum_cut, GAIN_MIN, GAIN_MAX))
    out_img = np.clip(np.rint(img * gain), 0, 255).astype(np.uint8)

    if cfg.feather_radius > 0:
        alpha = np.clip(_box_blur(alpha, cfg.feather_radius), 0.0, 1.0)

    harmonized = ObjectCutout(
        image=ImageRaster(out_img), alpha=alpha, tag=cutout.tag
    )
    return HarmonizeResult(cutout=harmonized, gain=gain, gain_forced=forced)


def blend_composite(
    x_in: ImageRaster,
    y_in: SemanticLabelMap,
    cutout: ObjectCutout,
    place: Placement,
    cfg: SynthConfig,
) -> Tuple[ImageRaster, SemanticLabelMap, TriLabelMask]:
    """Paste a (harmonized) cutout and update labels.

    The alpha binarized at 0.5 drives the label update and, when the
    feather radius is 0, the color composite as well: masked pixels copy
    the cutout bit-exactly and unmasked pixels copy the inlier image.
    With feathering the soft alpha is used for color blending only.
    """
    if (x_in.height, x_in.width) != (y_in.height, y_in.width):
        raise RasterError("image and semantic map dimensions differ")
    h, w = cutout.height, cutout.width
    r0, c0 = place.row, place.col
    if r0 < 0 or c0 < 0 or r0 + h > x_in.height or c0 + w > x_in.width:
        raise PlacementSearchError(
            f"cutout {(h, w)} at offset {(r0, c0)} exceeds canvas "
            f"{(x_in.height, x_in.width)}"
        )

    hard = cutout.alpha > 0.5
    x_amy = np.array(x_in.data)
    window = x_amy[r0 : r0 + h, c0 : c0 + w]
    if cfg.feather_radius > 0:
        a = cutout.alpha[:, :, None]
        blended = (1.0 - a) * window.astype(np.float64) + a * cutout.image.data
        window[:] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    else:
        window[hard] = cutout.image.data[hard]

    y_amy = np.array(y_in.data)
    y_amy[r0 : r0 + h, c0 : c0 + w][hard] = cfg.anomaly_id

    mask = np.full(y_amy.shape, LABEL_INLIER, dtype=np.uint8)
    mask[y_amy == LABEL_VOID] = LABEL_VOID
    mask[y_amy == cfg.anomaly_id] = LABEL_ANOMALY

    return ImageRaster(x_amy), SemanticLabelMap(y_amy), TriLabelMask(mask)


def propose_placement(
    y_in: SemanticLabelMap,
    cutout: ObjectCutout,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> Placement:
    """Rejection-sample a feasible placement anchored at the object base.

    The scaled cutout's bottom-center pixel must land on an eligible
    ground pixel; scale follows s(row) = s_min + (s_max - s_min) * row/H.
    Windows overlapping pre-existing anomaly labels are rejected. With no
    eligible ground pixels the lower half of the lattice is the fallback
    candidate region.
    """
    h_canvas, w_canvas = y_in.height, y_in.width
    eligible = np.argwhere(np.isin(y_in.data, cfg.ground_ids))
    if len(eligible) == 0:
        rows, cols = np.mgrid[h_canvas // 2 : h_canvas, 0:w_canvas]
        eligible = np.stack([rows.ravel(), cols.ravel()], axis=1)

    existing_anomaly = y_in.data == cfg.anomaly_id
    for _ in range(cfg.max_attempts):
        base_r, base_c = eligible[rng.integers(len(eligible))]
        scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * (base_r / h_canvas)
        sh, sw = scaled_size(cutout.height, cutout.width, scale)
        r0 = int(base_r) - (sh - 1)
        c0 = int(base_c) - sw // 2
        if r0 < 0 or c0 < 0 or c0 + sw > w_canvas or base_r + 1 > h_canvas:
            continue
        if existing_anomaly[r0 : r0 + sh, c0 : c0 + sw].any():
            continue
        return Placement(row=r0, col=c0, scale=float(scale))
    raise PlacementSearchError(
        f"no feasible placement in {cfg.max_attempts} draws "
        f"(cutout {(cutout.height, cutout.width)}, canvas {(h_canvas, w_canvas)})"
    )


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one dataset item; parallel-safe."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))


def _read_manifest(path) -> List[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SynthConfigError(f"{path}:{line_no}: bad manifest line: {exc}")
    return records


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _output_paths(out_dir: str, index: int, image_path: str) -> Tuple[str, str, str]:
    stem = f"{index:04d}_{os.path.splitext(os.path.basename(image_path))[0]}"
    return (
        os.path.join(out_dir, f"{stem}_amy.png"),
        os.path.join(out_dir, f"{stem}_labels.png"),
        os.path.join(out_dir, f"{stem}_mask.png"),
    )


def _render_item(
    image_path: str,
    labels_path: str,
    cutout_path: str,
    placement: Placement,
    cfg: SynthConfig,
    out_paths: Tuple[str, str, str],
) -> float:
    """Harmonize + blend one item and write its three rasters; returns gain."""
    x_in = load_raster(image_path, "image")
    y_in = load_semantic_labels(labels_path, cfg.num_classes, cfg.anomaly_id)
    cut = load_cutout(cutout_path)
    harm = harmonize_cutout(cut, x_in, placement, cfg)
    x_amy, y_amy, mask = blend_composite(x_in, y_in, harm.cutout, placement, cfg)
    save_raster(x_amy, out_paths[0])
    save_raster(y_amy, out_paths[1])
    save_raster(mask, out_paths[2])
    return harm.gain


def synthesize_dataset(
    images_manifest,
    cutouts_manifest,
    cfg: SynthConfig,
    out_dir,
) -> List[dict]:
    """Composite one sampled cutout into every listed inlier image.

    Inputs are line-delimited JSON manifests: image entries need
    `image` and `labels` paths, cutout entries a `cutout` path
    (relative paths resolve against the manifest location). Writes the
    composites plus a `synth_manifest.jsonl` with per-item placement,
    gain, and seed for replay. Infeasible placements are logged and
    skipped. Deterministic for a fixed config.
    """
    out_dir = os.fspath(out_dir)
    images_manifest = os.fspath(images_manifest)
    cutouts_manifest = os.fspath(cutouts_manifest)
    image_entries = _read_manifest(images_manifest)
    cutout_entries = _read_manifest(cutouts_manifest)
    if not cutout_entries:
        raise SynthConfigError(f"cutout library {cutouts_manifest} is empty")
    if not image_entries:
        raise SynthConfigError(f"image manifest {images_manifest} is empty")

    img_base = os.path.dirname(os.path.abspath(images_manifest))
    cut_base = os.path.dirname(os.path.abspath(cutouts_manifest))
    os.makedirs(out_dir, exist_ok=True)

    records: List[dict] = []
    for idx, entry in enumerate(image_entries):
        rng = item_rng(cfg.seed, idx)
        image_path = _resolve(img_base, entry["image"])
        labels_path = _resolve(img_base, entry["labels"])
        cut_entry = cutout_entries[int(rng.integers(len(cutout_entries)))]
        cutout_path = _resolve(cut_base, cut_entry["cutout"])

        y_in = load_semantic_labels(labels_path, cfg.num_classes, cfg.anomaly_id)
        cut = load_cutout(cutout_path, tag=cut_entry.get("tag", ""))
        try:
            placement = propose_placement(y_in, cut, cfg, rng)
        except PlacementSearchError as exc:
            logger.warning("skipping item %d (%s): %s", idx, entry["image"], exc)
            continue

        gain = _render_item(
            image_path,
            labels_path,
            cutout_path,
            placement,
            cfg,
            _output_paths(out_dir, idx, image_path),
        )
        records.append(
            {
                "image": image_path,
                "labels": labels_path,
                "cutout": cutout_path,
                "seed": cfg.seed,
                "placement": {
                    "row": placement.row,
                    "col": placement.col,
                    "scale": placement.scale,
                },
                "gain": gain,
            }
        )

    manifest_path = os.path.join(out_dir, "synth_manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def replay_manifest(manifest_path, cfg: SynthConfig, out_dir) -> List[dict]:
    """Re-render composites from a recorded manifest (same cfg), byte-identical."""
    manifest_path = os.fspath(manifest_path)
    out_dir = os.fspath(out_dir)
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = _read_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    replayed = []
    for idx, rec in enumerate(records):
        placement = Placement(
            row=int(rec["placement"]["row"]),
            col=int(rec["placement"]["col"]),
            scale=float(rec["placement"]["scale"]),
        )
        gain = _render_item(
            _resolve(base, rec["image"]),
            _resolve(base, rec["labels"]),
            _resolve(base, rec["cutout"]),
            placement,
            cfg,
            _output_paths(out_dir, idx, rec["image"]),
        )
        replayed.append({**rec, "gain": gain})
    return replayed
