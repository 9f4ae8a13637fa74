"""Stereo pair sources: KITTI-style folders and a synthetic correlated generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

CROP_HW = (370, 740)
TARGET_HW = (128, 256)
KITTI_TRAIN, KITTI_TEST = 1576, 790
LEFT_DIRS = ("image_2", "colored_0", "left")
RIGHT_DIRS = ("image_3", "colored_1", "right")
IMAGE_SUFFIXES = (".png", ".ppm", ".bmp", ".tif", ".tiff")


@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"view shapes differ: {self.left.shape} vs {self.right.shape}")


# ---------------------------------------------------------------------------
# image io


def load_image(path) -> np.ndarray:
    """8-bit RGB file -> float32 ``(3, H, W)`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8)).save(path, format="PNG")


def preprocess(img: np.ndarray, crop_hw=CROP_HW, target_hw=TARGET_HW) -> np.ndarray:
    """Center-crop to ``crop_hw`` then bilinearly resample to ``target_hw``."""
    _, h, w = img.shape
    ch, cw = crop_hw
    if h < ch or w < cw:
        raise ValueError(f"image {h}x{w} smaller than crop {ch}x{cw}")
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = img[:, top : top + ch, left : left + cw]
    out = np.empty((img.shape[0],) + tuple(target_hw), dtype=np.float32)
    for c in range(img.shape[0]):
        band = Image.fromarray(crop[c].astype(np.float32), mode="F")
        out[c] = np.asarray(band.resize((target_hw[1], target_hw[0]), Image.BILINEAR))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# KITTI-style folders


def _find_dir(root: Path, names) -> Optional[Path]:
    for name in names:
        if (root / name).is_dir():
            return root / name
    return None


def _images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


@dataclass
class IngestReport:
    pairs: int = 0
    unpaired: int = 0
    bad_size: int = 0


def ingest_kitti(root, crop_hw=CROP_HW, target_hw=TARGET_HW, report: Optional[IngestReport] = None, raw: bool = False) -> Iterator[StereoPair]:
    """Yield preprocessed pairs from ``root`` in sorted basename order.

    ``root`` holds a left and a right folder (``image_2``/``image_3``,
    ``colored_0``/``colored_1`` or ``left``/``right``) with matching file
    stems.  Images without a counterpart, or smaller than the crop, are
    skipped with a warning and counted in ``report``.  ``raw=True`` keeps
    images as stored (sizes must then be multiples of 16).
    """
    root = Path(root)
    report = report if report is not None else IngestReport()
    left_dir, right_dir = _find_dir(root, LEFT_DIRS), _find_dir(root, RIGHT_DIRS)
    if left_dir is None or right_dir is None:
        raise FileNotFoundError(f"{root} lacks left/right image folders ({LEFT_DIRS} / {RIGHT_DIRS})")
    left, right = _images(left_dir), _images(right_dir)
    for stem in sorted(set(left) ^ set(right)):
        log.warning("no stereo counterpart for %s", stem)
        report.unpaired += 1
    for stem in sorted(set(left) & set(right)):
        l_img, r_img = load_image(left[stem]), load_image(right[stem])
        try:
            if raw:
                if l_img.shape[1] % 16 or l_img.shape[2] % 16:
                    raise ValueError(f"size {l_img.shape[1]}x{l_img.shape[2]} not divisible by 16")
                pair = StereoPair(l_img, r_img, stem)
            else:
                pair = StereoPair(preprocess(l_img, crop_hw, target_hw), preprocess(r_img, crop_hw, target_hw), stem)
        except ValueError as exc:
            log.warning("skipping %s: %s", stem, exc)
            report.bad_size += 1
            continue
        report.pairs += 1
        yield pair


def split_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test split by sorted index: 1576/790 for the full set, else proportional."""
    full = KITTI_TRAIN + KITTI_TEST
    n_train = KITTI_TRAIN if n == full else int(round(n * KITTI_TRAIN / full))
    idx = np.arange(n)
    return idx[:n_train], idx[n_train:]


# ---------------------------------------------------------------------------
# synthetic pairs


def synth_pairs(seed: int, count: int, shape=(3, 32, 64), disparity=(1, 4), noise: float = 0.02, smoothness: int = 16) -> Iterator[StereoPair]:
    """Correlated view pairs: one smooth random scene seen with a horizontal shift.

    Each scene is low-frequency noise (a coarse random grid upsampled
    cubically) plus a few random bars; the right view is the left view's
    scene shifted by a random integer disparity, and each view gets its own
    Gaussian noise.
    """
    c, h, w = shape
    if h % 16 or w % 16:
        raise ValueError(f"shape {h}x{w} not divisible by 16")
    rng = np.random.default_rng(seed)
    lo_d, hi_d = disparity
    margin = max(hi_d, 0)
    for i in range(count):
        wide = w + margin
        gh, gw = max(2, h // smoothness + 2), max(2, wide // smoothness + 2)
        coarse = rng.uniform(0.0, 1.0, size=(c, gh, gw))
        scene = np.stack([ndimage.zoom(coarse[k], (h / gh, wide / gw), order=3, mode="nearest") for k in range(c)])
        scene = scene[:, :h, :wide]
        for _ in range(rng.integers(0, 3)):
            x0 = rng.integers(0, wide - 4)
            bw = rng.integers(2, 8)
            scene[:, :, x0 : x0 + bw] = rng.uniform(0.0, 1.0, size=(c, 1, 1))
        scene = np.clip(scene, 0.0, 1.0)
        d = int(rng.integers(lo_d, hi_d + 1)) if hi_d > 0 else 0
        left = scene[:, :, margin - 0 : margin + w] if margin else scene[:, :, :w]
        right = scene[:, :, margin - d : margin - d + w] if margin else scene[:, :, :w]
        left = left + rng.normal(0.0, noise, size=left.shape) if noise else left
        right = right + rng.normal(0.0, noise, size=right.shape) if noise else right
        yield StereoPair(
            np.clip(left, 0.0, 1.0).astype(np.float32),
            np.clip(right, 0.0, 1.0).astype(np.float32),
            f"synth{i:05d}",
        )
