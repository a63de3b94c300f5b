"""
Rain pairs: synthesis, dataset ingestion, cropping, batching and PNG I/O.

Every RainPair produced here satisfies O = B + R bit-exactly. B and O are
snapped onto a 2^-16 grid (far below 8-bit quantization) before R is
defined as O - B; sums and differences of such values are exact in
32-bit floats.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple
import logging

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .models import RainPair
from .tensor import InvalidArgumentError, Tensor


logger = logging.getLogger(__name__)

GRID = 2.0 ** -16
RAIN_DIR = "rain"
CLEAN_DIR = "norain"
SUPPORTED_MODES = ("RGB", "L")

Range = Tuple[float, float]


class DatasetError(Exception):
    """Raised when a dataset directory is empty or its files do not pair up."""
    pass


class ImageIOError(IOError):
    """Raised when a PNG cannot be read or written."""
    pass


# ============================================================
# Exact pairs
# ============================================================

def snap_to_grid(values: np.ndarray) -> np.ndarray:
    """Round to the nearest multiple of 2^-16, as float32."""
    return (np.round(np.asarray(values, dtype=np.float64) / GRID) * GRID).astype(np.float32)


def make_pair(o: np.ndarray, b: np.ndarray, name: str = "") -> RainPair:
    """
    Build a RainPair from rainy and clean arrays, defining R = O - B.

    For ingested datasets R may be negative where the rainy image is darker.
    """
    if np.shape(o) != np.shape(b):
        raise InvalidArgumentError(f"make_pair: shape mismatch {np.shape(o)} vs {np.shape(b)}")
    o32 = snap_to_grid(o)
    b32 = snap_to_grid(b)
    return RainPair(o=Tensor(o32), b=Tensor(b32), r=Tensor(o32 - b32), name=name)


# ============================================================
# Synthesis
# ============================================================

@dataclass(frozen=True)
class RainParams:
    """Sampling ranges for synthetic rain streaks."""
    streak_count: Tuple[int, int] = (10, 30)
    length: Range = (4.0, 16.0)          # pixels
    angle: Range = (-20.0, 20.0)         # degrees from vertical
    width: Range = (0.8, 1.6)            # pixels
    intensity: Range = (0.3, 0.8)
    blur_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("streak_count", "length", "angle", "width", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidArgumentError(f"RainParams.{name} range is empty: [{lo}, {hi}]")
        if self.streak_count[0] < 0:
            raise InvalidArgumentError(f"RainParams.streak_count must be nonnegative, got {self.streak_count}")
        if self.length[0] <= 0 or self.width[0] <= 0:
            raise InvalidArgumentError("RainParams length and width must be positive")
        if self.intensity[0] <= 0:
            raise InvalidArgumentError(f"RainParams.intensity must be positive, got {self.intensity}")
        if self.blur_sigma < 0:
            raise InvalidArgumentError(f"RainParams.blur_sigma must be nonnegative, got {self.blur_sigma}")


def render_streaks(height: int, width: int, params: RainParams, rng: np.random.Generator) -> np.ndarray:
    """
    Grayscale streak layer: blurred anti-aliased line segments.

    Returns:
        Array of shape (height, width) with values >= 0
    """
    layer = np.zeros((height, width))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    count = int(rng.integers(params.streak_count[0], params.streak_count[1] + 1))
    for _ in range(count):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        half = rng.uniform(*params.length) / 2.0
        angle = np.deg2rad(rng.uniform(*params.angle))
        thickness = rng.uniform(*params.width)
        intensity = rng.uniform(*params.intensity)

        dy, dx = np.cos(angle), np.sin(angle)
        py, px = yy - cy, xx - cx
        along = np.clip(py * dy + px * dx, -half, half)
        dist = np.hypot(py - along * dy, px - along * dx)
        coverage = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
        np.maximum(layer, intensity * coverage, out=layer)
    if params.blur_sigma > 0 and count:
        layer = gaussian_filter(layer, params.blur_sigma)
    return np.maximum(layer, 0.0)


def synthesize_rain(b: Tensor, params: RainParams) -> RainPair:
    """
    Add synthetic streaks to a clean image.

    O = clip(B + R_raw, 0, 1) and the stored R is O - B, so saturation
    never breaks O = B + R.

    Args:
        b: Clean image (1, 3, h, w) in [0, 1]
        params: Streak sampling ranges and seed

    Returns:
        RainPair with R >= 0
    """
    if b.data.ndim != 4 or b.shape[0] != 1:
        raise InvalidArgumentError(f"synthesize_rain: expected a single image (1, c, h, w), got {b.shape}")
    rng = np.random.default_rng(params.seed)
    clean = snap_to_grid(np.clip(b.data, 0.0, 1.0))
    streaks = render_streaks(b.shape[2], b.shape[3], params, rng)
    rainy = np.clip(clean.astype(np.float64) + streaks[None, None], 0.0, 1.0)
    return make_pair(rainy, clean)


def synthetic_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """
    Procedural clean image: smooth colour gradients plus flat rectangles.

    Returns:
        Array of shape (1, 3, size, size) in [0, 1]
    """
    yy, xx = np.mgrid[0:size, 0:size] / max(size, 1)
    image = np.empty((3, size, size))
    for c in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        image[c] = 0.45 + 0.25 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    for _ in range(4):
        top, left = rng.integers(0, size, size=2)
        h, w = rng.integers(size // 8 + 1, size // 2 + 2, size=2)
        image[:, top:top + h, left:left + w] = rng.uniform(0.05, 0.85, size=(3, 1, 1))
    return np.clip(image, 0.0, 1.0)[None]


def synthetic_dataset(count: int, size: int, params: RainParams, seed: int) -> List[RainPair]:
    """Deterministic toy set of procedural backgrounds with synthetic rain."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        clean = synthetic_background(size, rng)
        pair = synthesize_rain(Tensor(clean), replace(params, seed=int(rng.integers(0, 2**31 - 1))))
        pair.name = f"synthetic_{i:04d}"
        pairs.append(pair)
    logger.info(f"Synthesized {count} rain pairs of size {size}x{size}")
    return pairs


# ============================================================
# Cropping and batching
# ============================================================

def random_crop_pair(pair: RainPair, size: int, seed: int) -> RainPair:
    """
    Crop the same window out of O, B and R.

    Raises:
        InvalidArgumentError: If size exceeds the pair's height or width
    """
    _, _, h, w = pair.shape
    if size <= 0 or size > min(h, w):
        raise InvalidArgumentError(f"random_crop_pair: crop {size} does not fit pair of shape {pair.shape}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    window = (slice(None), slice(None), slice(top, top + size), slice(left, left + size))
    return RainPair(
        o=Tensor(pair.o.data[window]),
        b=Tensor(pair.b.data[window]),
        r=Tensor(pair.r.data[window]),
        name=pair.name,
    )


def stack_pairs(pairs: Sequence[RainPair]) -> RainPair:
    """Concatenate pairs along the batch axis."""
    return RainPair(
        o=Tensor(np.concatenate([p.o.data for p in pairs], axis=0)),
        b=Tensor(np.concatenate([p.b.data for p in pairs], axis=0)),
        r=Tensor(np.concatenate([p.r.data for p in pairs], axis=0)),
        name=",".join(p.name for p in pairs),
    )


def batch_iter(
    pairs: Sequence[RainPair],
    batch: int,
    crop: Optional[int],
    seed: int,
    epoch: int = 0,
) -> Iterator[RainPair]:
    """
    One epoch of cropped batches in a seeded order.

    The order and every crop window depend only on (seed, epoch). The last
    batch may be smaller than ``batch``.

    Args:
        pairs: Full-size pairs
        batch: Pairs per batch
        crop: Square crop size, or None to use pairs whole
        seed: Run seed
        epoch: Epoch index
    """
    if batch <= 0:
        raise InvalidArgumentError(f"batch_iter: batch must be positive, got {batch}")
    if not pairs:
        raise DatasetError("batch_iter: no pairs to iterate")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(pairs))
    crop_seeds = rng.integers(0, 2**63 - 1, size=len(pairs))
    for start in range(0, len(order), batch):
        chunk = order[start:start + batch]
        if crop is None:
            members = [pairs[i] for i in chunk]
        else:
            members = [random_crop_pair(pairs[i], crop, int(crop_seeds[i])) for i in chunk]
        yield stack_pairs(members)


# ============================================================
# PNG I/O
# ============================================================

def load_png(path) -> Tensor:
    """
    Read an 8-bit RGB or grayscale PNG as a (1, 3, h, w) tensor in [0, 1].

    Byte v maps to v / 255; grayscale is replicated to three channels.

    Raises:
        ImageIOError: If the file is missing, malformed or not 8-bit RGB/gray
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PNG":
                raise ImageIOError(f"Not a PNG file: {path}")
            if img.mode not in SUPPORTED_MODES:
                raise ImageIOError(f"Unsupported PNG mode {img.mode!r} (need 8-bit RGB or gray): {path}")
            pixels = np.asarray(img, dtype=np.uint8)
    except ImageIOError:
        raise
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise ImageIOError(f"Cannot read PNG {path}: {e}")

    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    chw = pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return Tensor(chw[None])


def quantize(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes, rounding halves away from zero."""
    clamped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def save_png(t: Tensor, path) -> None:
    """
    Write a (1, 3, h, w) tensor as an 8-bit RGB PNG.

    Raises:
        ImageIOError: If the tensor is not a single 3-channel image or the write fails
    """
    path = Path(path)
    if t.data.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ImageIOError(f"save_png: need a (1, 3, h, w) tensor, got {t.shape} for {path}")
    pixels = quantize(t.data[0]).transpose(1, 2, 0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG")
    except OSError as e:
        raise ImageIOError(f"Cannot write PNG {path}: {e}")


# ============================================================
# Dataset directories
# ============================================================

@dataclass(frozen=True)
class PairPaths:
    """Rainy and clean files sharing one filename."""
    name: str
    rain_path: Path
    clean_path: Path


def dataset_scan(root) -> List[PairPaths]:
    """
    Match ``rain/*.png`` with ``norain/*.png`` by filename.

    Raises:
        DatasetError: If a directory is missing, a file has no partner, or nothing matched
    """
    root = Path(root)
    rain_dir, clean_dir = root / RAIN_DIR, root / CLEAN_DIR
    for directory in (rain_dir, clean_dir):
        if not directory.is_dir():
            raise DatasetError(f"Dataset directory missing: {directory}")

    rain = {p.name: p for p in rain_dir.glob("*.png")}
    clean = {p.name: p for p in clean_dir.glob("*.png")}
    offenders = sorted(
        [f"{RAIN_DIR}/{n} (no {CLEAN_DIR}/{n})" for n in rain.keys() - clean.keys()]
        + [f"{CLEAN_DIR}/{n} (no {RAIN_DIR}/{n})" for n in clean.keys() - rain.keys()]
    )
    if offenders:
        raise DatasetError(f"Unmatched dataset files in {root}: {', '.join(offenders)}")
    if not rain:
        raise DatasetError(f"Dataset is empty: {root}")

    pairs = [PairPaths(name=n, rain_path=rain[n], clean_path=clean[n]) for n in sorted(rain)]
    logger.info(f"Found {len(pairs)} image pairs in {root}")
    return pairs


def load_pair(paths: PairPaths) -> RainPair:
    """Load one rainy/clean file pair; R is defined as O - B."""
    o = load_png(paths.rain_path)
    b = load_png(paths.clean_path)
    if o.shape != b.shape:
        raise DatasetError(
            f"Size mismatch for {paths.name}: rain {o.shape[2:]} vs norain {b.shape[2:]}"
        )
    return make_pair(o.data, b.data, name=Path(paths.name).stem)


def load_dataset(paths: Sequence[PairPaths], workers: int = 1) -> List[RainPair]:
    """Load every pair; results keep the scan order whatever the worker count."""
    if workers <= 1:
        return [load_pair(p) for p in paths]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(load_pair, paths))


# ============================================================
# Inference and evaluation inputs
# ============================================================

RAIN_SUFFIX = "_rain"
FREE_SUFFIX = "_free"


def intermediate_paths(derained_path) -> Tuple[Path, Path]:
    """Where derain --dump-intermediates writes R~ and B~ for an output image."""
    path = Path(derained_path)
    return (
        path.with_name(f"{path.stem}{RAIN_SUFFIX}.png"),
        path.with_name(f"{path.stem}{FREE_SUFFIX}.png"),
    )


def _is_intermediate(path: Path, names: set) -> bool:
    for suffix in (RAIN_SUFFIX, FREE_SUFFIX):
        if path.stem.endswith(suffix) and f"{path.stem[:-len(suffix)]}.png" in names:
            return True
    return False


def match_image_dirs(derained_dir, truth_dir) -> List[PairPaths]:
    """
    Pair derained outputs with ground-truth images by filename.

    Intermediate dumps (``<name>_rain.png`` / ``<name>_free.png`` next to
    ``<name>.png``) are not treated as outputs. In the returned entries
    ``rain_path`` is the derained image and ``clean_path`` the ground truth.

    Raises:
        DatasetError: If a directory is missing, files do not match, or nothing matched
    """
    derained_dir, truth_dir = Path(derained_dir), Path(truth_dir)
    for directory in (derained_dir, truth_dir):
        if not directory.is_dir():
            raise DatasetError(f"Directory not found: {directory}")

    derained_all = {p.name: p for p in derained_dir.glob("*.png")}
    derained = {
        n: p for n, p in derained_all.items()
        if not _is_intermediate(p, set(derained_all))
    }
    truth = {p.name: p for p in truth_dir.glob("*.png")}
    if derained_dir.resolve() == truth_dir.resolve():
        truth = dict(derained)

    offenders = sorted(
        [f"{derained_dir}/{n} (no ground truth)" for n in derained.keys() - truth.keys()]
        + [f"{truth_dir}/{n} (no derained output)" for n in truth.keys() - derained.keys()]
    )
    if offenders:
        raise DatasetError(f"Unmatched evaluation files: {', '.join(offenders)}")
    if not derained:
        raise DatasetError(f"No PNG images in {derained_dir}")
    return [PairPaths(name=n, rain_path=derained[n], clean_path=truth[n]) for n in sorted(derained)]


def expand_inputs(inputs: Sequence) -> List[Path]:
    """
    Resolve files and directories to a list of PNG paths.

    Directories expand to their ``*.png`` files in sorted order.

    Raises:
        DatasetError: If an input does not exist or nothing is found
    """
    paths: List[Path] = []
    for item in inputs:
        item = Path(item)
        if item.is_dir():
            paths.extend(sorted(item.glob("*.png")))
        elif item.is_file():
            paths.append(item)
        else:
            raise DatasetError(f"Input not found: {item}")
    if not paths:
        raise DatasetError("No input images found")
    return paths
