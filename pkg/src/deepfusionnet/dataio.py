"""Image and dataset handling.

Datasets are directories of paired PNGs matched by filename stem:

    <root>/<split>/low/*.png            darkened inputs
    <root>/<split>/high/*.png           reference targets
    <root>/<split>/lowres_blurred/*.png half-resolution degraded inputs
    <root>/<split>/highres/*.png        full-resolution targets

The first pair of folders serves the enhancement task, the second the 2x
task.  ``make_sr_dataset`` manufactures the second layout from any folder
of even-sided PNGs: Gaussian blur with reflect padding, then 2x2
box-average downsampling.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .tensor import ShapeError, Tensor4, derived_rng, make_rng

PAIR_DIRS = {
    "enhancement": ("low", "high"),
    "sr": ("lowres_blurred", "highres"),
}


def load_png(path, dtype=np.float32) -> Tensor4:
    """Decode a PNG to a (1, 3, h, w) tensor scaled to [0, 1].

    RGBA images lose their alpha channel with a warning; any other mode
    (grayscale, palette) is rejected rather than silently converted.
    """
    with Image.open(path) as img:
        if img.mode == "RGBA":
            warnings.warn(f"{path}: dropping alpha channel")
            img = img.convert("RGB")
        if img.mode != "RGB":
            raise ValueError(f"{path}: need an RGB image, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return Tensor4(arr.transpose(2, 0, 1)[None].astype(dtype))


def save_png(t: Tensor4, path) -> None:
    """Encode a (1, 3, h, w) tensor in [0, 1] as an 8-bit PNG."""
    if t.n != 1 or t.c != 3:
        raise ShapeError(f"save_png needs a (1, 3, h, w) tensor, got {t.shape}")
    arr = np.clip(t.data[0], 0.0, 1.0).transpose(1, 2, 0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8)).save(path, format="PNG")


def blur_sigma(kernel_size: int) -> float:
    """Kernel-size-matched Gaussian width for the degradation blur."""
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(kernel_size: int) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ShapeError(f"blur kernel must be odd and positive, got {kernel_size}")
    sigma = blur_sigma(kernel_size)
    c = np.arange(kernel_size, dtype=np.float64) - (kernel_size - 1) / 2
    g = np.exp(-(c ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(x: Tensor4, kernel_size: int) -> Tensor4:
    """Separable Gaussian blur with reflect padding; shape is preserved."""
    g = gaussian_kernel1d(kernel_size)
    pad = kernel_size // 2
    d = x.data.astype(np.float64)
    if pad:
        if x.h <= pad or x.w <= pad:
            raise ShapeError(f"image {x.h}x{x.w} too small to reflect-pad by {pad}")
        d = np.pad(d, ((0, 0), (0, 0), (pad, pad), (0, 0)), mode="reflect")
        d = sliding_window_view(d, kernel_size, axis=2) @ g
        d = np.pad(d, ((0, 0), (0, 0), (0, 0), (pad, pad)), mode="reflect")
        d = sliding_window_view(d, kernel_size, axis=3) @ g
    return Tensor4(d.astype(x.dtype))


def box_downsample2(x: Tensor4) -> Tensor4:
    """Average each 2x2 block; sides must be even."""
    if x.h % 2 or x.w % 2:
        raise ShapeError(f"downsample needs even sides, got {x.h}x{x.w}")
    d = x.data.reshape(x.n, x.c, x.h // 2, 2, x.w // 2, 2).mean(axis=(3, 5))
    return Tensor4(d.astype(x.dtype))


def make_sr_pair(high: Tensor4, kernel_size: int = 5) -> tuple[Tensor4, Tensor4]:
    """Degrade a clean image into its half-resolution training input."""
    return box_downsample2(gaussian_blur(high, kernel_size)), high


def make_sr_dataset(src_dir, out_root, split: str,
                    kernel_sizes=(3, 5, 7), seed: int = 0) -> int:
    """Build `<out_root>/<split>/{lowres_blurred,highres}` from a folder of
    PNGs; returns the number of pairs written.

    Each image gets a blur kernel size drawn from ``kernel_sizes`` by a
    generator seeded with ``seed``, walking files in sorted order, so the
    same seed reproduces the dataset bitwise.
    """
    sizes = tuple(int(k) for k in kernel_sizes)
    if not sizes or any(k < 3 or k % 2 == 0 for k in sizes):
        raise ValueError(f"kernel sizes must be odd and >= 3, got {kernel_sizes!r}")
    src = Path(src_dir)
    files = sorted(src.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no .png files in {src}")
    low_dir = Path(out_root) / split / PAIR_DIRS["sr"][0]
    high_dir = Path(out_root) / split / PAIR_DIRS["sr"][1]
    low_dir.mkdir(parents=True, exist_ok=True)
    high_dir.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    for f in files:
        k = sizes[int(rng.integers(len(sizes)))]
        high = load_png(f)
        low, high = make_sr_pair(high, k)
        save_png(low, low_dir / f.name)
        save_png(high, high_dir / f.name)
    return len(files)


def load_paired_dataset(root, split: str, task: str, dtype=np.float32) -> list:
    """Load every (input, target, stem) triple for one split, sorted by stem.

    Both folders must hold exactly the same stems; enhancement pairs must
    match in size and 2x pairs must differ by exactly a factor of two.
    """
    if task not in PAIR_DIRS:
        raise ValueError(f"task must be one of {sorted(PAIR_DIRS)}, got {task!r}")
    in_name, target_name = PAIR_DIRS[task]
    in_dir = Path(root) / split / in_name
    target_dir = Path(root) / split / target_name
    for d in (in_dir, target_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset folder missing: {d}")
    in_stems = {p.stem: p for p in in_dir.glob("*.png")}
    target_stems = {p.stem: p for p in target_dir.glob("*.png")}
    missing = sorted(set(in_stems) ^ set(target_stems))
    if missing:
        raise ValueError(f"unpaired stems under {Path(root) / split}: {', '.join(missing[:5])}")
    if not in_stems:
        raise ValueError(f"no image pairs under {Path(root) / split}")
    pairs = []
    for stem in sorted(in_stems):
        x = load_png(in_stems[stem], dtype=dtype)
        y = load_png(target_stems[stem], dtype=dtype)
        if task == "enhancement" and x.shape != y.shape:
            raise ShapeError(f"{stem}: input {x.shape} and target {y.shape} differ")
        if task == "sr" and (y.h, y.w) != (2 * x.h, 2 * x.w):
            raise ShapeError(f"{stem}: target {y.h}x{y.w} is not 2x input {x.h}x{x.w}")
        pairs.append((x, y, stem))
    return pairs


def batch_iter(pairs: list, batch_size: int, seed: int, epoch: int):
    """Yield (inputs, targets) batches in an epoch-keyed shuffled order.

    The permutation depends only on (seed, epoch), so a resumed run walks
    the same batches as an uninterrupted one.  The final short batch is
    kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = derived_rng(seed, epoch).permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        xs = np.concatenate([p[0].data for p in chunk], axis=0)
        ys = np.concatenate([p[1].data for p in chunk], axis=0)
        yield Tensor4(xs), Tensor4(ys)
