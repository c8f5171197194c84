"""Synthetic blur-pair generation, paired-dataset IO, and quality metrics.

The degradation model is a normalized motion-trajectory kernel convolved
with the sharp image (mirror boundary) plus Gaussian noise in 8-bit units.
Images on disk are binary PPM (P6, maxval 255); arrays in memory are HWC
uint8. PSNR is computed on 8-bit RGB over all channels; SSIM on Rec.601
luma with the standard 11x11 Gaussian window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

PSNR_IDENTICAL = float("inf")

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_DYNAMIC_RANGE = 255.0


class PpmError(Exception):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: malformed PPM at byte {offset}: {message}")
        self.offset = offset


@dataclass
class BlurKernel:
    """Odd-sized nonnegative kernel summing to one."""

    size: int
    weights: np.ndarray

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError("kernel size must be odd and >= 3")
        if self.weights.shape != (self.size, self.size):
            raise ValueError(
                f"kernel weights shape {self.weights.shape} != "
                f"({self.size}, {self.size})")
        if np.any(self.weights < 0):
            raise ValueError("kernel weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ValueError("kernel weights must sum to 1")


@dataclass
class ImagePair:
    blurred: np.ndarray
    sharp: np.ndarray
    identifier: str

    def __post_init__(self):
        if self.blurred.shape != self.sharp.shape:
            raise ValueError(
                f"pair '{self.identifier}': blurred {self.blurred.shape} vs "
                f"sharp {self.sharp.shape}")
        if self.blurred.ndim != 3 or self.blurred.shape[2] != 3:
            raise ValueError(
                f"pair '{self.identifier}': images must be HWC with 3 "
                f"channels")


@dataclass
class DatasetIndex:
    root: Path
    split: str
    identifiers: list
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.identifiers)

    def _dir(self) -> Path:
        base = self.root / self.split
        return base if base.is_dir() else self.root

    def pair_paths(self, identifier: str) -> tuple:
        d = self._dir()
        return d / "blur" / identifier, d / "sharp" / identifier

    def load_pair(self, identifier: str) -> ImagePair:
        bp, sp = self.pair_paths(identifier)
        return ImagePair(read_image(bp), read_image(sp), identifier)


# ----------------------------------------------------------- blur synthesis

def gen_motion_kernel(seed: int, size: int, steps: int) -> BlurKernel:
    """Rasterize a random piecewise-linear trajectory into a blur kernel.

    `steps` is the number of trajectory points; steps=1 yields a
    single-point (delta) kernel. Samples leaving the grid are clamped.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 3")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = np.zeros((size, size), dtype=np.float64)
    center = (size - 1) / 2.0

    pts = [np.array([center, center])]
    angle = rng.uniform(0.0, 2.0 * math.pi)
    for _ in range(steps - 1):
        angle += rng.normal(0.0, 0.6)
        length = rng.uniform(0.4, max(0.8, size / 4.0))
        nxt = pts[-1] + length * np.array([math.sin(angle), math.cos(angle)])
        pts.append(np.clip(nxt, 0.0, size - 1))

    def splat(y: float, x: float, w: float) -> None:
        y0, x0 = int(math.floor(y)), int(math.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < size and 0 <= xx < size and wy * wx > 0:
                    grid[yy, xx] += w * wy * wx

    if steps == 1:
        splat(center, center, 1.0)
    else:
        # equal exposure time per segment, 16 samples each
        per = 16
        for a, b in zip(pts[:-1], pts[1:]):
            for t in np.linspace(0.0, 1.0, per, endpoint=False):
                p = a + t * (b - a)
                splat(p[0], p[1], 1.0 / per)

    total = grid.sum()
    grid /= total
    return BlurKernel(size, grid)


def apply_blur(sharp: np.ndarray, kernel: BlurKernel, noise_sigma: float,
               seed: int) -> np.ndarray:
    """I_blur = kernel (*) I_sharp + noise, mirror boundary, 8-bit output."""
    h, w = sharp.shape[:2]
    k = kernel.size
    if k >= min(h, w):
        raise ValueError(
            f"kernel size {k} must be smaller than image {h}x{w}")
    c = k // 2
    flipped = kernel.weights[::-1, ::-1]
    img = sharp.astype(np.float64)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        padded = np.pad(img[:, :, ch], c, mode="reflect")
        win = sliding_window_view(padded, (k, k))
        out[:, :, ch] = np.einsum("hwab,ab->hw", win, flipped)
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(seed))
        out = out + rng.normal(0.0, noise_sigma, out.shape)
    return np.floor(np.clip(out, 0, 255) + 0.5).astype(np.uint8)


def random_crop_pair(pair: ImagePair, crop: int, rng) -> ImagePair:
    """Identical crop window applied to both images; rng is a seed or a
    Generator."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    h, w = pair.blurred.shape[:2]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return ImagePair(
        pair.blurred[top:top + crop, left:left + crop].copy(),
        pair.sharp[top:top + crop, left:left + crop].copy(),
        pair.identifier)


def normalize(image: np.ndarray) -> Tensor:
    """8-bit HWC image -> float32 CHW tensor in [-1, 1]."""
    arr = image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def denormalize(t) -> np.ndarray:
    """Inverse of normalize with round-half-away and clipping."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("denormalize expects a single image")
        arr = arr[0]
    scaled = (arr.astype(np.float64) + 1.0) * 127.5
    out = np.floor(np.clip(scaled, 0, 255) + 0.5).astype(np.uint8)
    return out.transpose(1, 2, 0)


# ----------------------------------------------------------------- metrics

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(255^2 / MSE) over all channels; +inf for identical images."""
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(_DYNAMIC_RANGE ** 2 / mse)


def _luma(img: np.ndarray) -> np.ndarray:
    f = img.astype(np.float64)
    return 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity on Rec.601 luma, 11x11 Gaussian window
    (sigma 1.5), K1=0.01, K2=0.03, dynamic range 255, valid windows only."""
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(
            f"ssim needs images at least {_SSIM_WINDOW}x{_SSIM_WINDOW}, "
            f"got {h}x{w}")
    ya, yb = _luma(a), _luma(b)
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)

    def stats(img):
        v = sliding_window_view(img, (_SSIM_WINDOW, _SSIM_WINDOW))
        return np.tensordot(v, win, axes=([2, 3], [0, 1]))

    mu_a = stats(ya)
    mu_b = stats(yb)
    e_aa = stats(ya * ya)
    e_bb = stats(yb * yb)
    e_ab = stats(ya * yb)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    c1 = (_SSIM_K1 * _DYNAMIC_RANGE) ** 2
    c2 = (_SSIM_K2 * _DYNAMIC_RANGE) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------- PPM files

def read_image(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> HWC uint8."""
    path = Path(path)
    blob = path.read_bytes()
    pos = 0

    def skip_ws_and_comments(p: int) -> int:
        while p < len(blob):
            ch = blob[p:p + 1]
            if ch in b" \t\r\n":
                p += 1
            elif ch == b"#":
                while p < len(blob) and blob[p:p + 1] != b"\n":
                    p += 1
            else:
                break
        return p

    def token(p: int) -> tuple:
        p = skip_ws_and_comments(p)
        start = p
        while p < len(blob) and blob[p:p + 1] not in b" \t\r\n#":
            p += 1
        if start == p:
            raise PpmError(path, start, "expected a header token")
        return blob[start:p], p

    magic, pos = token(pos)
    if magic != b"P6":
        raise PpmError(path, 0, f"bad magic {magic!r}, expected b'P6'")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = token(pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PpmError(path, pos - len(tok),
                           f"{name} is not an integer: {tok!r}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PpmError(path, 2, f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PpmError(path, pos, f"maxval must be 255, got {maxval}")
    if pos >= len(blob) or blob[pos:pos + 1] not in b" \t\r\n":
        raise PpmError(path, pos, "expected single whitespace after maxval")
    pos += 1
    need = width * height * 3
    if len(blob) - pos < need:
        raise PpmError(path, pos,
                       f"payload truncated: need {need} bytes, have "
                       f"{len(blob) - pos}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, 3).copy()


def write_image(image: np.ndarray, path) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("write_image expects an HWC uint8 RGB array")
    h, w = image.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(image).tobytes())


def load_dataset(root, split: str = "train") -> DatasetIndex:
    """Index aligned blur/sharp PPM pairs; orphans are warned and skipped."""
    root = Path(root)
    base = root / split if (root / split).is_dir() else root
    blur_dir = base / "blur"
    sharp_dir = base / "sharp"
    if not blur_dir.is_dir() or not sharp_dir.is_dir():
        raise FileNotFoundError(
            f"dataset root {base} must contain blur/ and sharp/ "
            f"subdirectories")
    blur_names = {p.name for p in blur_dir.glob("*.ppm")}
    sharp_names = {p.name for p in sharp_dir.glob("*.ppm")}
    warnings = []
    for name in sorted(blur_names - sharp_names):
        warnings.append(f"unpaired file skipped: blur/{name} has no sharp "
                        f"counterpart")
    for name in sorted(sharp_names - blur_names):
        warnings.append(f"unpaired file skipped: sharp/{name} has no blur "
                        f"counterpart")
    identifiers = sorted(blur_names & sharp_names)
    return DatasetIndex(root=root, split=split, identifiers=identifiers,
                        warnings=warnings)
