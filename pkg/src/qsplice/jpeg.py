"""JPEG compression arithmetic on the luminance channel.

Implements quality-factor tables, 8x8 blockwise DCT, quantization, and
single/double compression in the pixel domain with arbitrary grid shifts.
No entropy coding and no .jpg container I/O: only the DCT-domain statistics
matter here, so compression is simulated as quantize/dequantize plus the
round-and-clip of pixel storage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

# ITU-T T.81 Annex K luminance table; quality_to_matrix(50) returns it unscaled.
BASE_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

BLOCK = 8
PIXEL_MIN = -128.0
PIXEL_MAX = 127.0


def _zigzag_positions() -> list[tuple[int, int]]:
    order = sorted(
        ((r, c) for r in range(BLOCK) for c in range(BLOCK)),
        key=lambda rc: (rc[0] + rc[1], rc[0] if (rc[0] + rc[1]) % 2 else rc[1]),
    )
    return order


ZIGZAG = _zigzag_positions()
_ZIG_ROWS = np.array([r for r, _ in ZIGZAG])
_ZIG_COLS = np.array([c for _, c in ZIGZAG])


@dataclass(frozen=True)
class QuantMatrix:
    """An 8x8 table of integer quantization steps, each in 1..255."""

    steps: np.ndarray
    label: str = ""

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.shape != (BLOCK, BLOCK):
            raise ValueError(f"quantization table must be 8x8, got {steps.shape}")
        if steps.min() < 1 or steps.max() > 255:
            raise ValueError("quantization steps must lie in 1..255")
        object.__setattr__(self, "steps", steps)

    def zigzag(self) -> np.ndarray:
        """The 64 steps in zig-zag (low-to-high frequency) order."""
        return self.steps[_ZIG_ROWS, _ZIG_COLS]

    def prefix(self, nc: int = 15) -> np.ndarray:
        return self.zigzag()[:nc]

    def to_json(self) -> dict:
        return {"steps": self.steps.tolist(), "label": self.label}

    @classmethod
    def from_json(cls, obj: dict) -> "QuantMatrix":
        return cls(steps=np.array(obj["steps"]), label=obj.get("label", ""))

    def __eq__(self, other):
        return isinstance(other, QuantMatrix) and np.array_equal(self.steps, other.steps)

    def __hash__(self):
        return hash(self.steps.tobytes())


@dataclass(frozen=True)
class GridShift:
    """Pixel offset of the 8x8 compression grid, in 0..7 per axis."""

    r: int = 0
    c: int = 0

    def __post_init__(self):
        if not (0 <= self.r <= 7 and 0 <= self.c <= 7):
            raise ValueError(f"grid shift must lie in 0..7, got ({self.r}, {self.c})")

    @property
    def aligned(self) -> bool:
        return self.r == 0 and self.c == 0


@dataclass
class LumaImage:
    """Level-shifted luminance samples (nominal range -128..127), dims multiple of 8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("luma image must be 2-D")
        if px.shape[0] % BLOCK or px.shape[1] % BLOCK:
            raise ValueError(f"image dims must be multiples of 8, got {px.shape}")
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def quality_to_matrix(qf: int) -> QuantMatrix:
    """Scale the base luminance table by the standard IJG quality rule."""
    if not isinstance(qf, (int, np.integer)) or isinstance(qf, bool):
        raise ValueError(f"quality factor must be an integer, got {qf!r}")
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must lie in 1..100, got {qf}")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    steps = (BASE_LUMA_TABLE * scale + 50) // 100
    steps = np.clip(steps, 1, 255)
    return QuantMatrix(steps=steps, label=f"QF={qf}")


def dct_matrix() -> np.ndarray:
    """Orthonormal 8-point type-II DCT matrix."""
    k = np.arange(BLOCK)
    m = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / (2 * BLOCK))
    m *= np.sqrt(2.0 / BLOCK)
    m[0] *= np.sqrt(0.5)
    return m


_DCT = dct_matrix()


def split_blocks(pixels: np.ndarray) -> np.ndarray:
    """R x C array -> (R/8, C/8, 8, 8) block view (copy)."""
    rows, cols = pixels.shape
    return pixels.reshape(rows // BLOCK, BLOCK, cols // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def merge_blocks(blocks: np.ndarray) -> np.ndarray:
    nby, nbx = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nby * BLOCK, nbx * BLOCK)


def blockwise_dct(pixels: np.ndarray) -> np.ndarray:
    """Forward orthonormal DCT of every aligned 8x8 block."""
    blocks = split_blocks(np.asarray(pixels, dtype=np.float64))
    return np.einsum("ux,ijxy,vy->ijuv", _DCT, blocks, _DCT, optimize=True)


def blockwise_idct(coefs: np.ndarray) -> np.ndarray:
    blocks = np.einsum("ux,ijuv,vy->ijxy", _DCT, coefs, _DCT, optimize=True)
    return merge_blocks(blocks)


def quantize_indices(coefs: np.ndarray, q: QuantMatrix) -> np.ndarray:
    """Quantized coefficient indices round(coef/step) per block."""
    return np.rint(coefs / q.steps)


def dequantize(indices: np.ndarray, q: QuantMatrix) -> np.ndarray:
    return indices * q.steps


def shift_forward(pixels: np.ndarray, shift: GridShift) -> np.ndarray:
    """Crop the top-left (r, c) pixels and mirror-pad to multiples of 8.

    The compression grid of the returned array sits at offset (r, c) of the
    original frame.
    """
    work = pixels[shift.r :, shift.c :]
    pad_r = (-work.shape[0]) % BLOCK
    pad_c = (-work.shape[1]) % BLOCK
    if pad_r or pad_c:
        work = np.pad(work, ((0, pad_r), (0, pad_c)), mode="symmetric")
    return work


def shift_back(work: np.ndarray, shift: GridShift, out_shape: tuple[int, int]) -> np.ndarray:
    """Undo shift_forward: drop padding, restore the cropped band by mirroring."""
    rows, cols = out_shape
    core = work[: rows - shift.r, : cols - shift.c]
    if shift.r or shift.c:
        core = np.pad(core, ((shift.r, 0), (shift.c, 0)), mode="symmetric")
    return core


def compress_once(img: LumaImage, q: QuantMatrix, shift: GridShift = GridShift()) -> LumaImage:
    """One JPEG compression pass in the pixel domain.

    Quantizes the blockwise DCT on a grid translated by `shift`, reconstructs,
    and simulates pixel storage by rounding to integers and clipping to the
    valid luminance range.
    """
    work = shift_forward(img.pixels, shift)
    coefs = blockwise_dct(work)
    coefs = dequantize(quantize_indices(coefs, q), q)
    rec = blockwise_idct(coefs)
    out = shift_back(rec, shift, img.shape)
    out = np.clip(np.rint(out), PIXEL_MIN, PIXEL_MAX)
    return LumaImage(out)


def double_compress(
    img: LumaImage, q1: QuantMatrix, shift1: GridShift, q2: QuantMatrix
) -> LumaImage:
    """First compression on a possibly shifted grid, second aligned.

    shift1 == (0, 0) yields the aligned (A-DJPEG) case, anything else the
    non-aligned (NA-DJPEG) case.
    """
    return compress_once(compress_once(img, q1, shift1), q2, GridShift(0, 0))


def to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma from an 8-bit RGB array."""
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def load_luma(path) -> LumaImage:
    """Read a PNG/PGM image as level-shifted luminance, cropped to multiples of 8."""
    with Image.open(path) as im:
        arr = np.asarray(im if im.mode == "L" else im.convert("RGB"))
    if arr.ndim == 3:
        arr = to_luma(arr.astype(np.float64))
    pixels = np.rint(arr.astype(np.float64)) - 128.0
    rows = pixels.shape[0] - pixels.shape[0] % BLOCK
    cols = pixels.shape[1] - pixels.shape[1] % BLOCK
    if rows == 0 or cols == 0:
        raise ValueError(f"image too small for one 8x8 block: {pixels.shape}")
    return LumaImage(pixels[:rows, :cols])


def save_luma(img: LumaImage, path) -> None:
    """Write as 8-bit grayscale PNG/PGM (format chosen by extension)."""
    arr = np.clip(np.rint(img.pixels) + 128.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_quant_matrix(q: QuantMatrix, path) -> None:
    Path(path).write_text(json.dumps(q.to_json(), indent=1, sort_keys=True))


def load_quant_matrix(path) -> QuantMatrix:
    return QuantMatrix.from_json(json.loads(Path(path).read_text()))
