"""Blockwise primary quantization step estimation.

A 64x64 window slides over the image with stride 8; each window yields one
estimate of the first `nc` zig-zag quantization steps of the *first*
compression, assigned to the block in the fourth block-row and fourth
block-column of the window.  Three interchangeable backends fill the tensor:

* oracle    -- copies the per-region truth from a forged sample, for
               verifying everything downstream;
* classical -- scores candidate steps by the lattice structure of the
               reconstructed DCT coefficients (grid-aligned analysis only);
* external  -- loads a tensor file produced by a separately trained model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np

from .jpeg import BLOCK, ZIGZAG, LumaImage, QuantMatrix, blockwise_dct
from .metrics import GroundTruth

WINDOW = 64
STRIDE = 8
DEFAULT_NC = 15
TENSOR_MAGIC = b"Q1T1"

# Corrected lattice evidence below this level is treated as "no first-compression
# trace"; the estimate falls back to step 1, mirroring the very-high-quality
# output a learned estimator produces on single-compressed content.
NO_TRACE_SCORE = 0.2

# coefficient sets this close to zero carry no lattice information
ZERO_TOL = 1e-9


class TensorFormatError(ValueError):
    """Malformed tensor file (bad magic, truncation, absurd dimensions)."""


def tensor_shape(rows: int, cols: int) -> tuple[int, int]:
    """Block-grid size of the estimate tensor for an image of the given size."""
    if rows % BLOCK or cols % BLOCK:
        raise ValueError(f"image dims must be multiples of 8, got {(rows, cols)}")
    if rows < WINDOW or cols < WINDOW:
        raise ValueError(f"image must cover one {WINDOW}x{WINDOW} window, got {(rows, cols)}")
    return rows // BLOCK - 7, cols // BLOCK - 7


@dataclass
class Q1Tensor:
    """Per-block estimates of the first nc primary quantization steps.

    Values are stored as given by the backend (possibly fractional) and
    rounded on read-out via :meth:`rounded`.
    """

    data: np.ndarray
    stride: int = STRIDE
    window: int = WINDOW
    source: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("tensor must be r' x c' x nc")
        if data.min(initial=0.0) < 0:
            raise ValueError("quantization step estimates must be non-negative")
        self.data = data

    @property
    def r_prime(self) -> int:
        return self.data.shape[0]

    @property
    def c_prime(self) -> int:
        return self.data.shape[1]

    @property
    def nc(self) -> int:
        return self.data.shape[2]

    def rounded(self) -> np.ndarray:
        return np.rint(self.data).astype(np.int64)


@dataclass
class OracleBackend:
    """Ground-truth estimates; every window reports its central block's region."""

    gt: GroundTruth


@dataclass
class ClassicalBackend:
    """Periodicity scoring of raw DCT coefficients against candidate steps.

    Assumes the analysis grid is aligned with the first-compression grid;
    accuracy degrades sharply for non-aligned first compressions.  `q2` is the
    known matrix of the final compression (from metadata or a CLI flag).
    """

    q2: QuantMatrix
    qmax: int = 20
    include_dc: bool = True
    include_ac: bool = True
    min_score: float = NO_TRACE_SCORE
    min_traced: int = 4

    def __post_init__(self):
        if self.qmax < 2:
            raise ValueError(f"qmax must be >= 2, got {self.qmax}")


@dataclass
class ExternalBackend:
    """Bridge to an externally computed tensor file."""

    path: str


def score_step_candidates(coeffs, qmax: int) -> np.ndarray:
    """Mean lattice-fit score of each candidate step q = 1..qmax.

    A coefficient at distance d from the nearest multiple of q contributes
    max(0, 1 - 2d/q); exact multiples score 1 regardless of q, so divisors of
    the true step tie with it on noiseless data.
    """
    c = np.asarray(coeffs, dtype=np.float64).ravel()
    q = np.arange(1, qmax + 1, dtype=np.float64)
    d = np.abs(c[:, None] - q * np.rint(c[:, None] / q))
    g = np.clip(1.0 - 2.0 * d / q, 0.0, None)
    return g.mean(axis=0)


def pick_step(coeffs, qmax: int) -> int:
    """argmax of the candidate scores; exact ties go to the smaller step."""
    return int(np.argmax(score_step_candidates(coeffs, qmax))) + 1


def _requant_scores(x: np.ndarray, step2: int, qmax: int) -> np.ndarray:
    """Lattice-fit scores with each candidate's multiples requantized by step2.

    A first-compression multiple n*q is observed after the second compression
    at step2*round(n*q/step2), so candidates are scored against those pushed
    lattice points rather than the plain multiples.  Input shape (..., m)
    yields scores of shape (..., qmax).
    """
    q = np.arange(1, qmax + 1, dtype=np.float64)
    n = np.rint(x[..., None] / q)
    d = np.abs(x[..., None] - step2 * np.rint(n * q / step2))
    # nearest pushed point may belong to a neighbouring multiple
    for dn in (-1.0, 1.0):
        np.minimum(d, np.abs(x[..., None] - step2 * np.rint((n + dn) * q / step2)), out=d)
    g = np.clip(1.0 - 2.0 * d / q, 0.0, None)
    return g.mean(axis=-2)


@lru_cache(maxsize=256)
def _null_scores(step2: int, qmax: int) -> np.ndarray:
    """Expected per-candidate score of data carrying only the step2 lattice.

    Subtracting this baseline removes the second compression's own lattice
    from the evidence; without it, step2 and its divisors win every argmax.
    The score of candidate q on the step2 lattice is periodic with period
    q/gcd(q, step2), so one period gives the exact mean.
    """
    out = np.empty(qmax, dtype=np.float64)
    for q in range(1, qmax + 1):
        period = q // gcd(q, step2)
        m = np.arange(period, dtype=np.float64) * step2
        out[q - 1] = _requant_scores(m, step2, qmax)[q - 1]
    out.setflags(write=False)
    return out


def classical_scores(coeffs, step2: int, qmax: int) -> np.ndarray:
    """Requantization-aware scores with the step2-lattice baseline removed."""
    x = np.asarray(coeffs, dtype=np.float64)
    return _requant_scores(x, step2, qmax) - _null_scores(step2, qmax)


def classical_pick(coeffs, step2: int, qmax: int, min_score: float = NO_TRACE_SCORE) -> int:
    """Step choice for one frequency: argmax of corrected scores, smaller on ties.

    All-zero coefficients and sub-threshold evidence both yield step 1.
    """
    x = np.asarray(coeffs, dtype=np.float64).ravel()
    if np.all(np.abs(x) <= ZERO_TOL):
        return 1
    scores = classical_scores(x, step2, qmax)
    if scores.max() < min_score:
        return 1
    return int(np.argmax(scores)) + 1


def classical_estimate_window(window: LumaImage, q2: QuantMatrix, qmax: int = 20,
                              nc: int = DEFAULT_NC,
                              min_score: float = NO_TRACE_SCORE,
                              min_traced: int = 4) -> np.ndarray:
    """Estimate the first nc zig-zag steps of one 64x64 window.

    A genuine first compression leaves its lattice on most of the nc
    frequencies at once, so the no-trace decision is made per window: with at
    least min_traced frequencies above min_score the argmax picks stand for
    every frequency, otherwise the window reports the no-trace vector of
    ones.  Deciding per frequency instead would splice large step jumps into
    otherwise-consistent vectors and shatter the similarity graph downstream.
    """
    px = window.pixels if isinstance(window, LumaImage) else np.asarray(window, float)
    if px.shape != (WINDOW, WINDOW):
        raise ValueError(f"window must be {WINDOW}x{WINDOW}, got {px.shape}")
    coefs = blockwise_dct(px)
    steps2 = q2.prefix(nc)
    out = np.empty(nc, dtype=np.float64)
    traced = 0
    for v in range(nc):
        r, c = ZIGZAG[v]
        x = coefs[:, :, r, c].ravel()
        if np.all(np.abs(x) <= ZERO_TOL):
            out[v] = 1.0
            continue
        scores = classical_scores(x, int(steps2[v]), qmax)
        out[v] = np.argmax(scores) + 1
        traced += scores.max() >= min_score
    if traced < min_traced:
        out[:] = 1.0
    return out


def _classical_tensor(img: LumaImage, backend: ClassicalBackend, nc: int) -> np.ndarray:
    """Whole-image classical estimation, one window per block position.

    Produces exactly the same values as calling classical_estimate_window on
    every window; the blockwise DCT is computed once and windows are strided
    views over it.
    """
    coefs = blockwise_dct(img.pixels)
    r_prime, c_prime = tensor_shape(*img.shape)
    wpb = WINDOW // BLOCK
    windows = np.lib.stride_tricks.sliding_window_view(coefs, (wpb, wpb), axis=(0, 1))
    steps2 = backend.q2.prefix(nc)
    data = np.empty((r_prime, c_prime, nc), dtype=np.float64)
    traced = np.zeros((r_prime, c_prime), dtype=np.int64)
    for v in range(nc):
        if (v == 0 and not backend.include_dc) or (v > 0 and not backend.include_ac):
            data[:, :, v] = 1.0
            continue
        r, c = ZIGZAG[v]
        x = np.ascontiguousarray(
            windows[:, :, r, c, :, :].reshape(r_prime, c_prime, wpb * wpb)
        )
        scores = classical_scores(x, int(steps2[v]), backend.qmax)
        picks = np.argmax(scores, axis=-1) + 1.0
        zero = np.all(np.abs(x) <= ZERO_TOL, axis=-1)
        picks[zero] = 1.0
        data[:, :, v] = picks
        traced += (scores.max(axis=-1) >= backend.min_score) & ~zero
    data[traced < backend.min_traced] = 1.0
    return data


def _oracle_tensor(img: LumaImage, backend: OracleBackend, nc: int) -> np.ndarray:
    r_prime, c_prime = tensor_shape(*img.shape)
    gt = backend.gt
    if gt.labels.shape != (r_prime, c_prime):
        raise ValueError(
            f"ground truth is {gt.labels.shape}, expected {(r_prime, c_prime)}"
        )
    prefixes = np.stack([q.prefix(nc).astype(np.float64) for q in gt.region_q1])
    return prefixes[gt.labels]


def estimate_tensor(img: LumaImage, backend, nc: int = DEFAULT_NC,
                    pad_borders: bool = False) -> Q1Tensor:
    """Run the backend over every 64x64 window of the image.

    With pad_borders the image is mirror-extended so the tensor covers every
    block of the original frame (R/8 x C/8) instead of only the interior;
    ground-truth and external tensors must then match the padded grid.
    """
    if pad_borders:
        padded = np.pad(img.pixels, ((3 * BLOCK, 4 * BLOCK), (3 * BLOCK, 4 * BLOCK)),
                        mode="symmetric")
        img = LumaImage(padded)
    r_prime, c_prime = tensor_shape(*img.shape)
    if isinstance(backend, OracleBackend):
        data = _oracle_tensor(img, backend, nc)
        source = "oracle"
    elif isinstance(backend, ClassicalBackend):
        data = _classical_tensor(img, backend, nc)
        source = "classical"
    elif isinstance(backend, ExternalBackend):
        tensor = read_tensor(backend.path)
        if (tensor.r_prime, tensor.c_prime) != (r_prime, c_prime):
            raise OSError(
                f"tensor file {backend.path} is "
                f"{tensor.r_prime}x{tensor.c_prime}x{tensor.nc}, expected "
                f"{r_prime}x{c_prime} for a {img.shape[0]}x{img.shape[1]} image"
            )
        return tensor
    else:
        raise ValueError(f"unknown estimator backend: {backend!r}")
    return Q1Tensor(data=data, source=source)


def write_tensor(t: Q1Tensor, path) -> None:
    """Binary tensor file: magic, u32le dims, f32le data in (i, j, v) order."""
    path = Path(path)
    header = TENSOR_MAGIC + struct.pack("<III", t.r_prime, t.c_prime, t.nc)
    body = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    path.write_bytes(header + body)
    sidecar = {
        "stride": t.stride,
        "window": t.window,
        "source": t.source,
        "rounded": bool(np.all(t.data == np.rint(t.data))),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_tensor(path) -> Q1Tensor:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16:
        raise TensorFormatError(f"header truncated: {len(raw)} bytes, need 16")
    magic = raw[:4]
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"unsupported version: magic {magic!r}")
    r_prime, c_prime, nc = struct.unpack("<III", raw[4:16])
    count = r_prime * c_prime * nc
    if count > 2**31:
        raise TensorFormatError(
            f"dimension overflow: {r_prime} x {c_prime} x {nc} elements"
        )
    body = raw[16:]
    if len(body) != 4 * count:
        raise TensorFormatError(
            f"data truncated: {len(body)} bytes, expected {4 * count}"
        )
    data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    data = data.reshape(r_prime, c_prime, nc)
    tensor = Q1Tensor(data=data)
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        tensor.stride = int(meta.get("stride", STRIDE))
        tensor.window = int(meta.get("window", WINDOW))
        tensor.source = str(meta.get("source", ""))
    return tensor
