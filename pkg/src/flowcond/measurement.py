"""Differentiable linear forward operators.

Every operator provides ``apply`` (arrays), ``apply_node`` (tape), and
``vjp`` (the adjoint A^T u).  The matrix-backed kinds route arrays through
the same row-batch matmul as the tape path, so both paths agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de


class MeasurementError(ValueError):
    pass


def _as_rows(x, dim, what):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise MeasurementError(f"{what}: expected length {dim}, got {arr.shape[0]}")
        return arr[None, :], True
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr, False
    raise MeasurementError(f"{what}: expected ({dim},) or (n, {dim}), got {arr.shape}")


class MeasurementOp:
    """Base class; concrete kinds fill in the linear map."""

    kind: str
    input_dim: int
    output_dim: int

    def apply(self, x):
        raise NotImplementedError

    def vjp(self, x, u):
        raise NotImplementedError

    def apply_node(self, x: de.Node) -> de.Node:
        raise NotImplementedError

    def descriptor(self) -> dict:
        """Serializable reconstruction data (see the persistence module)."""
        raise NotImplementedError


class MaskOp(MeasurementOp):
    """Observe a fixed index set of the flattened signal."""

    kind = "mask"

    def __init__(self, indices, input_dim: int):
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or len(idx) == 0:
            raise MeasurementError("mask: need a non-empty 1-d index set")
        if len(np.unique(idx)) != len(idx):
            raise MeasurementError("mask: duplicate indices")
        if idx.min() < 0 or idx.max() >= input_dim:
            raise MeasurementError("mask: index out of range")
        self.indices = idx
        self.input_dim = int(input_dim)
        self.output_dim = len(idx)

    def apply(self, x):
        rows, single = _as_rows(x, self.input_dim, "apply")
        out = rows[:, self.indices]
        return out[0] if single else out

    def vjp(self, x, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.output_dim,):
            raise MeasurementError(f"vjp: expected ({self.output_dim},), got {u.shape}")
        out = np.zeros(self.input_dim)
        out[self.indices] = u
        return out

    def apply_node(self, x):
        return de.take(x, self.indices, axis=1)

    def descriptor(self):
        return {"kind": self.kind, "input_dim": self.input_dim,
                "indices": self.indices.tolist()}


class _MatrixOp(MeasurementOp):
    """Shared machinery for kinds realized as a dense m x d matrix."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = matrix
        self.output_dim, self.input_dim = matrix.shape

    def apply(self, x):
        rows, single = _as_rows(x, self.input_dim, "apply")
        out = rows @ self.matrix.T
        return out[0] if single else out

    def vjp(self, x, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.output_dim,):
            raise MeasurementError(f"vjp: expected ({self.output_dim},), got {u.shape}")
        return self.matrix.T @ u

    def apply_node(self, x):
        return de.matmul(x, x.graph.constant(self.matrix.T))


class GaussianOp(_MatrixOp):
    """Random projection with N(0, 1/m) entries, reconstructible from its seed."""

    kind = "gaussian"

    def __init__(self, seed: int, m: int, d: int):
        if m < 1 or d < 1:
            raise MeasurementError("gaussian: need m >= 1 and d >= 1")
        rng = np.random.default_rng(seed)
        super().__init__(rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, d)))
        self.seed = int(seed)

    def descriptor(self):
        return {"kind": self.kind, "seed": self.seed,
                "m": self.output_dim, "d": self.input_dim}


def make_gaussian_op(seed: int, m: int, d: int) -> GaussianOp:
    return GaussianOp(seed, m, d)


class Downsample2xOp(_MatrixOp):
    """Average non-overlapping 2x2 pixel blocks per channel (channel-last)."""

    kind = "downsample2x"

    def __init__(self, height: int, width: int, channels: int = 1):
        if height % 2 or width % 2:
            raise MeasurementError("downsample2x: height and width must be even")
        self.height, self.width, self.channels = height, width, channels
        d = height * width * channels
        m = (height // 2) * (width // 2) * channels
        mat = np.zeros((m, d))
        idx = np.arange(d).reshape(height, width, channels)
        out = 0
        for i in range(0, height, 2):
            for j in range(0, width, 2):
                for c in range(channels):
                    mat[out, idx[i:i + 2, j:j + 2, c].ravel()] = 0.25
                    out += 1
        super().__init__(mat)

    def descriptor(self):
        return {"kind": self.kind, "height": self.height,
                "width": self.width, "channels": self.channels}


class GrayscaleOp(_MatrixOp):
    """Average the channels of every pixel (channel-last)."""

    kind = "grayscale"

    def __init__(self, height: int, width: int, channels: int):
        if channels < 2:
            raise MeasurementError("grayscale: needs >= 2 channels")
        self.height, self.width, self.channels = height, width, channels
        d = height * width * channels
        m = height * width
        mat = np.zeros((m, d))
        idx = np.arange(d).reshape(height, width, channels)
        for p, (i, j) in enumerate(np.ndindex(height, width)):
            mat[p, idx[i, j, :]] = 1.0 / channels
        super().__init__(mat)

    def descriptor(self):
        return {"kind": self.kind, "height": self.height,
                "width": self.width, "channels": self.channels}


@dataclass
class Observation:
    """A measured vector y* = A(x) (+ optional recorded noise)."""

    y_star: np.ndarray
    op: MeasurementOp
    ground_truth: np.ndarray | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.y_star = np.asarray(self.y_star, dtype=np.float64)
        if self.y_star.shape != (self.op.output_dim,):
            raise MeasurementError(
                f"observation length {self.y_star.shape} != ({self.op.output_dim},)")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
            if self.ground_truth.shape != (self.op.input_dim,):
                raise MeasurementError("ground truth length mismatch")


def make_observation(op: MeasurementOp, x_true, noise_sigma: float = 0.0,
                     rng: np.random.Generator | None = None) -> Observation:
    x_true = np.asarray(x_true, dtype=np.float64)
    y = op.apply(x_true)
    if noise_sigma > 0.0:
        if rng is None:
            raise MeasurementError("noise requested without an rng")
        y = y + noise_sigma * rng.standard_normal(op.output_dim)
    return Observation(y_star=y, op=op, ground_truth=x_true, noise_sigma=noise_sigma)


def save_mask_file(path, indices) -> None:
    with open(path, "w", encoding="ascii") as f:
        for i in np.asarray(indices, dtype=np.intp):
            f.write(f"{int(i)}\n")


def load_mask_file(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    try:
        return np.asarray([int(ln) for ln in lines], dtype=np.intp)
    except ValueError as e:
        raise MeasurementError(f"mask file {path}: {e}") from e
