"""In-memory containers shared by every stage of the pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class SparseGateError(Exception):
    """Base class for recoverable data and configuration errors."""


class DataError(SparseGateError):
    """Input tensors are missing, malformed or dimensionally inconsistent."""


class Activation(str, enum.Enum):
    REGLU = "reglu"
    DRELU = "drelu"

    @classmethod
    def parse(cls, value: "str | Activation") -> "Activation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DataError(f"unknown activation {value!r}; expected one of "
                            f"{[a.value for a in cls]}") from None


@dataclass(frozen=True)
class FfnWeights:
    """Gate/up/down matrices of one gated feed-forward block.

    ``gate`` and ``up`` are ``D x d``; ``down`` is ``d x D``.
    """

    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray
    activation: Activation = Activation.REGLU

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation.parse(self.activation))
        for name in ("gate", "up", "down"):
            if np.ndim(getattr(self, name)) != 2:
                raise DataError(f"{name} must be a matrix, got ndim={np.ndim(getattr(self, name))}")
        D, d = self.gate.shape
        if d < 1 or D < 1:
            raise DataError(f"gate has empty shape {self.gate.shape}")
        if self.up.shape != (D, d):
            raise DataError(f"up has shape {self.up.shape}, expected {(D, d)} to match gate")
        if self.down.shape != (d, D):
            raise DataError(f"down has shape {self.down.shape}, expected {(d, D)}")

    @property
    def d(self) -> int:
        return self.gate.shape[1]

    @property
    def D(self) -> int:
        return self.gate.shape[0]


@dataclass(frozen=True)
class ActivationBatch:
    """Hidden states with tokens as columns (``d x N``)."""

    x_cols: np.ndarray

    def __post_init__(self):
        if np.ndim(self.x_cols) != 2:
            raise DataError(f"activation batch must be d x N, got ndim={np.ndim(self.x_cols)}")
        if self.x_cols.shape[1] < 1:
            raise DataError("activation batch holds no tokens")
        if not np.all(np.isfinite(self.x_cols)):
            raise DataError("activation batch contains non-finite entries")

    @property
    def d(self) -> int:
        return self.x_cols.shape[0]

    @property
    def N(self) -> int:
        return self.x_cols.shape[1]


@dataclass(frozen=True)
class Predictor:
    """Affine low-rank predictor ``H(A @ B @ x + bias)``."""

    A: np.ndarray
    B: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if np.ndim(self.A) != 2 or np.ndim(self.B) != 2 or np.ndim(self.bias) != 1:
            raise DataError("predictor expects A, B as matrices and bias as a vector")
        D, r = self.A.shape
        if self.B.shape[0] != r:
            raise DataError(f"rank mismatch: A is {self.A.shape} but B is {self.B.shape}")
        if self.bias.shape != (D,):
            raise DataError(f"bias has shape {self.bias.shape}, expected ({D},)")
        if r < 1 or r > min(D, self.B.shape[1]):
            raise DataError(f"rank {r} outside [1, min(D, d)] = [1, {min(D, self.B.shape[1])}]")
        for name in ("A", "B", "bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"predictor field {name} has non-finite entries")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def D(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[1]

    def with_bias(self, bias: np.ndarray) -> "Predictor":
        return Predictor(self.A, self.B, np.asarray(bias, dtype=np.float64))
