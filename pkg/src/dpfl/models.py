"""Fitted model containers and their JSON layout.

All three shapes predict from a predictor matrix whose first column is the
intercept ``1``:

* ``LinearModel``: ``Y = X @ beta``
* ``PiecewiseLinearModel``: ``y = beta[k].T @ x`` with ``k`` the nearest centroid
* ``KernelModel``: ``y = sum_i a_i k(x_i, x) + b``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Normalization, VariableSchema
from .errors import SchemaError


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LinearModel:
    beta: np.ndarray
    schema: VariableSchema
    normalization: Optional[Normalization] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim == 1:
            beta = beta.reshape(-1, 1)
        if beta.shape != (self.schema.n_x, self.schema.n_y):
            raise SchemaError(f"beta shape {beta.shape} does not match schema ({self.schema.n_x}, {self.schema.n_y})")
        if not np.all(np.isfinite(beta)):
            raise ValueError("non-finite coefficients")
        object.__setattr__(self, "beta", _frozen(beta))

    def predict(self, X) -> np.ndarray:
        """Predict in the coordinates of the data the model was fit on."""
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.beta

    def denormalized(self) -> "LinearModel":
        """Equivalent model acting on raw (unnormalized) predictors and returning raw responses."""
        n = self.normalization
        if n is None:
            return self
        b = self.beta / n.x_scale[:, None]
        b[0] = self.beta[0] - (n.x_offset[1:] / n.x_scale[1:]) @ self.beta[1:]
        b = b * n.y_scale[None, :]
        b[0] += n.y_offset
        return LinearModel(b, self.schema, None, dict(self.metadata))

    def to_dict(self) -> dict:
        return {
            "type": "linear",
            "schema": self.schema.to_dict(),
            "beta": self.beta.tolist(),
            "normalization": self.normalization.to_dict() if self.normalization else None,
            "metadata": self.metadata,
        }


@dataclass(frozen=True, eq=False)
class PiecewiseLinearModel:
    """``K`` linear segments; ``betas`` is ``(K, N_x, N_y)``, ``centroids`` is ``(K, N_x)``."""

    betas: np.ndarray
    centroids: np.ndarray
    schema: VariableSchema
    normalization: Optional[Normalization] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        betas = _frozen(self.betas)
        centroids = _frozen(self.centroids)
        if betas.ndim != 3 or betas.shape[1:] != (self.schema.n_x, self.schema.n_y):
            raise SchemaError(f"segment coefficients of shape {betas.shape} do not match the schema")
        if centroids.shape != (betas.shape[0], self.schema.n_x):
            raise SchemaError("one centroid per segment required")
        if betas.shape[0] < 1:
            raise ValueError("at least one segment required")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "centroids", centroids)

    @property
    def K(self) -> int:
        return self.betas.shape[0]

    def segment(self, X) -> np.ndarray:
        """Nearest-centroid segment per row; ties go to the lowest index."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)

    def predict(self, X) -> np.ndarray:
        return predict_piecewise(self, X)

    def to_dict(self) -> dict:
        return {
            "type": "piecewise",
            "schema": self.schema.to_dict(),
            "betas": self.betas.tolist(),
            "centroids": self.centroids.tolist(),
            "normalization": self.normalization.to_dict() if self.normalization else None,
            "metadata": self.metadata,
        }


def predict_piecewise(m: PiecewiseLinearModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k = m.segment(X)
    return np.einsum("nx,nxy->ny", X, m.betas[k])


# ---------------------------------------------------------------------------
# kernels

@dataclass(frozen=True)
class Kernel:
    """``linear``: <a,b>; ``polynomial``: (<a,b> + coef)^degree; ``rbf``: exp(-gamma |a-b|^2);
    ``sigmoid``: tanh(gamma <a,b> + coef)."""

    name: str = "linear"
    gamma: float = 1.0
    degree: int = 3
    coef: float = 0.0

    def __post_init__(self):
        if self.name not in ("linear", "polynomial", "rbf", "sigmoid"):
            raise ValueError(f"unknown kernel {self.name!r}")
        if self.name in ("rbf", "sigmoid") and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.name == "polynomial" and (self.degree < 1 or int(self.degree) != self.degree):
            raise ValueError("polynomial degree must be a positive integer")

    def gram(self, A, B) -> np.ndarray:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape[1] != B.shape[1]:
            raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
        with np.errstate(over="raise", invalid="raise"):
            try:
                if self.name == "rbf":
                    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
                    K = np.exp(-self.gamma * np.maximum(sq, 0.0))
                else:
                    G = A @ B.T
                    if self.name == "linear":
                        K = G
                    elif self.name == "polynomial":
                        K = (G + self.coef) ** int(self.degree)
                    else:
                        K = np.tanh(self.gamma * G + self.coef)
            except FloatingPointError as exc:
                raise OverflowError(f"{self.name} kernel evaluation overflowed") from exc
        if not np.all(np.isfinite(K)):
            raise OverflowError(f"{self.name} kernel evaluation overflowed")
        return K

    def to_dict(self) -> dict:
        return {"name": self.name, "gamma": self.gamma, "degree": self.degree, "coef": self.coef}


def kernel_eval(kernel: Kernel, x_a, x_b) -> float:
    return float(kernel.gram(np.atleast_2d(x_a), np.atleast_2d(x_b))[0, 0])


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Kernel expansion over the stored support predictors.

    ``support_x`` holds the non-intercept predictor columns; ``dual_coefs`` is
    ``(N_support, N_y)`` with entries ``alpha_i - alpha*_i``.
    """

    kernel: Kernel
    dual_coefs: np.ndarray
    support_x: np.ndarray
    intercept: np.ndarray
    schema: VariableSchema
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "dual_coefs", _frozen(np.atleast_2d(self.dual_coefs).reshape(len(self.support_x), -1)))
        object.__setattr__(self, "support_x", _frozen(self.support_x))
        object.__setattr__(self, "intercept", _frozen(np.atleast_1d(self.intercept)))

    def predict(self, X) -> np.ndarray:
        return predict_kernel(self, X)

    def to_dict(self) -> dict:
        return {
            "type": "kernel",
            "schema": self.schema.to_dict(),
            "kernel": self.kernel.to_dict(),
            "dual_coefs": self.dual_coefs.tolist(),
            "support_x": self.support_x.tolist(),
            "intercept": self.intercept.tolist(),
            "metadata": self.metadata,
        }


def predict_kernel(m: KernelModel, X) -> np.ndarray:
    """``X`` includes the intercept column, which is dropped before kernel evaluation."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(m.support_x) == 0:
        return np.tile(m.intercept, (X.shape[0], 1))
    return m.kernel.gram(X[:, 1:], m.support_x) @ m.dual_coefs + m.intercept


# ---------------------------------------------------------------------------
# serialization

def model_from_dict(d: dict):
    schema = VariableSchema.from_dict(d["schema"])
    kind = d["type"]
    if kind == "linear":
        return LinearModel(np.array(d["beta"]), schema, Normalization.from_dict(d.get("normalization")), d.get("metadata", {}))
    if kind == "piecewise":
        return PiecewiseLinearModel(
            np.array(d["betas"]), np.array(d["centroids"]), schema,
            Normalization.from_dict(d.get("normalization")), d.get("metadata", {}),
        )
    if kind == "kernel":
        k = d["kernel"]
        support = np.array(d["support_x"], dtype=float).reshape(len(d["support_x"]), -1)
        return KernelModel(
            Kernel(k["name"], k["gamma"], k["degree"], k["coef"]),
            np.array(d["dual_coefs"]), support, np.array(d["intercept"]), schema, d.get("metadata", {}),
        )
    raise ValueError(f"unknown model type {kind!r}")


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1, default=_json_default)


def load_model(path):
    with open(Path(path)) as fh:
        return model_from_dict(json.load(fh))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
