"""L2-regularized linear SVM (squared hinge) trained with L-BFGS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import DimensionMismatch, SingleClass

C_GRID = (1.0, 10.0, 100.0, 1000.0)
LBFGS_MEMORY = 10
LBFGS_GTOL = 1e-6
LBFGS_MAXITER = 1000


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float
    C: float
    mean: np.ndarray
    scale: np.ndarray

    @property
    def feature_dim(self):
        return len(self.weights)


def _check_labels(y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SingleClass("training needs at least one example of each class")
    return y


def svm_objective(params, Z, y, C):
    """Squared-hinge primal objective and its gradient; ``params = [w, b]``."""
    w, b = params[:-1], params[-1]
    margin = 1.0 - y * (Z @ w + b)
    active = np.maximum(margin, 0.0)
    f = 0.5 * float(w @ w) + C * float(active @ active)
    coef = -2.0 * C * active * y
    grad = np.empty_like(params)
    grad[:-1] = w + Z.T @ coef
    grad[-1] = coef.sum()
    return f, grad


def standardization(F):
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    return mean, scale


def train_svm(features, labels, C, history=None) -> LinearModel:
    """Fit ``0.5||w||^2 + C * sum max(0, 1 - y (w.z + b))^2`` by L-BFGS.

    ``z`` are the features standardized with per-dimension training mean and
    standard deviation; both are stored in the model. Starts from zeros. If
    ``history`` is a list, the objective after each accepted iteration is
    appended to it.
    """
    F = np.asarray(features, dtype=float)
    if F.ndim != 2:
        raise DimensionMismatch("features must be a 2-D array (or list of equal-length vectors)")
    y = _check_labels(labels)
    if len(y) != len(F):
        raise DimensionMismatch(f"{len(F)} feature vectors but {len(y)} labels")
    mean, scale = standardization(F)
    Z = (F - mean) / scale
    x0 = np.zeros(F.shape[1] + 1)

    callback = None
    if history is not None:
        history.append(svm_objective(x0, Z, y, C)[0])

        def callback(xk):
            history.append(svm_objective(xk, Z, y, C)[0])

    res = minimize(svm_objective, x0, args=(Z, y, C), jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxcor": LBFGS_MEMORY, "gtol": LBFGS_GTOL, "maxiter": LBFGS_MAXITER,
                            "ftol": 0.0, "maxls": 50})
    w = res.x[:-1]
    return LinearModel(np.array(w), float(res.x[-1]), float(C), mean, scale)


def decision_values(model: LinearModel, F):
    F = np.asarray(F, dtype=float)
    if F.shape[-1] != model.feature_dim:
        raise DimensionMismatch(f"model expects {model.feature_dim} features, got {F.shape[-1]}")
    return ((F - model.mean) / model.scale) @ model.weights + model.bias


def score(model: LinearModel, f) -> float:
    return float(decision_values(model, np.asarray(f, dtype=float)[None, :])[0])


def predict(model: LinearModel, f):
    """+1/-1 by the sign of the score; a zero score counts as +1."""
    s = decision_values(model, f)
    out = np.where(s >= 0, 1, -1)
    return int(out) if np.ndim(out) == 0 else out


def accuracy(model: LinearModel, F, y):
    return float(np.mean(predict(model, np.atleast_2d(F)) == np.asarray(y)))
