"""Finite-difference oracles shared by the gradient and log-determinant tests."""
from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function with respect to every entry of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        plus = f(x)
        x[index] = original - h
        minus = f(x)
        x[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """J[i, j] = d f_i / d x_j for a vector function of a vector."""
    x = np.array(x, dtype=np.float64)
    columns = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        columns.append((np.asarray(f(x + step)) - np.asarray(f(x - step))) / (2.0 * h))
    return np.stack(columns, axis=1)


def parameter_entry_grad(loss_fn: Callable[[], float], param, index, h: float = 1e-6) -> float:
    """Central difference of ``loss_fn`` in one entry of a parameter tensor."""
    original = param.values[index]
    param.values[index] = original + h
    plus = loss_fn()
    param.values[index] = original - h
    minus = loss_fn()
    param.values[index] = original
    return (plus - minus) / (2.0 * h)
