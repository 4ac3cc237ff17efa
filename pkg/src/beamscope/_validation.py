"""Input validation helpers.

scikit-learn's ``check_array`` refuses complex input, so the estimators route
their arguments through these instead.
"""

import numbers

import numpy as np


def check_complex_2d(X, n_features=None, name="X"):
    """Return ``X`` as a C-contiguous complex128 array of shape (n_samples, n_features).

    A 1-D input is treated as a single sample.  Raises ``ValueError`` on
    non-finite entries or a feature-count mismatch.
    """
    X = np.asarray(X)
    if X.dtype == object:
        raise TypeError(f"{name} has object dtype")
    X = np.array(X, dtype=np.complex128, order="C", copy=True)
    if X.ndim == 1:
        X = X[np.newaxis, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got {X.ndim}-D")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(
            f"{name} has {X.shape[1]} features per sample, expected {n_features}"
        )
    return X


def check_paired(X, Y, name_x="X", name_y="Y"):
    if X.shape[0] != Y.shape[0]:
        raise ValueError(
            f"{name_x} and {name_y} have different sample counts "
            f"({X.shape[0]} != {Y.shape[0]})"
        )


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_nonnegative(value, name):
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {value}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a Generator from {seed!r}")
