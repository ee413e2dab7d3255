"""Input validation shared by the estimators and the functional API."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array


def check_points(X, n_features=None, name="points", min_samples=1):
    """Validate an (N, d) float array of point embeddings."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples, input_name=name)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} have {X.shape[1]} features, expected {n_features}")
    return X


def check_simplex(w, name="weights", atol=1e-9):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1.0) > atol:
        raise ValueError(f"{name} must be a nonnegative vector summing to 1")
    return w


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def as_rng(seed_or_rng):
    """Return a ``numpy.random.Generator`` for a seed, a generator, or None."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def derived_rng(seed, *key):
    """Independent generator for ``key`` under a root ``seed``.

    Streams for different keys never collide and do not depend on the order in
    which they are requested, which is what keeps parallel runs reproducible.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
