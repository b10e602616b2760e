"""Input checks shared by the estimator API."""

from __future__ import annotations

import numpy as np


def check_texts(X, name: str = "X") -> list[str]:
    """A non-empty sequence of non-blank whitespace-tokenised strings."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    try:
        texts = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a sequence of strings") from None
    if not texts:
        raise ValueError(f"{name} is empty")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise TypeError(f"{name}[{i}] is {type(t).__name__}, expected str")
        if not t.strip():
            raise ValueError(f"{name}[{i}] is blank")
    return texts


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("y must be one-dimensional")
    if y.shape[0] != n:
        raise ValueError(f"X has {n} samples but y has {y.shape[0]}")
    return y


def check_exit_layer(m, n_layers: int) -> int:
    if m is None:
        return n_layers
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)) or not 1 <= m <= n_layers:
        raise ValueError(f"exit_layer must be an integer in 1..{n_layers}, got {m!r}")
    return int(m)
