"""Small shared numeric helpers."""

import numpy as np


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along `axis`.

    Entries masked with -inf receive weight 0; every row must keep at
    least one finite entry.
    """
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=axis, keepdims=True)


def log_softmax_f64(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax computed in float64 for loss accounting."""
    x = np.asarray(logits, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
    return x - lse
