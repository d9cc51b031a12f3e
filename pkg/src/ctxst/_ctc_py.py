"""Pure numpy CTC forward-backward, used when the compiled kernel is absent."""

import numpy as np

NEG_INF = -np.inf


def _expand(labels: np.ndarray) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def forward_backward(log_probs: np.ndarray, labels: np.ndarray):
    """Return (nll, d nll / d log_probs) for one [T, C] sequence, blank = 0."""
    T, C = log_probs.shape
    ext = _expand(labels)
    S = len(ext)
    emit = log_probs[:, ext]  # [T, S]
    skip = np.zeros(S, dtype=bool)
    if S > 3:
        skip[3::2] = ext[3::2] != ext[1:-2:2]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    if S > 1:
        log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_p = alpha[T - 1, 0]
    occ = np.exp(alpha + beta - emit - log_p)
    grad = np.zeros((T, C))
    for k in np.unique(ext):
        grad[:, k] = -occ[:, ext == k].sum(axis=1)
    return float(-log_p), grad
