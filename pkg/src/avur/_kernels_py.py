"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def edit_distance(ref, hyp) -> int:
    m = len(hyp)
    prev = list(range(m + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * m
        r = ref[i - 1]
        for j in range(1, m + 1):
            if r == hyp[j - 1]:
                cur[j] = prev[j - 1]
            else:
                cur[j] = min(prev[j - 1], cur[j - 1], prev[j]) + 1
        prev = cur
    return int(prev[m])


def nearest_centroid(x: np.ndarray, c: np.ndarray):
    # accumulate per dimension in the same order as the compiled loop so
    # distances (and therefore tie-breaks) are bitwise identical
    dist = np.zeros((x.shape[0], c.shape[0]))
    for t in range(x.shape[1]):
        diff = x[:, t, None] - c[None, :, t]
        dist = dist + diff * diff
    labels = np.argmin(dist, axis=1).astype(np.int64)
    return labels, dist[np.arange(x.shape[0]), labels]


def run_starts(labels: np.ndarray) -> np.ndarray:
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    return np.concatenate([[0], change]).astype(np.int64)
