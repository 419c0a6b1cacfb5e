"""Pure numpy implementations of the kernels."""
import numpy as np


def neighbor_counts(encoded, theta):
    """Number of rows j with hamming(i, j) / L < theta, for every row i.

    ``encoded`` is an N x L integer matrix.  Row i always counts itself.
    """
    encoded = np.ascontiguousarray(encoded)
    n, length = encoded.shape
    counts = np.zeros(n, dtype=np.int64)
    # blocks keep the N x block x L boolean temporary bounded
    block = max(1, 2_000_000 // max(1, n * length))
    for start in range(0, n, block):
        chunk = encoded[start:start + block]
        mism = (chunk[:, None, :] != encoded[None, :, :]).sum(axis=2)
        counts[start:start + block] = (mism / length < theta).sum(axis=1)
    return counts


def pairwise_distances(coords):
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))
