"""Sparse assembly from per-point basis features.

A *feature* is an array (Q, 27) or (Q, 27, 3) holding, for every quadrature
point, one number (or 3-vector) per supported basis function in the local
order of :class:`glymph.spline_space.PointBasis`. Vector features are
contracted over their last axis.
"""

import numpy as np
import scipy.sparse as sp

CHUNK = 6000


def _runs(elem):
    """Start indices of runs of equal element ids."""
    if len(elem) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.r_[True, elem[1:] != elem[:-1]])


def assemble_matrix(pb, test, trial, weight, shape=None):
    """Sparse matrix A_ij = sum_q weight_q * test_q[i] . trial_q[j]."""
    n = pb.n_cp
    shape = shape or (n, n)
    rows, cols, vals = [], [], []
    Q = len(pb)
    spec = "qak,qbk,q->qab" if np.ndim(test) == 3 else "qa,qb,q->qab"
    start = 0
    while start < Q:
        stop = min(Q, start + CHUNK)
        # do not split an element run across chunks
        while stop < Q and pb.elem[stop] == pb.elem[stop - 1]:
            stop += 1
        loc = np.einsum(spec, test[start:stop], trial[start:stop], weight[start:stop], optimize=True)
        runs = _runs(pb.elem[start:stop])
        red = np.add.reduceat(loc, runs, axis=0)
        idx = pb.idx[start:stop][runs]
        r = np.broadcast_to(idx[:, :, None], red.shape)
        c = np.broadcast_to(idx[:, None, :], red.shape)
        keep = (r >= 0) & (c >= 0)
        rows.append(r[keep])
        cols.append(c[keep])
        vals.append(red[keep])
        start = stop
    if not rows:
        return sp.csr_matrix(shape)
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)
    return A.tocsr()


def assemble_vector(pb, test, weight):
    """Vector b_i = sum_q weight_q * test_q[i]."""
    keep = pb.idx >= 0
    data = (test * weight[:, None])[keep]
    return np.bincount(pb.idx[keep], weights=data, minlength=pb.n_cp)
