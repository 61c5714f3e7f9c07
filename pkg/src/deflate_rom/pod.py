"""Proper orthogonal decomposition baseline in a fixed inner product.

Modes are computed by the method of snapshots: the eigenvectors of the small
node-indexed correlation matrix ``C_pq = sqrt(w_p w_q) (u_p, u_q)`` are
lifted back to H.  The resulting subspaces are then evaluated in the mean
parametric energy norm, so they can be compared directly with deflation.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .galerkin import galerkin_solve, mean_error
from .hilbert import orthonormalize, read_array, write_array
from .subspace_opt import canonical_sign

__all__ = ["PodBasis", "pod_modes", "pod_error_curve", "save_pod", "load_pod"]

log = logging.getLogger(__name__)

# eigenvalues below this fraction of the largest are treated as zero
NULL_TOL = 1e-12


@dataclass(frozen=True)
class PodBasis:
    """POD modes as columns of ``modes`` (n, k) with non-increasing eigenvalues."""

    modes: np.ndarray
    eigenvalues: np.ndarray

    @property
    def k(self):
        return self.modes.shape[1]

    def first(self, m):
        return self.modes[:, :m]


def _correlation(truth, weights, inner):
    root = np.sqrt(weights)
    gram = truth @ inner.dot(truth.T)
    gram = 0.5 * (gram + gram.T)
    return root[:, None] * gram * root[None, :]


def pod_modes(truth, grid, inner, k):
    """Top-``k`` POD modes of the weighted snapshots under ``inner``.

    Parameters
    ----------
    truth : ndarray, shape (n_nodes, n)
        Snapshots ``u_q``.
    grid : ParameterGrid
    inner : SymmetricForm
        Fixed inner product; must be positive definite.
    k : int
        Number of modes, at most ``min(n, n_nodes)``.

    Returns
    -------
    PodBasis
        Inner-orthonormal modes.  Directions with (numerically) zero
        eigenvalue are completed deterministically from the coordinate
        vectors, so the basis always has ``k`` columns.

    Raises
    ------
    ValueError
        If ``k`` is out of range.
    NotPositiveDefiniteError
        If ``inner`` is not positive definite.
    """
    truth = np.asarray(truth, dtype=float)
    n_nodes, n = truth.shape
    if n != inner.n or n_nodes != grid.n_nodes:
        raise DimensionError(f"snapshots {truth.shape} do not match grid/inner product")
    k = int(k)
    if k < 0 or k > min(n, n_nodes):
        raise ValueError(f"k={k} must lie in [0, min(n, n_nodes)] = [0, {min(n, n_nodes)}]")
    inner.factor()  # raises for a non-SPD inner product
    if k == 0:
        return PodBasis(np.zeros((n, 0)), np.zeros(0))

    C = _correlation(truth, grid.weights, inner)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals, kind="stable")[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    top = vals[0] if vals.size else 0.0

    root = np.sqrt(grid.weights)
    modes = []
    for j in range(k):
        if vals[j] <= NULL_TOL * top or vals[j] <= 0.0:
            break
        phi = truth.T @ (root * vecs[:, j]) / np.sqrt(vals[j])
        modes.append(phi)
    n_good = len(modes)
    # re-orthonormalize (lifting loses orthogonality for small eigenvalues)
    if n_good < k:
        modes.extend(np.eye(n))
    Q = orthonormalize(np.column_stack(modes), inner)[:, :k]
    if Q.shape[1] < k:
        raise DimensionError("could not complete the POD basis")
    Q = np.column_stack([canonical_sign(Q[:, j]) for j in range(k)])
    eigs = np.clip(vals[:k], 0.0, None)
    eigs[n_good:] = 0.0
    if n_good < k:
        log.debug("POD: %d of %d modes completed from null directions", k - n_good, k)
    return PodBasis(modes=Q, eigenvalues=eigs)


def pod_error_curve(pod, op, grid, rhs, truth):
    """Mean energy error of the Galerkin solution on the first m modes.

    Returns a list of ``k + 1`` values for ``m = 0..k``.
    """
    truth = np.asarray(truth, dtype=float)
    curve = []
    for m in range(pod.k + 1):
        uZ, _ = galerkin_solve(pod.first(m), op, rhs)
        curve.append(mean_error(op, grid, truth, uZ))
    return curve


def save_pod(directory, pod):
    """Write ``modes.mtx`` and ``eigs.csv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_array(d / "modes.mtx", pod.modes)
    with open(d / "eigs.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "eigenvalue"])
        for j, lam in enumerate(pod.eigenvalues, start=1):
            writer.writerow([j, format(float(lam), ".17g")])


def load_pod(directory):
    d = Path(directory)
    with open(d / "eigs.csv", newline="") as fh:
        eigs = np.array([float(row[1]) for row in list(csv.reader(fh))[1:]])
    if eigs.size == 0:
        return PodBasis(np.zeros((0, 0)), eigs)
    modes = read_array(d / "modes.mtx")
    return PodBasis(modes.reshape(-1, eigs.size), eigs)
