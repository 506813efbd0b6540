"""Norms, the trace-normalised embedding covariance and its regularisation.

The regularised Mahalanobis norm of ``x`` is ``sqrt(x' A^-1 x)`` with
``A = lam * Sigma + (1 - lam) * I``. It equals the Euclidean norm at
``lam = 0`` and the Mahalanobis norm under ``Sigma`` at ``lam = 1``.
Everything here is driven by one symmetric eigendecomposition
``Sigma = Q diag(xi) Q'``. That decomposition gives ``A^(1/2)`` and ``A^-1``
in closed form, and the same factors serve the norm, the noise sampler and
the eigenvalue bounds.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_lambda, check_vector, check_vectors
from .embeddings import EmbeddingStore

DEFAULT_EIGENVALUE_FLOOR = 1e-8

SIDECAR_MAGIC = "MAHAMECH-SCALED-COVARIANCE"
SIDECAR_VERSION = 1


class NormBoundViolation(ArithmeticError):
    """The eigenvalue sandwich failed, which means a factorisation is wrong."""


def _row_norms(X):
    # rescale by the largest entry so tiny or huge rows neither underflow nor overflow
    scale = np.max(np.abs(X), axis=1)
    scale[scale == 0] = 1.0
    Y = X / scale[:, None]
    return scale * np.sqrt(np.einsum("ij,ij->i", Y, Y))


def euclidean_norm(x):
    x = check_vector(x)
    return float(_row_norms(x[None, :])[0])


def _symmetrize(M):
    return 0.5 * (M + M.T)


class ScaledCovariance(BaseEstimator):
    """Sample covariance of the embedding rows, rescaled to trace ``dim``.

    ``sigma_ = dim * S / trace(S)`` where ``S`` is the mean-centred sample
    covariance (divisor ``n - 1``; the divisor cancels in the rescaling).
    Eigenvalues below `eigenvalue_floor` are clamped up to it, so the
    regularised matrix stays invertible at ``lam = 1`` even for
    rank-deficient vocabularies. ``sigma_`` itself is left unclamped.

    Parameters
    ----------
    eigenvalue_floor : float, default=1e-8

    Attributes
    ----------
    sigma_ : ndarray of shape (dim, dim)
    eigenvalues_ : ndarray of shape (dim,)
        Clamped eigenvalues in descending order.
    raw_eigenvalues_ : ndarray of shape (dim,)
        Eigenvalues before clamping.
    eigenvectors_ : ndarray of shape (dim, dim)
        Orthonormal; column ``i`` pairs with ``eigenvalues_[i]``.
    min_eigenvalue_ : float
        Smallest eigenvalue after clamping.
    n_clamped_ : int
    n_features_in_ : int
    """

    def __init__(self, eigenvalue_floor=DEFAULT_EIGENVALUE_FLOOR):
        self.eigenvalue_floor = eigenvalue_floor

    def fit(self, X, y=None):
        if isinstance(X, EmbeddingStore):
            X = X.matrix
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        floor = float(self.eigenvalue_floor)
        if not floor > 0:
            raise ValueError(f"eigenvalue_floor must be positive, got {floor}")
        dim = X.shape[1]
        S = np.cov(X, rowvar=False, ddof=1).reshape(dim, dim)
        tr = float(np.trace(S))
        if not tr > 0:
            raise ValueError("sample covariance has zero trace; all embeddings are identical")
        sigma = _symmetrize(S * (dim / tr))
        self._set_decomposition(sigma, floor)
        return self

    @classmethod
    def from_matrix(cls, sigma, eigenvalue_floor=DEFAULT_EIGENVALUE_FLOOR):
        """Wrap an already-scaled symmetric PSD matrix (used by tests and sidecars)."""
        sigma = check_array(sigma, dtype=np.float64)
        if sigma.shape[0] != sigma.shape[1]:
            raise ValueError(f"sigma must be square, got shape {sigma.shape}")
        est = cls(eigenvalue_floor=eigenvalue_floor)
        est._set_decomposition(_symmetrize(sigma), float(eigenvalue_floor))
        return est

    def _set_decomposition(self, sigma, floor):
        try:
            w, Q = np.linalg.eigh(sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"eigendecomposition failed: {exc}") from exc
        w, Q = w[::-1].copy(), Q[:, ::-1].copy()
        self.sigma_ = sigma
        self.raw_eigenvalues_ = w
        self.eigenvalues_ = np.maximum(w, floor)
        self.eigenvectors_ = Q
        self.min_eigenvalue_ = float(self.eigenvalues_[-1])
        self.n_clamped_ = int(np.count_nonzero(w < floor))
        self.n_features_in_ = sigma.shape[0]

    @property
    def dim(self):
        check_is_fitted(self, "sigma_")
        return self.n_features_in_

    def metric(self, lam):
        return regularized_metric(self, lam)

    # ---- sidecar persistence -------------------------------------------------

    def save(self, path):
        """Write ``<path>.json`` and ``<path>.bin``.

        The binary file is row-major little-endian float64: the eigenvector
        matrix followed by ``sigma_``. The JSON header carries the magic
        string, format version, dimension, floor, unclamped eigenvalues and
        a SHA-256 of the binary file.
        """
        check_is_fitted(self, "sigma_")
        json_path, bin_path = sidecar_paths(path)
        payload = (
            np.ascontiguousarray(self.eigenvectors_, dtype="<f8").tobytes()
            + np.ascontiguousarray(self.sigma_, dtype="<f8").tobytes()
        )
        header = {
            "magic": SIDECAR_MAGIC,
            "version": SIDECAR_VERSION,
            "dim": int(self.n_features_in_),
            "eigenvalue_floor": float(self.eigenvalue_floor),
            "eigenvalues": [float(v) for v in self.raw_eigenvalues_],
            "binary": bin_path.name,
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
        bin_path.write_bytes(payload)
        json_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
        return json_path, bin_path

    @classmethod
    def load(cls, path):
        json_path, _ = sidecar_paths(path)
        header = json.loads(json_path.read_text(encoding="utf-8"))
        if header.get("magic") != SIDECAR_MAGIC:
            raise ValueError(f"{json_path}: not a scaled-covariance sidecar")
        if header.get("version") != SIDECAR_VERSION:
            raise ValueError(f"{json_path}: unsupported sidecar version {header.get('version')}")
        dim = int(header["dim"])
        payload = (json_path.parent / header["binary"]).read_bytes()
        if hashlib.sha256(payload).hexdigest() != header["sha256"]:
            raise ValueError(f"{json_path}: binary payload checksum mismatch")
        if len(payload) != 2 * dim * dim * 8:
            raise ValueError(f"{json_path}: binary payload has wrong size")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        Q = arr[: dim * dim].reshape(dim, dim)
        sigma = arr[dim * dim:].reshape(dim, dim)
        floor = float(header["eigenvalue_floor"])
        est = cls(eigenvalue_floor=floor)
        w = np.asarray(header["eigenvalues"], dtype=np.float64)
        est.sigma_ = sigma
        est.raw_eigenvalues_ = w
        est.eigenvalues_ = np.maximum(w, floor)
        est.eigenvectors_ = Q
        est.min_eigenvalue_ = float(est.eigenvalues_[-1])
        est.n_clamped_ = int(np.count_nonzero(w < floor))
        est.n_features_in_ = dim
        return est


def sidecar_paths(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def scaled_covariance(store, eigenvalue_floor=DEFAULT_EIGENVALUE_FLOOR):
    return ScaledCovariance(eigenvalue_floor=eigenvalue_floor).fit(store)


@dataclass(frozen=True, eq=False)
class RegularizedMetric:
    """The matrix ``A = lam * Sigma + (1 - lam) * I`` and its factors.

    Build it with :func:`regularized_metric`. At ``lam = 0`` the factors are
    exact identity matrices and every operation short-circuits to its
    Euclidean form, so the ``lam = 0`` mechanism matches a plain spherical
    Laplace implementation bit for bit.
    """

    cov: ScaledCovariance
    lam: float
    eigenvalues: np.ndarray  # of A, descending
    sqrt_factor: np.ndarray = field(repr=False)
    inv_factor: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.sqrt_factor.shape[0]

    @property
    def is_identity(self):
        return self.lam == 0.0

    @property
    def min_eigenvalue(self):
        return self.cov.min_eigenvalue_

    def norm(self, X):
        """Regularised Mahalanobis norm of a vector or of each row of a batch."""
        X, single = check_vectors(X, self.dim)
        if not self.is_identity:
            X = (X @ self.cov.eigenvectors_) / np.sqrt(self.eigenvalues)
        out = _row_norms(X)
        return float(out[0]) if single else out

    def apply_sqrt(self, X):
        """Rows of `X` mapped through ``A^(1/2)``.

        The contraction runs through ``einsum`` without BLAS. Each output
        row then depends only on its own input row, bit for bit, whatever
        the batch size.
        """
        if self.is_identity:
            return X
        return np.einsum("ij,kj->ik", X, self.sqrt_factor, optimize=False)


def regularized_metric(cov, lam):
    check_is_fitted(cov, "sigma_")
    lam = check_lambda(lam)
    dim = cov.n_features_in_
    if lam == 0.0:
        eye = np.eye(dim)
        eigen = np.ones(dim)
        return RegularizedMetric(cov, lam, eigen, eye, eye.copy())
    a = lam * cov.eigenvalues_ + (1.0 - lam)
    Q = cov.eigenvectors_
    sqrt_factor = _symmetrize((Q * np.sqrt(a)) @ Q.T)
    inv_factor = _symmetrize((Q / a) @ Q.T)
    for arr in (a, sqrt_factor, inv_factor):
        arr.setflags(write=False)
    return RegularizedMetric(cov, lam, a, sqrt_factor, inv_factor)


def regularized_mahalanobis_norm(metric, x):
    x = check_vector(x, metric.dim)
    return metric.norm(x)


def norm_sandwich_bounds(metric, x, rtol=1e-9):
    """Euclidean lower and upper bounds on the regularised norm.

    With ``trace(Sigma) = m`` and smallest eigenvalue ``c``::

        |x| / sqrt(lam*m + 1 - lam) <= |x|_{M,lam} <= |x| / sqrt(lam*c + 1 - lam)

    Returns ``(lower, value, upper)``. Raises :class:`NormBoundViolation`
    when either inequality fails by more than `rtol` relative.
    """
    x = check_vector(x, metric.dim)
    lam = metric.lam
    m = metric.dim
    c = metric.min_eigenvalue
    if not c > 0:
        raise ValueError(f"minimum eigenvalue must be positive, got {c}")
    e = euclidean_norm(x)
    lower = e / np.sqrt(lam * m + 1.0 - lam)
    upper = e / np.sqrt(lam * c + 1.0 - lam)
    value = metric.norm(x)
    if value < lower * (1.0 - rtol) or value > upper * (1.0 + rtol):
        raise NormBoundViolation(
            f"norm {value!r} outside [{lower!r}, {upper!r}] (lam={lam}, c={c})"
        )
    return float(lower), float(value), float(upper)
