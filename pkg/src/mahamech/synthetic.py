"""Seeded synthetic vocabularies for desk-scale experiments.

Words are named ``w0000``, ``w0001``, ... and their embeddings are drawn
from a zero-mean Gaussian. The covariance has a power-law eigenvalue
spectrum, normalised to trace ``dim``, in a random orthonormal basis. A
spectrum that decays quickly gives a strongly anisotropic cloud: sparse
along the leading directions and dense along the trailing ones.
"""

import numpy as np

from .embeddings import EmbeddingStore


def power_law_spectrum(dim, decay):
    """Eigenvalues ``(i + 1) ** -decay`` rescaled so they sum to `dim`."""
    s = np.arange(1, dim + 1, dtype=np.float64) ** -float(decay)
    return s * (dim / s.sum())


def random_rotation(dim, rng):
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    return Q * np.sign(np.diag(R))


def make_anisotropic_store(n_words=2000, dim=50, decay=1.0, scale=1.0, seed=0):
    """Gaussian vocabulary with a power-law covariance spectrum.

    Parameters
    ----------
    n_words, dim : int
    decay : float
        Power-law exponent; ``0`` gives an isotropic cloud.
    scale : float
        Global standard-deviation multiplier. It sets how far apart words
        sit relative to the noise radius ``dim / epsilon``.
    seed : int
    """
    if n_words < 2 or dim < 1:
        raise ValueError("need n_words >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    spectrum = power_law_spectrum(dim, decay)
    basis = random_rotation(dim, rng) if dim > 1 else np.ones((1, 1))
    latent = rng.standard_normal((n_words, dim)) * np.sqrt(spectrum)
    matrix = scale * latent @ basis.T
    width = len(str(n_words - 1))
    words = [f"w{i:0{width}d}" for i in range(n_words)]
    return EmbeddingStore(words, matrix)
