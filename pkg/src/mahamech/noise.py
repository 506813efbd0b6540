"""Elliptical noise with density proportional to ``exp(-epsilon * |z|_{M,lam})``.

A draw is ``Z = Y * A^(1/2) X``. Here ``X`` is uniform on the unit sphere
(a normalised standard Gaussian), ``Y ~ Gamma(shape=dim, scale=1/epsilon)``
and ``A`` is the regularised matrix of a :class:`~mahamech.geometry.RegularizedMetric`.
Since ``|A^(1/2) X|_{M,lam} = |X| = 1``, every sample satisfies
``|Z|_{M,lam} = Y``. :class:`NoiseSample` keeps ``Y`` and ``X`` so that
identity can be checked on each draw.
"""

from dataclasses import dataclass

import numpy as np

from . import _streams
from ._validation import check_epsilon, check_positive_int, check_seed, check_vector


@dataclass(frozen=True, eq=False)
class NoiseSample:
    z: np.ndarray
    radius: float
    direction: np.ndarray


@dataclass(frozen=True, eq=False)
class NoiseBatch:
    """Column-stacked samples; indexing yields :class:`NoiseSample` objects."""

    z: np.ndarray
    radius: np.ndarray
    direction: np.ndarray

    def __len__(self):
        return len(self.radius)

    def __getitem__(self, i):
        return NoiseSample(self.z[i], float(self.radius[i]), self.direction[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def draw_unit_directions(rng, count, dim):
    """Uniform points on the unit sphere; all-zero Gaussian rows are redrawn."""
    N = rng.standard_normal((count, dim))
    norms = np.linalg.norm(N, axis=1)
    for i in np.flatnonzero(norms == 0.0):
        while norms[i] == 0.0:
            N[i] = rng.standard_normal(dim)
            norms[i] = np.linalg.norm(N[i : i + 1], axis=1)[0]
    return N / norms[:, None]


def draw_radii(rng, count, dim, epsilon):
    return rng.gamma(shape=float(dim), scale=1.0 / epsilon, size=count)


def elliptical_noise(metric, epsilon, direction_rng, radius_rng, count, noise_scale=1.0):
    """Draw `count` samples from the two generators of one stream.

    `noise_scale` multiplies the radius. It is 1 for the mechanism as
    defined and exists so the privacy auditor can be shown to catch a
    mechanism that adds too little noise.
    """
    X = draw_unit_directions(direction_rng, count, metric.dim)
    Y = draw_radii(radius_rng, count, metric.dim, epsilon)
    if noise_scale != 1.0:
        Y = Y * noise_scale
    Z = Y[:, None] * metric.apply_sqrt(X)
    return NoiseBatch(Z, Y, X)


class NoiseSampler:
    """Seeded sampler for one noise stream.

    Parameters
    ----------
    metric : RegularizedMetric
    epsilon : float
        Privacy parameter; the radius has mean ``dim / epsilon``.
    seed : int, default=0
    stream : int or tuple of int, default=()
        Sub-stream key. Samplers sharing seed, stream and metric produce the
        same samples.

    Notes
    -----
    A sampler carries generator state and should not be shared between
    threads. Use :meth:`spawn` to give each worker its own stream.
    """

    def __init__(self, metric, epsilon, seed=0, stream=()):
        self.metric = metric
        self.epsilon = check_epsilon(epsilon)
        self.rng_seed = check_seed(seed)
        self.stream = _streams.as_key(stream)
        key = (_streams.SAMPLER,) + self.stream
        self._direction_rng, self._radius_rng = _streams.noise_generators(self.rng_seed, key)

    def __repr__(self):
        return (f"NoiseSampler(dim={self.metric.dim}, lam={self.metric.lam}, "
                f"epsilon={self.epsilon}, seed={self.rng_seed}, stream={self.stream})")

    def spawn(self, stream_id):
        """An independent sampler on the child stream ``stream + (stream_id,)``."""
        return NoiseSampler(self.metric, self.epsilon, self.rng_seed,
                            self.stream + _streams.as_key(stream_id))

    def sample(self):
        return self.sample_batch(1)[0]

    def sample_batch(self, count):
        """`count` samples, identical to `count` consecutive :meth:`sample` calls."""
        count = check_positive_int(count, "count")
        return elliptical_noise(self.metric, self.epsilon, self._direction_rng,
                                self._radius_rng, count)


def sample(sampler):
    return sampler.sample()


def sample_batch(sampler, count):
    return sampler.sample_batch(count)


def log_unnormalized_density(metric, epsilon, z):
    """``-epsilon * |z|_{M,lam}``; the normalising constant is left out."""
    epsilon = check_epsilon(epsilon)
    z = check_vector(z, metric.dim, name="z")
    return -epsilon * metric.norm(z)
