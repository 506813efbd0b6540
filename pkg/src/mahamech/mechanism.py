"""Word- and string-level perturbation with elliptical noise.

Each in-vocabulary token ``w`` is replaced by the vocabulary word whose
embedding is Euclidean-nearest to ``phi(w) + Z``, where ``Z`` is drawn from
:mod:`mahamech.noise`. With ``lam = 0`` this is the multivariate Laplace
mechanism. Tokens are processed independently.

Randomness is keyed, not sequential. The token at ``position`` of record
``record_id`` draws its noise from the stream ``(seed, record_id, position)``
(see :mod:`mahamech._streams`). A corpus therefore perturbs to the same
output however it is chunked or parallelised, and a single token can be
replayed with ``perturb_word(word, (record_id, position))``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _streams
from ._validation import check_epsilon, check_lambda, check_seed
from .embeddings import EmbeddingStore, NearestNeighborIndex
from .geometry import DEFAULT_EIGENVALUE_FLOOR, ScaledCovariance, regularized_metric
from .noise import draw_radii, draw_unit_directions

logger = logging.getLogger(__name__)

OOV_POLICIES = ("pass-through", "drop", "error")

# Records per work unit in perturb_corpus. Fixed, so output never depends on n_jobs.
CORPUS_CHUNK = 512


class OOVError(KeyError):
    """An out-of-vocabulary token met the ``error`` policy."""


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float
    lam: float
    seed: int = 0
    oov_policy: str = "pass-through"
    lowercase: bool = False

    def __post_init__(self):
        check_epsilon(self.epsilon)
        check_lambda(self.lam)
        check_seed(self.seed)
        if self.oov_policy not in OOV_POLICIES:
            raise ValueError(f"oov_policy must be one of {OOV_POLICIES}, got {self.oov_policy!r}")


@dataclass
class CorpusSummary:
    records: int = 0
    tokens_perturbed: int = 0
    tokens_passed_through: int = 0
    tokens_dropped: int = 0
    parse_failures: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def tokenize(text):
    """Whitespace tokenisation; punctuation stays attached to its word."""
    return text.split()


class MahalanobisMechanism(TransformerMixin, BaseEstimator):
    """Metric-DP text perturbation with regularised Mahalanobis noise.

    Parameters
    ----------
    epsilon : float, default=10.0
        Privacy parameter; noise radius has mean ``dim / epsilon``.
    lam : float, default=1.0
        Weight of the embedding covariance in ``lam * Sigma + (1 - lam) * I``.
        ``0`` gives the multivariate Laplace mechanism.
    seed : int, default=0
    oov_policy : {"pass-through", "drop", "error"}, default="pass-through"
    lowercase : bool, default=False
        Lower-case tokens before vocabulary lookup.
    eigenvalue_floor : float, default=1e-8
        Used only when `covariance` is not supplied.
    covariance : ScaledCovariance, optional
        A fitted covariance to reuse instead of estimating one from the
        store. Useful when sweeping `epsilon` and `lam`.
    n_jobs : int, default=1
        Thread count for :meth:`perturb_corpus`. Results do not depend on it.

    Attributes
    ----------
    store_ : EmbeddingStore
    index_ : NearestNeighborIndex
    covariance_ : ScaledCovariance
    metric_ : RegularizedMetric

    Examples
    --------
    >>> from mahamech.synthetic import make_anisotropic_store
    >>> store = make_anisotropic_store(n_words=50, dim=4)
    >>> mech = MahalanobisMechanism(epsilon=1e6, lam=0.5, seed=7).fit(store)
    >>> mech.transform(["w00 w01 unknown"])  # tiny noise, OOV passes through
    [['w00', 'w01', 'unknown']]
    """

    def __init__(
        self,
        epsilon=10.0,
        lam=1.0,
        seed=0,
        oov_policy="pass-through",
        lowercase=False,
        eigenvalue_floor=DEFAULT_EIGENVALUE_FLOOR,
        covariance=None,
        n_jobs=1,
    ):
        self.epsilon = epsilon
        self.lam = lam
        self.seed = seed
        self.oov_policy = oov_policy
        self.lowercase = lowercase
        self.eigenvalue_floor = eigenvalue_floor
        self.covariance = covariance
        self.n_jobs = n_jobs

    @property
    def config(self):
        return PerturbationConfig(self.epsilon, self.lam, self.seed, self.oov_policy, self.lowercase)

    def fit(self, X, y=None):
        """Index the vocabulary and build the regularised metric.

        Parameters
        ----------
        X : EmbeddingStore
        """
        if not isinstance(X, EmbeddingStore):
            raise TypeError(f"fit expects an EmbeddingStore, got {type(X).__name__}")
        self.config  # validates the hyper-parameters
        if self.covariance is not None:
            check_is_fitted(self.covariance, "sigma_")
            cov = self.covariance
        else:
            cov = ScaledCovariance(eigenvalue_floor=self.eigenvalue_floor).fit(X)
        if cov.n_features_in_ != X.dim:
            raise ValueError(f"covariance has dimension {cov.n_features_in_}, embeddings {X.dim}")
        self.store_ = X
        self.index_ = NearestNeighborIndex(X)
        self.covariance_ = cov
        self.metric_ = regularized_metric(cov, self.lam)
        self.n_features_in_ = X.dim
        return self

    # ---- core ---------------------------------------------------------------

    def sample_output_ids(self, word_ids, keys, repeats=1, noise_scale=1.0):
        """Run the mechanism on vocabulary ids with explicit stream keys.

        Row ``i`` of the result holds `repeats` consecutive outputs drawn
        from stream ``keys[i]``. Keys are used as given, without a domain
        prefix.

        Returns
        -------
        ndarray of shape (len(word_ids), repeats), int64
        """
        check_is_fitted(self, "metric_")
        word_ids = np.asarray(word_ids, dtype=np.int64)
        if len(word_ids) != len(keys):
            raise ValueError("word_ids and keys must have equal length")
        if len(word_ids) == 0:
            return np.empty((0, repeats), dtype=np.int64)
        eps = float(self.epsilon)
        dim = self.n_features_in_
        X = np.empty((len(word_ids) * repeats, dim))
        Y = np.empty(len(word_ids) * repeats)
        for i, key in enumerate(keys):
            d_rng, r_rng = _streams.noise_generators(self.seed, key)
            sl = slice(i * repeats, (i + 1) * repeats)
            X[sl] = draw_unit_directions(d_rng, repeats, dim)
            Y[sl] = draw_radii(r_rng, repeats, dim, eps)
        if noise_scale != 1.0:
            Y *= noise_scale
        Z = Y[:, None] * self.metric_.apply_sqrt(X)
        queries = self.store_.matrix[np.repeat(word_ids, repeats)] + Z
        ids, _ = self.index_.query_ids(queries)
        return ids.reshape(len(word_ids), repeats)

    def _lookup(self, token):
        return self.store_.get(token.lower() if self.lowercase else token)

    def _oov(self, token):
        if self.oov_policy == "error":
            raise OOVError(token)
        return token if self.oov_policy == "pass-through" else None

    # ---- public perturbation API -------------------------------------------

    def perturb_word(self, word, stream_id=0):
        """Perturb one token using the sub-stream `stream_id` (int or tuple).

        Returns the substituted vocabulary word, the token itself for an
        out-of-vocabulary word under ``pass-through``, or ``None`` under
        ``drop``.
        """
        check_is_fitted(self, "metric_")
        wid = self._lookup(word)
        if wid is None:
            return self._oov(word)
        key = (_streams.MECHANISM,) + _streams.as_key(stream_id)
        out = self.sample_output_ids([wid], [key])[0, 0]
        return self.store_.words[out]

    def perturb_string(self, tokens, record_id=0):
        """Perturb each token of a record independently.

        Token ``i`` uses stream ``(record_id, i)``, with ``i`` counted before
        any tokens are dropped.
        """
        return self._perturb_records([(record_id, list(tokens))], CorpusSummary())[0]

    def _perturb_records(self, records, summary):
        check_is_fitted(self, "metric_")
        slots, ids, keys = [], [], []
        outputs = []
        for r, (record_id, tokens) in enumerate(records):
            _streams.as_key(record_id)
            out = []
            for pos, tok in enumerate(tokens):
                wid = self._lookup(tok)
                if wid is None:
                    rep = self._oov(tok)
                    if rep is None:
                        summary.tokens_dropped += 1
                        continue
                    summary.tokens_passed_through += 1
                    out.append(rep)
                else:
                    slots.append((r, len(out)))
                    ids.append(wid)
                    keys.append((_streams.MECHANISM, int(record_id), pos))
                    out.append(None)
                    summary.tokens_perturbed += 1
            outputs.append(out)
        if ids:
            new_ids = self.sample_output_ids(ids, keys)[:, 0]
            words = self.store_.words
            for (r, j), wid in zip(slots, new_ids):
                outputs[r][j] = words[wid]
        return outputs

    def transform(self, X):
        """Perturb a sequence of records.

        Each record is either a string (whitespace-tokenised) or a list of
        tokens. Record ``i`` uses record id ``i``.

        Returns
        -------
        list of list of str
        """
        records = [(i, tokenize(r) if isinstance(r, str) else list(r)) for i, r in enumerate(X)]
        return self._perturb_records(records, CorpusSummary())

    def perturb_corpus(self, lines, sink, tsv=False, strict=False):
        """Perturb line-oriented text and write it to `sink`.

        Parameters
        ----------
        lines : iterable of str
            One record per line. In `tsv` mode each line is ``label<TAB>text``
            and the label is copied through byte for byte.
        sink : writable text stream
        tsv : bool, default=False
        strict : bool, default=False
            Raise on a malformed TSV line instead of recording it in
            ``summary.parse_failures`` (1-based line numbers). A malformed
            line is never written out; copying it raw would leak
            unperturbed text.

        Returns
        -------
        CorpusSummary
        """
        check_is_fitted(self, "metric_")
        summary = CorpusSummary()
        pending = []

        def flush():
            if not pending:
                return
            jobs = [pending[i:i + CORPUS_CHUNK] for i in range(0, len(pending), CORPUS_CHUNK)]
            parts = Parallel(n_jobs=self.n_jobs, prefer="threads")(
                delayed(self._perturb_chunk)(job) for job in jobs
            )
            for texts, part in parts:
                for f in ("tokens_perturbed", "tokens_passed_through", "tokens_dropped"):
                    setattr(summary, f, getattr(summary, f) + getattr(part, f))
                for line in texts:
                    sink.write(line + "\n")
            pending.clear()

        for record_id, raw in enumerate(lines):
            line = raw.rstrip("\n").rstrip("\r")
            label = None
            text = line
            if tsv:
                if "\t" not in line:
                    if strict:
                        raise ValueError(f"line {record_id + 1}: expected 'label<TAB>text'")
                    summary.parse_failures.append(record_id + 1)
                    continue
                label, text = line.split("\t", 1)
            summary.records += 1
            pending.append((record_id, label, tokenize(text)))
            if len(pending) >= 16 * CORPUS_CHUNK:
                flush()
        flush()
        return summary

    def _perturb_chunk(self, chunk):
        part = CorpusSummary()
        outs = self._perturb_records([(rid, toks) for rid, _, toks in chunk], part)
        texts = []
        for (_, label, _), out in zip(chunk, outs):
            body = " ".join(out)
            texts.append(body if label is None else f"{label}\t{body}")
        return texts, part


class LaplaceMechanism(MahalanobisMechanism):
    """The spherical (``lam = 0``) baseline."""

    def __init__(self, epsilon=10.0, seed=0, oov_policy="pass-through", lowercase=False,
                 n_jobs=1):
        super().__init__(epsilon=epsilon, lam=0.0, seed=seed, oov_policy=oov_policy,
                         lowercase=lowercase, n_jobs=n_jobs)


def perturb_word(mech, word, stream_id=0):
    return mech.perturb_word(word, stream_id)


def perturb_string(mech, tokens, record_id=0):
    return mech.perturb_string(tokens, record_id)


def perturb_corpus(mech, lines, sink, tsv=False, strict=False):
    return mech.perturb_corpus(lines, sink, tsv=tsv, strict=strict)
