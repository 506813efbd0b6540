"""Word-embedding vocabularies and exact Euclidean nearest-neighbour search."""

import json
import logging
import warnings

import numpy as np

from ._validation import check_vectors

logger = logging.getLogger(__name__)

FORMATS = ("glove-text", "word2vec-text")

# Rows whose expanded squared distance lies within this relative band of the
# row minimum are re-scored with the direct formula before taking the argmin.
_CANDIDATE_RTOL = 1e-10


class EmbeddingFormatError(ValueError):
    """Raised for unreadable or inconsistent embedding files."""


class EmbeddingStore:
    """An immutable vocabulary with one embedding vector per word.

    Parameters
    ----------
    words : sequence of str
        Unique tokens; position is the vocabulary id.
    matrix : array-like of shape (n_words, dim)
        Embedding vectors, stored as float64.
    """

    def __init__(self, words, matrix):
        words = tuple(str(w) for w in words)
        matrix = np.array(matrix, dtype=np.float64, copy=True)
        if matrix.ndim != 2:
            raise ValueError(f"matrix must be 2-dimensional, got shape {matrix.shape}")
        if len(words) != matrix.shape[0]:
            raise ValueError(f"{len(words)} words but {matrix.shape[0]} matrix rows")
        if len(words) < 2:
            raise ValueError(f"a vocabulary needs at least 2 words, got {len(words)}")
        if matrix.shape[1] < 1:
            raise ValueError("embedding dimension must be positive")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("embedding matrix contains NaN or Inf")
        index = {}
        for i, w in enumerate(words):
            if w in index:
                raise ValueError(f"duplicate word {w!r}")
            index[w] = i
        matrix.setflags(write=False)
        self._words = words
        self._matrix = matrix
        self._index = index

    @property
    def words(self):
        return self._words

    @property
    def matrix(self):
        return self._matrix

    @property
    def dim(self):
        return self._matrix.shape[1]

    def __len__(self):
        return len(self._words)

    def __contains__(self, word):
        return word in self._index

    def __repr__(self):
        return f"EmbeddingStore(n_words={len(self)}, dim={self.dim})"

    def id_of(self, word):
        """Vocabulary id of `word`; raises KeyError when absent."""
        return self._index[word]

    def get(self, word, default=None):
        return self._index.get(word, default)

    def vector(self, word):
        return self._matrix[self._index[word]]


def _parse_error(path, lineno, msg):
    return EmbeddingFormatError(f"{path}:{lineno}: {msg}")


def load_embeddings(path, format="glove-text", vocab_filter=None):
    """Read a text embedding file into an :class:`EmbeddingStore`.

    Both formats hold one ``token v1 ... vm`` record per line (UTF-8, LF or
    CRLF); ``word2vec-text`` additionally starts with a ``n_words dim``
    header. Words are kept in file order. A repeated token triggers a
    warning and its first vector wins.

    Parameters
    ----------
    path : str or path-like
    format : {"glove-text", "word2vec-text"}
    vocab_filter : collection of str, optional
        When given, only these words are kept. Lines for other words are
        still checked for a consistent field count but not converted.

    Raises
    ------
    EmbeddingFormatError
        On a malformed line (the message carries the line number), an
        inconsistent dimension, or fewer than two surviving words.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown embedding format {format!r}; expected one of {FORMATS}")
    keep = None if vocab_filter is None else set(vocab_filter)

    words, rows = [], []
    seen = set()
    n_dupes = 0
    dim = None
    header = None
    with open(path, encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n").rstrip(" ")
            if not line:
                continue
            parts = line.split(" ")
            if format == "word2vec-text" and header is None:
                if len(parts) != 2:
                    raise _parse_error(path, lineno, "expected a 'n_words dim' header")
                try:
                    header = (int(parts[0]), int(parts[1]))
                except ValueError:
                    raise _parse_error(path, lineno, "header fields must be integers") from None
                dim = header[1]
                if dim < 1:
                    raise _parse_error(path, lineno, f"header dimension must be positive, got {dim}")
                continue
            if len(parts) < 2:
                raise _parse_error(path, lineno, "expected a token followed by its vector")
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise _parse_error(
                    path, lineno, f"inconsistent dimension: {len(parts) - 1} values, expected {dim}"
                )
            token = parts[0]
            if keep is not None and token not in keep:
                continue
            if token in seen:
                n_dupes += 1
                logger.debug("%s:%d: duplicate token %r ignored", path, lineno, token)
                continue
            try:
                vec = [float(v) for v in parts[1:]]
            except ValueError:
                raise _parse_error(path, lineno, "vector entries must be real numbers") from None
            seen.add(token)
            words.append(token)
            rows.append(vec)

    if n_dupes:
        warnings.warn(f"{path}: {n_dupes} duplicate token(s) ignored, first occurrence kept",
                      stacklevel=2)
    if header is not None and keep is None and header[0] != len(words) + n_dupes:
        logger.warning("%s: header announces %d words, file holds %d", path, header[0],
                       len(words) + n_dupes)
    if len(words) < 2:
        raise EmbeddingFormatError(
            f"{path}: fewer than 2 words after filtering (got {len(words)})"
        )
    matrix = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        bad = int(np.argwhere(~np.isfinite(matrix))[0, 0])
        raise EmbeddingFormatError(f"{path}: non-finite value in vector for {words[bad]!r}")
    return EmbeddingStore(words, matrix)


def save_embeddings(store, path, format="glove-text"):
    """Write `store` as text; values use ``repr`` so they round-trip exactly."""
    if format not in FORMATS:
        raise ValueError(f"unknown embedding format {format!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if format == "word2vec-text":
            fh.write(f"{len(store)} {store.dim}\n")
        for word, row in zip(store.words, store.matrix):
            fh.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


class NearestNeighborIndex:
    """Exact Euclidean nearest-neighbour lookup over an embedding store.

    Distances are first computed with the expansion
    ``|q|^2 - 2 q.phi + |phi|^2`` (one matrix product per batch), then every
    row whose value falls within a small relative band of the minimum is
    re-scored as ``sum((phi - q)^2)``. The returned argmin therefore equals
    a plain brute-force scan, with ties going to the smallest vocabulary id.
    """

    def __init__(self, store, block_size=4096):
        self.store = store
        self.block_size = int(block_size)
        norms = np.einsum("ij,ij->i", store.matrix, store.matrix)
        norms.setflags(write=False)
        self.precomputed_norms = norms
        self._max_norm = float(norms.max())

    def query_ids(self, Q):
        """Nearest vocabulary ids and distances for each row of `Q`.

        Parameters
        ----------
        Q : array-like of shape (n_queries, dim) or (dim,)

        Returns
        -------
        ids : ndarray of int64
        distances : ndarray of float64
        """
        Q, single = check_vectors(Q, self.store.dim, name="query")
        ids = np.empty(len(Q), dtype=np.int64)
        dist = np.empty(len(Q), dtype=np.float64)
        for start in range(0, len(Q), self.block_size):
            stop = start + self.block_size
            ids[start:stop], dist[start:stop] = self._query_block(Q[start:stop])
        if single:
            return ids[0], dist[0]
        return ids, dist

    def _query_block(self, Q):
        E = self.store.matrix
        q_norms = np.einsum("ij,ij->i", Q, Q)
        d2 = self.precomputed_norms[None, :] - 2.0 * (Q @ E.T)
        d2 += q_norms[:, None]
        best = d2.min(axis=1)
        band = _CANDIDATE_RTOL * (q_norms + self._max_norm) + 1e-300
        mask = d2 <= (best + band)[:, None]
        ids = np.argmax(mask, axis=1)
        counts = np.count_nonzero(mask, axis=1)
        exact = np.einsum("ij,ij->i", E[ids] - Q, E[ids] - Q)
        for r in np.flatnonzero(counts > 1):
            cand = np.flatnonzero(mask[r])
            diff = E[cand] - Q[r]
            d = np.einsum("ij,ij->i", diff, diff)
            k = int(np.argmin(d))
            ids[r] = cand[k]
            exact[r] = d[k]
        return ids, np.sqrt(exact)

    def nearest_word(self, query):
        """Return ``(word, vocabulary_id, distance)`` for a single query."""
        i, d = self.query_ids(query)
        if np.ndim(i) != 0:
            raise ValueError("nearest_word takes a single query vector")
        return self.store.words[int(i)], int(i), float(d)


def nearest_word(index, query):
    return index.nearest_word(query)


def nearest_neighbor_distances(store, block_size=2048):
    """Distance from every word to its nearest *other* word (brute force)."""
    E = store.matrix
    norms = np.einsum("ij,ij->i", E, E)
    out = np.empty(len(store))
    for start in range(0, len(store), block_size):
        stop = min(start + block_size, len(store))
        B = E[start:stop]
        d2 = norms[start:stop, None] - 2.0 * (B @ E.T) + norms[None, :]
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # rescore the best few directly; the expansion loses precision near 0
        k = min(4, len(store) - 1)
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
        diff = E[cand] - B[:, None, :]
        out[start:stop] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return out


def corpus_profile(store, top=50):
    """Density-heterogeneity statistics of a vocabulary.

    For every word the distance to its nearest distinct neighbour is taken.
    The report holds the largest and smallest of these, the mean over the
    `top` sparsest words and over the `top` densest words, and the two
    ratios. A ratio whose denominator is zero is reported as ``None``.
    """
    if len(store) < 2:
        raise ValueError("corpus_profile needs at least 2 words")
    d = np.sort(nearest_neighbor_distances(store))
    k = min(top, len(d))
    d_max, d_min = float(d[-1]), float(d[0])
    sparse = float(d[-k:].mean())
    dense = float(d[:k].mean())
    return {
        "n_words": len(store),
        "dim": store.dim,
        "d_max": d_max,
        "d_min": d_min,
        "ratio_max_min": d_max / d_min if d_min > 0 else None,
        "mean_top50_sparse": sparse,
        "mean_top50_dense": dense,
        "ratio_sparse_dense": sparse / dense if dense > 0 else None,
    }


def profile_json(profile):
    return json.dumps(profile, indent=2, sort_keys=True)
