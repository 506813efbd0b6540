"""Empirical privacy statistics and a Monte-Carlo check of the DP ratio bound.

For a word ``w`` run through the mechanism ``R`` times:

* ``n_w`` counts the runs where ``w`` came back unchanged (estimates
  ``R * Pr{M(w) = w}``; lower is more private);
* ``s_w`` counts the distinct outputs seen (the finite-sample stand-in for
  the number of words reachable with non-negligible probability; higher is
  more private).

Summaries across words use mean, sample standard deviation, the 5/50/95
percentiles, and the interval ``mean +/- 1.96 * std / sqrt(R)``. Two
mechanisms are called significantly different on a statistic when those
intervals are disjoint.
"""

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import _streams
from ._validation import check_epsilon, check_lambda, check_positive_int, check_seed
from .geometry import DEFAULT_EIGENVALUE_FLOOR, ScaledCovariance
from .mechanism import MahalanobisMechanism

logger = logging.getLogger(__name__)

SCHEMA = "mahamech.privstats/v1"
STATS = ("N_w", "S_w")
SUMMARY_COLUMNS = ("epsilon", "lambda", "stat", "mean", "std", "ci_low", "ci_high",
                   "p5", "p50", "p95")
RAW_COLUMNS = ("epsilon", "lambda", "word", "n_w", "s_w")
COMPARISON_COLUMNS = ("epsilon", "lambda_a", "lambda_b", "stat", "verdict")

CI_Z = 1.96

AUDIT_MAX_WORDS = 50
AUDIT_MAX_DIM = 4
AUDIT_MIN_TRIALS = 10**5
_AUDIT_CHUNK = 100_000


class AuditGuardError(ValueError):
    """The audit was asked to run outside its tractable range."""


def make_factory(store, covariance=None, eigenvalue_floor=None, **params):
    """Return ``factory(epsilon, lam, seed)`` building fitted mechanisms on `store`.

    The covariance is estimated once and shared by every mechanism built.
    """
    if covariance is None:
        floor = DEFAULT_EIGENVALUE_FLOOR if eigenvalue_floor is None else eigenvalue_floor
        covariance = ScaledCovariance(eigenvalue_floor=floor).fit(store)

    def factory(epsilon, lam, seed=0):
        mech = MahalanobisMechanism(epsilon=epsilon, lam=lam, seed=seed,
                                    covariance=covariance, **params)
        return mech.fit(store)

    return factory


# ---------------------------------------------------------------------------
# N_w / S_w experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellSummary:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    p5: float
    p50: float
    p95: float


def summarize(values, repetitions):
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    half = CI_Z * std / math.sqrt(repetitions)
    p5, p50, p95 = (float(p) for p in np.percentile(v, [5, 50, 95]))
    return CellSummary(mean, std, mean - half, mean + half, p5, p50, p95)


@dataclass(eq=False)
class PrivacyStatsReport:
    """Per-word counts over an (epsilon, lambda) grid.

    ``n_w`` and ``s_w`` have shape ``(len(epsilons), len(lambdas), len(words))``.
    """

    epsilons: list
    lambdas: list
    repetitions: int
    seed: int
    words: list
    n_w: np.ndarray
    s_w: np.ndarray
    _summaries: dict = field(default_factory=dict, repr=False)

    def cell(self, epsilon, lam):
        try:
            i = self.epsilons.index(float(epsilon))
            j = self.lambdas.index(float(lam))
        except ValueError:
            raise KeyError(f"no cell for epsilon={epsilon}, lambda={lam}") from None
        return i, j

    def summary(self, epsilon, lam):
        """``{"N_w": CellSummary, "S_w": CellSummary}`` for one grid cell."""
        i, j = self.cell(epsilon, lam)
        if (i, j) not in self._summaries:
            self._summaries[i, j] = {
                "N_w": summarize(self.n_w[i, j], self.repetitions),
                "S_w": summarize(self.s_w[i, j], self.repetitions),
            }
        return self._summaries[i, j]

    def check_invariants(self):
        """Assert the count identities on every cell.

        ``0 <= n_w <= R``, ``1 <= s_w <= R``, ``n_w = R`` implies ``s_w = 1``,
        and ``s_w <= R - n_w + 1``.
        """
        R = self.repetitions
        n, s = self.n_w, self.s_w
        problems = []
        if n.size:
            if n.min() < 0 or n.max() > R:
                problems.append("n_w outside [0, R]")
            if s.min() < 1 or s.max() > R:
                problems.append("s_w outside [1, R]")
            if np.any(s[n == R] != 1):
                problems.append("n_w = R with s_w != 1")
            if np.any(s > R - n + 1):
                problems.append("s_w > R - n_w + 1")
        if problems:
            raise AssertionError("count identities violated: " + "; ".join(problems))
        return True

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "epsilons": list(self.epsilons),
            "lambdas": list(self.lambdas),
            "repetitions": self.repetitions,
            "seed": self.seed,
            "words": list(self.words),
            "n_w": self.n_w.tolist(),
            "s_w": self.s_w.tolist(),
            "summaries": [
                {"epsilon": e, "lambda": l, "stat": stat, **asdict(cs)}
                for e, l, stat, cs in self._iter_summaries()
            ],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {data.get('schema')!r}")
        shape = (len(data["epsilons"]), len(data["lambdas"]), len(data["words"]))
        return cls(
            epsilons=[float(e) for e in data["epsilons"]],
            lambdas=[float(l) for l in data["lambdas"]],
            repetitions=int(data["repetitions"]),
            seed=int(data["seed"]),
            words=list(data["words"]),
            n_w=np.asarray(data["n_w"], dtype=np.int64).reshape(shape),
            s_w=np.asarray(data["s_w"], dtype=np.int64).reshape(shape),
        )

    def _iter_summaries(self):
        if not self.words:
            return
        for e in self.epsilons:
            for l in self.lambdas:
                cell = self.summary(e, l)
                for stat in STATS:
                    yield e, l, stat, cell[stat]

    def __eq__(self, other):
        if not isinstance(other, PrivacyStatsReport):
            return NotImplemented
        return (
            self.epsilons == other.epsilons
            and self.lambdas == other.lambdas
            and self.repetitions == other.repetitions
            and self.seed == other.seed
            and self.words == other.words
            and np.array_equal(self.n_w, other.n_w)
            and np.array_equal(self.s_w, other.s_w)
        )


def _dedupe(values, check, name):
    out = []
    for v in values:
        v = check(v)
        if v in out:
            warnings.warn(f"duplicate {name} {v} in grid collapsed", stacklevel=3)
            continue
        out.append(v)
    return out


def count_statistics(outputs, word_ids):
    """``(n_w, s_w)`` from an output-id matrix with one row per word."""
    outputs = np.asarray(outputs)
    n_w = np.count_nonzero(outputs == np.asarray(word_ids)[:, None], axis=1)
    srt = np.sort(outputs, axis=1)
    s_w = 1 + np.count_nonzero(np.diff(srt, axis=1), axis=1)
    return n_w.astype(np.int64), s_w.astype(np.int64)


def run_privacy_experiment(factory, words, epsilons, lambdas, repetitions=100, seed=0,
                           n_jobs=1, block_size=256):
    """Estimate ``n_w`` and ``s_w`` for every word on an (epsilon, lambda) grid.

    Parameters
    ----------
    factory : callable
        ``factory(epsilon, lam, seed)`` returning a fitted mechanism, e.g.
        from :func:`make_factory`.
    words : sequence of str
        Words to test; all must be in the mechanism's vocabulary.
    epsilons, lambdas : sequence of float
        Duplicates are collapsed with a warning.
    repetitions : int, default=100
    seed : int, default=0
    n_jobs : int, default=1
        Threads over word blocks. Results do not depend on it.

    Notes
    -----
    The ``repetitions`` runs for word ``w`` in cell ``(i, j)`` are the
    consecutive draws of stream ``(seed, i, j, id(w))``. Each run therefore
    gets fresh noise, and every cell and word is independent of the rest.
    """
    words = list(words)
    if not words:
        raise ValueError("word set is empty")
    epsilons = _dedupe(epsilons, check_epsilon, "epsilon")
    lambdas = _dedupe(lambdas, check_lambda, "lambda")
    repetitions = check_positive_int(repetitions, "repetitions")
    seed = check_seed(seed)

    shape = (len(epsilons), len(lambdas), len(words))
    n_w = np.zeros(shape, dtype=np.int64)
    s_w = np.zeros(shape, dtype=np.int64)

    for i, eps in enumerate(epsilons):
        for j, lam in enumerate(lambdas):
            mech = factory(eps, lam, seed)
            ids = np.array([mech.store_.id_of(w) for w in words], dtype=np.int64)
            blocks = [slice(k, k + block_size) for k in range(0, len(ids), block_size)]

            def run(sl, mech=mech, ids=ids, i=i, j=j):
                keys = [(_streams.EXPERIMENT, i, j, int(w)) for w in ids[sl]]
                out = mech.sample_output_ids(ids[sl], keys, repeats=repetitions)
                return sl, count_statistics(out, ids[sl])

            for sl, (n, s) in Parallel(n_jobs=n_jobs, prefer="threads")(
                delayed(run)(sl) for sl in blocks
            ):
                n_w[i, j, sl] = n
                s_w[i, j, sl] = s
            logger.info("epsilon=%g lambda=%g mean N_w=%.2f mean S_w=%.2f", eps, lam,
                        n_w[i, j].mean(), s_w[i, j].mean())

    report = PrivacyStatsReport(epsilons, lambdas, repetitions, seed, words, n_w, s_w)
    report.check_invariants()
    return report


def compare_summaries(a, b):
    """``"a_lower"``, ``"b_lower"`` or ``"overlapping"`` from two CellSummary CIs."""
    if a.ci_high < b.ci_low:
        return "a_lower"
    if b.ci_high < a.ci_low:
        return "b_lower"
    return "overlapping"


def compare_mechanisms(report, epsilon, lambda_a, lambda_b):
    """CI verdict per statistic between two lambda settings at one epsilon."""
    a = report.summary(epsilon, lambda_a)
    b = report.summary(epsilon, lambda_b)
    return {stat: compare_summaries(a[stat], b[stat]) for stat in STATS}


def comparison_rows(report, baseline=0.0):
    """Verdicts of every lambda against `baseline`, for each epsilon."""
    rows = []
    if baseline not in report.lambdas:
        return rows
    for e in report.epsilons:
        for l in report.lambdas:
            if l == baseline:
                continue
            for stat, verdict in compare_mechanisms(report, e, l, baseline).items():
                rows.append({"epsilon": e, "lambda_a": l, "lambda_b": baseline,
                             "stat": stat, "verdict": verdict})
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def emit_report(report, out_dir, format="csv"):
    """Write `report` under `out_dir` and return the written paths.

    ``csv`` writes ``summary.csv`` (one row per epsilon, lambda and
    statistic), ``raw_counts.csv`` (one row per epsilon, lambda and word)
    and ``comparisons.csv`` (each lambda against ``lambda = 0``). ``json``
    writes ``report.json``, which :func:`load_report` reads back.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if format == "json":
        path = out_dir / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
        return [path]
    if format != "csv":
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    summary_rows = [
        {"epsilon": e, "lambda": l, "stat": stat, **asdict(cs)}
        for e, l, stat, cs in report._iter_summaries()
    ]
    raw_rows = [
        {"epsilon": e, "lambda": l, "word": w,
         "n_w": int(report.n_w[i, j, k]), "s_w": int(report.s_w[i, j, k])}
        for i, e in enumerate(report.epsilons)
        for j, l in enumerate(report.lambdas)
        for k, w in enumerate(report.words)
    ]
    paths = [out_dir / "summary.csv", out_dir / "raw_counts.csv", out_dir / "comparisons.csv"]
    _write_csv(paths[0], SUMMARY_COLUMNS, summary_rows)
    _write_csv(paths[1], RAW_COLUMNS, raw_rows)
    _write_csv(paths[2], COMPARISON_COLUMNS, comparison_rows(report))
    return paths


def load_report(path):
    return PrivacyStatsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# DP ratio audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    epsilon: float
    lam: float
    trials: int
    noise_scale: float
    min_hits: int
    threshold_se: float
    n_inputs: int
    n_comparisons: int
    n_cells_excluded: int
    max_excess: float
    max_z: float
    violations: list
    # row-stochastic estimate of P{M(input) = output}; rows follow `inputs`
    inputs: list = field(default_factory=list)
    probabilities: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def audit_dp_ratio(factory, store, epsilon, lam, trials=10**6, seed=0, noise_scale=1.0,
                   min_hits=500, threshold_se=3.0, string_length=1, string_words=None):
    """Monte-Carlo check of ``Pr{M(x)=y} <= exp(eps * d(x, x')) * Pr{M(x')=y}``.

    For every input ``x`` the mechanism is run `trials` times and the output
    frequencies ``p(y | x)`` are tallied. For every ordered pair of inputs
    and every output seen at least `min_hits` times under both, the excess
    ``log p(y|x) - log p(y|x') - eps * d(x, x')`` is compared with its
    delta-method standard error
    ``sqrt((1 - p1) / c1 + (1 - p2) / c2)``. An excess above
    ``threshold_se`` standard errors is a violation. ``d`` is the
    regularised Mahalanobis distance under the mechanism's own metric.

    With ``string_length = 1`` the inputs are single words. With
    ``string_length = L > 1`` they are all ``L``-token strings over
    `string_words` (default: the first 4 vocabulary ids). Their distance
    is the sum of per-token distances, and each token is perturbed
    independently.

    Parameters
    ----------
    noise_scale : float, default=1.0
        Multiplies the noise radius. Values below 1 simulate a broken
        mechanism that adds too little noise, which the audit should flag.

    Raises
    ------
    AuditGuardError
        If the vocabulary has more than 50 words, the dimension exceeds 4, or
        ``trials < 100000``.
    """
    if len(store) > AUDIT_MAX_WORDS or store.dim > AUDIT_MAX_DIM:
        raise AuditGuardError(
            f"audit needs |V| <= {AUDIT_MAX_WORDS} and dim <= {AUDIT_MAX_DIM}; "
            f"got |V|={len(store)}, dim={store.dim}"
        )
    if trials < AUDIT_MIN_TRIALS:
        raise AuditGuardError(f"audit needs at least {AUDIT_MIN_TRIALS} trials, got {trials}")
    epsilon = check_epsilon(epsilon)
    lam = check_lambda(lam)
    mech = factory(epsilon, lam, seed)
    V = len(store)

    if string_length == 1:
        inputs = [(i,) for i in range(V)]
    else:
        base = list(range(min(4, V))) if string_words is None else [store.id_of(w) for w in string_words]
        grids = np.meshgrid(*([base] * string_length), indexing="ij")
        inputs = [tuple(int(g) for g in combo) for combo in zip(*(g.ravel() for g in grids))]

    n_out = V ** string_length
    counts = np.zeros((len(inputs), n_out), dtype=np.int64)
    for s, tokens in enumerate(inputs):
        for c0 in range(0, trials, _AUDIT_CHUNK):
            reps = min(_AUDIT_CHUNK, trials - c0)
            keys = [(_streams.AUDIT, string_length, s, pos, c0 // _AUDIT_CHUNK)
                    for pos in range(len(tokens))]
            out = mech.sample_output_ids(list(tokens), keys, repeats=reps, noise_scale=noise_scale)
            joint = np.zeros(reps, dtype=np.int64)
            for row in out:
                joint = joint * V + row
            counts[s] += np.bincount(joint, minlength=n_out)

    E = store.matrix
    tok = np.asarray(inputs)
    dist = np.zeros((len(inputs), len(inputs)))
    for p in range(string_length):
        diff = E[tok[:, p]][:, None, :] - E[tok[:, p]][None, :, :]
        dist += mech.metric_.norm(diff.reshape(-1, store.dim)).reshape(len(inputs), len(inputs))

    P = counts / trials
    enough = counts >= min_hits
    violations = []
    max_excess = -math.inf
    max_z = -math.inf
    n_comp = 0
    for a in range(len(inputs)):
        for b in range(len(inputs)):
            if a == b:
                continue
            ys = np.flatnonzero(enough[a] & enough[b])
            if not len(ys):
                continue
            n_comp += len(ys)
            lr = np.log(P[a, ys]) - np.log(P[b, ys])
            se = np.sqrt((1 - P[a, ys]) / counts[a, ys] + (1 - P[b, ys]) / counts[b, ys])
            excess = lr - epsilon * dist[a, b]
            z = excess / se
            max_excess = max(max_excess, float(excess.max()))
            max_z = max(max_z, float(z.max()))
            for k in np.flatnonzero(excess > threshold_se * se):
                y = int(ys[k])
                violations.append({
                    "input": [store.words[t] for t in inputs[a]],
                    "other": [store.words[t] for t in inputs[b]],
                    "output": [store.words[t] for t in _unravel(y, V, string_length)],
                    "log_ratio": float(lr[k]),
                    "bound": float(epsilon * dist[a, b]),
                    "se": float(se[k]),
                })

    return AuditReport(
        epsilon=epsilon, lam=lam, trials=int(trials), noise_scale=float(noise_scale),
        min_hits=int(min_hits), threshold_se=float(threshold_se), n_inputs=len(inputs),
        n_comparisons=n_comp, n_cells_excluded=int(np.count_nonzero(~enough)),
        max_excess=max_excess if n_comp else float("nan"),
        max_z=max_z if n_comp else float("nan"),
        violations=violations,
        inputs=[[store.words[t] for t in toks] for toks in inputs],
        probabilities=P.tolist(),
    )


def _unravel(y, V, length):
    out = []
    for _ in range(length):
        out.append(y % V)
        y //= V
    return out[::-1]
