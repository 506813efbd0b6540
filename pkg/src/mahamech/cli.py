"""Command-line interface: ``mahamech <subcommand> [options]``.

Exit status is 0 on success, 1 on a runtime or data error (including a
failed audit) and 2 on a usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._streams import RNG_VERSION
from .config import ConfigError, RunConfig
from .embeddings import EmbeddingFormatError, corpus_profile, load_embeddings
from .geometry import SIDECAR_VERSION, ScaledCovariance, regularized_metric, sidecar_paths
from .mechanism import MahalanobisMechanism, OOVError, tokenize
from .noise import NoiseSampler
from .privstats import (
    SCHEMA,
    AuditGuardError,
    audit_dp_ratio,
    comparison_rows,
    emit_report,
    make_factory,
    run_privacy_experiment,
)
from .synthetic import make_anisotropic_store

logger = logging.getLogger("mahamech")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def version_string():
    return (f"mahamech {__version__} (rng {RNG_VERSION}; covariance sidecar v{SIDECAR_VERSION}; "
            f"report {SCHEMA})")


# ---- shared plumbing ----------------------------------------------------------


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--embeddings", dest="embedding_path", help="embedding text file")
    p.add_argument("--format", dest="embedding_format", choices=["glove-text", "word2vec-text"])
    p.add_argument("--vocab", dest="vocab_paths", action="append",
                   help="corpus file whose tokens restrict the vocabulary (repeatable)")
    p.add_argument("--covariance", dest="covariance_path",
                   help="covariance sidecar stem to read (cov writes one)")
    p.add_argument("--epsilon", dest="epsilon_grid", type=_floats, help="epsilon value(s), comma-separated")
    p.add_argument("--lambda", dest="lambda_grid", type=_floats, help="lambda value(s), comma-separated")
    p.add_argument("--seed", type=int)
    p.add_argument("--eigenvalue-floor", dest="eigenvalue_floor", type=float)
    p.add_argument("--oov-policy", dest="oov_policy", choices=["pass-through", "drop", "error"])
    p.add_argument("--lowercase", action="store_const", const=True, default=None)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--synthetic-vocab-size", dest="synthetic_vocab_size", type=int)
    p.add_argument("--synthetic-dim", dest="synthetic_dim", type=int)
    p.add_argument("--synthetic-decay", dest="synthetic_decay", type=float)
    p.add_argument("--synthetic-scale", dest="synthetic_scale", type=float)
    p.add_argument("--synthetic-seed", dest="synthetic_seed", type=int)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: logical cores); never changes results")
    p.add_argument("-v", "--verbose", action="store_true")


_CONFIG_KEYS = {
    "embedding_path", "embedding_format", "vocab_paths", "covariance_path", "epsilon_grid",
    "lambda_grid", "seed", "eigenvalue_floor", "oov_policy", "lowercase", "output_dir",
    "repetitions", "word_sample", "audit_trials", "synthetic_vocab_size", "synthetic_dim",
    "synthetic_decay", "synthetic_scale", "synthetic_seed", "audit_vocab_size", "audit_dim",
    "audit_scale",
}


def build_config(args):
    base = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
    return base.merged(overrides).validate()


def echo_config(cfg):
    """Write the effective config to the output directory, if one is set."""
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "effective_config.yaml")


def _vocab_filter(cfg):
    if not cfg.vocab_paths:
        return None
    words = set()
    for path in cfg.vocab_paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                text = line.rstrip("\r\n")
                for tok in tokenize(text):
                    words.add(tok.lower() if cfg.lowercase else tok)
    return words


def load_store(cfg):
    if cfg.embedding_path:
        return load_embeddings(cfg.embedding_path, cfg.embedding_format, _vocab_filter(cfg))
    return make_anisotropic_store(
        n_words=int(cfg.synthetic_vocab_size), dim=int(cfg.synthetic_dim),
        decay=float(cfg.synthetic_decay), scale=float(cfg.synthetic_scale),
        seed=int(cfg.synthetic_seed),
    )


def load_covariance(cfg, store):
    if cfg.covariance_path and sidecar_paths(cfg.covariance_path)[0].exists():
        cov = ScaledCovariance.load(cfg.covariance_path)
        if cov.n_features_in_ != store.dim:
            raise ValueError(f"covariance sidecar has dimension {cov.n_features_in_}, "
                             f"embeddings {store.dim}")
        return cov
    return ScaledCovariance(eigenvalue_floor=cfg.eigenvalue_floor).fit(store)


def _single(values, name):
    if len(values) != 1:
        raise UsageError(f"this command takes exactly one {name} value, got {values}")
    return values[0]


def _warn_clamped(cov):
    if cov.n_clamped_:
        print(f"warning: {cov.n_clamped_} eigenvalue(s) below {cov.eigenvalue_floor:g} "
              f"clamped; covariance is rank-deficient", file=sys.stderr)


# ---- subcommands --------------------------------------------------------------


def cmd_cov(args, cfg):
    store = load_store(cfg)
    cov = ScaledCovariance(eigenvalue_floor=cfg.eigenvalue_floor).fit(store)
    target = cfg.covariance_path or str(Path(cfg.output_dir or ".") / "covariance")
    json_path, bin_path = cov.save(target)
    _warn_clamped(cov)
    top = ", ".join(f"{v:.6g}" for v in cov.eigenvalues_[:5])
    print(f"dim: {cov.n_features_in_}")
    print(f"trace: {np.trace(cov.sigma_):.12g}")
    print(f"min eigenvalue (after floor): {cov.min_eigenvalue_:.6g}")
    print(f"top eigenvalues: {top}")
    print(f"wrote {json_path} and {bin_path}")
    return EXIT_OK


def cmd_perturb(args, cfg):
    epsilon = _single(cfg.epsilon_grid, "epsilon")
    lam = _single(cfg.lambda_grid, "lambda")
    store = load_store(cfg)
    cov = load_covariance(cfg, store)
    mech = MahalanobisMechanism(
        epsilon=epsilon, lam=lam, seed=cfg.seed, oov_policy=cfg.oov_policy,
        lowercase=cfg.lowercase, covariance=cov, n_jobs=args.jobs,
    ).fit(store)
    with open(args.input, encoding="utf-8", newline="") as src, \
            open(args.output, "w", encoding="utf-8", newline="\n") as dst:
        summary = mech.perturb_corpus(src, dst, tsv=args.tsv, strict=args.strict)
    text = summary.to_json()
    print(text, file=sys.stderr)
    Path(str(args.output) + ".summary.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_stats(args, cfg):
    store = load_store(cfg)
    cov = load_covariance(cfg, store)
    words = list(store.words)
    if cfg.word_sample and cfg.word_sample < len(words):
        rng = np.random.default_rng(cfg.seed)
        pick = np.sort(rng.choice(len(words), size=cfg.word_sample, replace=False))
        words = [words[i] for i in pick]
        logger.info("word subset of %d drawn with seed %d", len(words), cfg.seed)
    factory = make_factory(store, covariance=cov, oov_policy=cfg.oov_policy,
                           lowercase=cfg.lowercase)
    report = run_privacy_experiment(factory, words, cfg.epsilon_grid, cfg.lambda_grid,
                                    repetitions=cfg.repetitions, seed=cfg.seed, n_jobs=args.jobs)
    out = Path(cfg.output_dir or ".")
    emit_report(report, out, "csv")
    if args.json:
        emit_report(report, out, "json")
    for e in report.epsilons:
        for l in report.lambdas:
            s = report.summary(e, l)
            print(f"epsilon={e:g} lambda={l:g} N_w={s['N_w'].mean:.2f}+/-{s['N_w'].std:.2f} "
                  f"S_w={s['S_w'].mean:.2f}+/-{s['S_w'].std:.2f}")
    for row in comparison_rows(report):
        print(f"epsilon={row['epsilon']:g} lambda={row['lambda_a']:g} vs {row['lambda_b']:g} "
              f"{row['stat']}: {row['verdict']}")
    return EXIT_OK


def cmd_audit(args, cfg):
    if cfg.embedding_path is None:
        store = make_anisotropic_store(
            n_words=int(cfg.audit_vocab_size), dim=int(cfg.audit_dim),
            decay=float(cfg.synthetic_decay), scale=float(cfg.audit_scale),
            seed=int(cfg.synthetic_seed),
        )
    else:
        store = load_store(cfg)
    factory = make_factory(store, eigenvalue_floor=cfg.eigenvalue_floor)
    noise_scale = 0.5 if args.inject_fault else 1.0
    results = []
    for e in cfg.epsilon_grid:
        for l in cfg.lambda_grid:
            r = audit_dp_ratio(factory, store, e, l, trials=int(cfg.audit_trials), seed=cfg.seed,
                               noise_scale=noise_scale, string_length=args.string_length)
            results.append(r.to_dict())
            status = "ok" if r.passed else "VIOLATION"
            print(f"epsilon={e:g} lambda={l:g} max_excess={r.max_excess:.4f} "
                  f"max_z={r.max_z:.2f} violations={len(r.violations)} {status}")
    if cfg.output_dir:
        Path(cfg.output_dir, "audit.json").write_text(
            json.dumps(results, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_ERROR


def cmd_sample(args, cfg):
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    epsilon = _single(cfg.epsilon_grid, "epsilon")
    lam = _single(cfg.lambda_grid, "lambda")
    store = load_store(cfg) if cfg.covariance_path is None else None
    cov = ScaledCovariance.load(cfg.covariance_path) if store is None else load_covariance(cfg, store)
    metric = regularized_metric(cov, lam)
    batch = NoiseSampler(metric, epsilon, seed=cfg.seed).sample_batch(args.count)
    dst = open(args.output, "w", encoding="utf-8", newline="\n") if args.output else sys.stdout
    try:
        dst.write(",".join([f"z_{i + 1}" for i in range(metric.dim)] + ["radius"]) + "\n")
        for z, y in zip(batch.z, batch.radius):
            dst.write(",".join(repr(float(v)) for v in z) + "," + repr(float(y)) + "\n")
    finally:
        if dst is not sys.stdout:
            dst.close()
    return EXIT_OK


def cmd_profile(args, cfg):
    profile = corpus_profile(load_store(cfg))
    text = json.dumps(profile, indent=2, sort_keys=True)
    print(text)
    if cfg.output_dir:
        Path(cfg.output_dir, "profile.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mahamech", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawTextHelpFormatter)
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cov", help="compute and save the scaled covariance")
    _common(p)
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("perturb", help="perturb a corpus, one record per line")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tsv", action="store_true", help="lines are 'label<TAB>text'")
    p.add_argument("--strict", action="store_true", help="abort on malformed lines")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("stats", help="N_w / S_w privacy statistics over the grids")
    _common(p)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--word-sample", dest="word_sample", type=int)
    p.add_argument("--json", action="store_true", help="also write report.json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("audit", help="Monte-Carlo audit of the metric-DP ratio bound")
    _common(p)
    p.add_argument("--trials", dest="audit_trials", type=int)
    p.add_argument("--vocab-size", dest="audit_vocab_size", type=int,
                   help="synthetic audit vocabulary size (max 50)")
    p.add_argument("--dim", dest="audit_dim", type=int, help="synthetic audit dimension (max 4)")
    p.add_argument("--audit-scale", dest="audit_scale", type=float)
    p.add_argument("--string-length", type=int, default=1)
    p.add_argument("--inject-fault", action="store_true",
                   help="halve the noise radius; the audit must then fail")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sample", help="draw noise vectors as CSV")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("profile", help="nearest-neighbour density profile of a vocabulary")
    _common(p)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        echo_config(cfg)
        return args.func(args, cfg)
    except (UsageError, ConfigError, AuditGuardError) as exc:
        print(f"mahamech {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EmbeddingFormatError, OOVError, OSError, ValueError) as exc:
        print(f"mahamech {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
