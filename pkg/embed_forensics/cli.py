"""
Command line interface.

::

    embed-forensics <command> [options]

Every command writes its data files and ``<command>.report.json`` (next to
the embedding file for ``embed``). The exit status is 0 on success, 2 for
bad input or missing files and 1 for anything else.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .anomaly import (
    ContaminationSpec,
    fit_forest,
    roc,
    run_contamination_experiment,
    score,
    tune_forest,
)
from .discriminant import SplitSpec, compare_embedders, evaluate, fit_lda, split, transform_ld
from .errors import ConfigurationError, ValidationError
from .featurize import PRESETS, LabelRule, build_indicator, rule_from_dict
from .ingest import (
    EmbeddingServiceConfig,
    dataset_from_matrix,
    fetch_embeddings,
    join,
    load_dataset,
    load_embeddings,
    restrict_labels,
    save_embeddings,
)
from .regress import regress_indicator, regress_multi, regression_table
from .reports import REPORT_SUFFIX, build_report, write_report, write_table
from .stats_core import (
    RECORDED_PC_BUDGETS,
    cumulative_at,
    fit_kde,
    fit_pca,
    fit_scaler,
    group_kde,
    project,
    scree_elbow,
    scree_table,
    transform,
)

logger = logging.getLogger(__name__)

PROG = "embed-forensics"
# parser plumbing, never set from a config file
_PLUMBING = {"handler", "verbose", "config"}
# options that never go into a report's config echo; results do not depend on them
_NOT_ECHOED = _PLUMBING | {"n_jobs"}


def _components_arg(text):
    if text == "elbow":
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'elbow', got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _pcs_arg(text):
    if text == "recorded":
        return text
    return _components_arg(text)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _where_arg(text):
    kind, sep, value = text.partition(":")
    labels = tuple(v for v in value.split(",") if v)
    if kind != "label" or not sep or not labels:
        raise argparse.ArgumentTypeError(f"expected label:A[,B...], got {text!r}")
    return labels


@dataclass(frozen=True)
class RunConfig:
    """
    What one invocation works on.

    Every referenced input path must exist when the run starts.
    """

    embeddings: tuple = ()
    labels: str = None
    texts: str = None
    standardize: bool = False
    n_components: object = "elbow"
    seed: int = 0
    output_dir: str = "."
    deterministic: bool = False
    service: EmbeddingServiceConfig = None
    where: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "embeddings", tuple(str(p) for p in self.embeddings))
        for path in (*self.embeddings, self.labels, self.texts):
            if path is not None and not Path(path).is_file():
                raise ConfigurationError(f"input file not found: {path}")
        if not 0 <= self.seed < 2**32:
            raise ConfigurationError(f"seed must be an unsigned 32 bit integer, got {self.seed}")
        if self.n_components != "elbow" and not (
            isinstance(self.n_components, int) and self.n_components >= 1
        ):
            raise ConfigurationError(
                f"n_components must be a positive integer or 'elbow', got {self.n_components!r}"
            )

    @classmethod
    def from_args(cls, args):
        embeddings = []
        for name in ("embeddings", "reference", "contaminants"):
            value = getattr(args, name, None)
            if value is None:
                continue
            if isinstance(value, list):
                embeddings.extend(path for _, path in map(_named_path, value))
            else:
                embeddings.append(value)
        service = None
        if getattr(args, "service_url", None) is not None:
            service = EmbeddingServiceConfig(
                base_url=args.service_url,
                auth_token_env=args.auth_token_env,
                batch_size=args.batch_size,
                timeout=args.timeout,
                pooling=args.pooling,
            )
        return cls(
            embeddings=embeddings,
            labels=getattr(args, "labels", None),
            texts=getattr(args, "texts", None),
            standardize=args.standardize,
            n_components=getattr(args, "n_components", "elbow"),
            seed=args.seed,
            output_dir=str(getattr(args, "out", ".")),
            deterministic=args.deterministic,
            service=service,
            where=getattr(args, "where", None),
        )

    def to_dict(self):
        out = asdict(self)
        out["embeddings"] = list(self.embeddings)
        return out


def _named_path(text):
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise ConfigurationError(f"expected NAME=PATH, got {text!r}")
    return name, path


# ----------------------------------------------------------------- helpers


def _echo(args):
    return {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in _NOT_ECHOED
    }


def _inputs(run):
    return {
        "embeddings": list(run.embeddings) or None,
        "labels": run.labels,
        "texts": run.texts,
    }


def _finish(args, run, results, rules=None, report_path=None):
    report = build_report(
        args.command,
        {"run": run.to_dict(), "options": _echo(args)},
        run.seed,
        results,
        inputs=_inputs(run),
        rules=rules,
        deterministic=run.deterministic,
    )
    if report_path is None:
        report_path = Path(run.output_dir) / f"{args.command}{REPORT_SUFFIX}"
    write_report(report, report_path)
    return 0


def _load_matrix(path, run):
    if run.where is not None:
        return _load_labeled(path, run)[1]
    m = load_embeddings(path)
    if run.labels is not None:
        m = join(load_dataset(run.labels), m)
    return m


def _load_labeled(path, run):
    """
    Dataset and aligned embeddings; labels come from --labels or the file.

    With --where only the samples carrying one of the listed labels are kept.
    """
    m = load_embeddings(path)
    if run.labels is not None:
        d = load_dataset(run.labels)
        m = join(d, m)
    else:
        d = dataset_from_matrix(m)
    if run.where is not None:
        d, m = restrict_labels(d, m, run.where)
    return d, m


def _maybe_standardize(run, m):
    if not run.standardize:
        return m
    return transform(fit_scaler(m), m)


def _fit_pca(m, n_components):
    """Fitted PCA and the number of leading components to keep."""
    limit = min(m.rows - 1, m.dims)
    if n_components == "elbow":
        model = fit_pca(m, limit)
        return model, scree_elbow(model.explained_variance)
    if n_components > limit:
        raise ValidationError(f"n_components={n_components} exceeds min(N - 1, D) = {limit}")
    return fit_pca(m, n_components), n_components


def _score_frame(m, scores, columns):
    frame = pd.DataFrame(np.asarray(scores), columns=columns)
    frame.insert(0, "id", list(m.sample_ids))
    if m.labels is not None:
        frame.insert(1, "label", list(m.labels))
    return frame


def _parse_indicator(text):
    """
    Indicator rule from the command line.

    ``label:A[,B...]``, ``preset:NAME`` (or a bare preset name), or
    ``rule:PATH`` for a JSON rule file.
    """
    kind, sep, value = text.partition(":")
    if not sep:
        kind, value = "preset", text
    if kind == "label":
        return LabelRule(tuple(v for v in value.split(",") if v))
    if kind == "preset":
        try:
            return PRESETS[value]
        except KeyError:
            raise ConfigurationError(
                f"unknown preset {value!r}; choose from {sorted(PRESETS)}"
            ) from None
    if kind == "rule":
        with open(value, "r", encoding="utf-8") as fin:
            return rule_from_dict(json.load(fin))
    raise ConfigurationError(f"cannot parse indicator {text!r}")


def _component_scores(args, run, d, m):
    """Scores on the requested 1-based PC or LD components, and their names."""
    components = args.components
    if min(components) < 1:
        raise ValidationError("components are 1-based")
    m = _maybe_standardize(run, m)
    if args.space == "lda":
        model = fit_lda(m, d.labels, shrinkage=args.shrinkage, class_names=d.class_names)
        scores = transform_ld(model, m, [c - 1 for c in components])
        return scores, [f"LD{c}" for c in components]
    k = max(components)
    if run.n_components != "elbow":
        k = max(k, run.n_components)
    model, _ = _fit_pca(m, k)
    scores = project(model, m, [c - 1 for c in components])
    return scores, [f"PC{c}" for c in components]


# ---------------------------------------------------------------- commands


def cmd_embed(args, run):
    if run.service is None:
        raise ConfigurationError("--service-url is required")
    d = load_dataset(run.texts)
    for j, s in enumerate(d.samples):
        if s.text is None:
            raise ValidationError("record has no text", row=j + 1, sample_id=s.id)
    m = fetch_embeddings(run.service, d.texts, ids=d.ids, labels=d.labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(m, out)
    results = {"rows": m.rows, "dims": m.dims, "output": str(out)}
    return _finish(args, run, results, report_path=out.with_name(out.name + REPORT_SUFFIX))


def cmd_pca(args, run):
    m = _maybe_standardize(run, _load_matrix(args.embeddings, run))
    model, k = _fit_pca(m, run.n_components)
    out = Path(run.output_dir)
    columns = [f"PC{i + 1}" for i in range(k)]
    write_table(_score_frame(m, project(model, m, range(k)), columns), out / "pca_scores.csv")
    write_table(scree_table(model), out / "scree.csv")
    results = {
        "n": m.rows,
        "d": m.dims,
        "n_components": k,
        "explained_variance_ratio": model.explained_variance_ratio[:k].tolist(),
        "cumulative_ratio": cumulative_at(model, k),
    }
    return _finish(args, run, results)


def cmd_scree(args, run):
    m = _maybe_standardize(run, _load_matrix(args.embeddings, run))
    limit = min(m.rows - 1, m.dims)
    k = limit if run.n_components == "elbow" else min(run.n_components, limit)
    model = fit_pca(m, k)
    elbow = scree_elbow(model.explained_variance)
    write_table(scree_table(model), Path(run.output_dir) / "scree.csv")
    results = {
        "n": m.rows,
        "components_fitted": k,
        "elbow": elbow,
        "cumulative_at_elbow": cumulative_at(model, elbow),
    }
    budget = RECORDED_PC_BUDGETS.get(m.rows)
    if budget is not None and budget <= k:
        results["recorded_budget"] = budget
        results["cumulative_at_recorded_budget"] = cumulative_at(model, budget)
    return _finish(args, run, results)


def cmd_lda(args, run):
    d, m = _load_labeled(args.embeddings, run)
    s = SplitSpec(train_fraction=args.train_fraction, seed=run.seed, stratified=args.stratified)
    (train, train_labels), (test, test_labels) = split(d, m, s)
    if run.standardize:
        scaler = fit_scaler(train)
        train, test, m = (transform(scaler, x) for x in (train, test, m))
    model = fit_lda(train, train_labels, shrinkage=args.shrinkage, class_names=d.class_names)
    accuracy, confusion = evaluate(model, test, test_labels)

    out = Path(run.output_dir)
    scores = _score_frame(m, transform_ld(model, m), [f"LD{i + 1}" for i in range(model.n_axes)])
    in_test = set(test.sample_ids)
    scores["split"] = ["test" if i in in_test else "train" for i in m.sample_ids]
    write_table(scores, out / "lda_scores.csv")
    write_table(confusion.to_frame().reset_index(), out / "confusion.csv")
    results = {
        "accuracy": accuracy,
        "confusion": confusion.to_dict(),
        "model": model.metadata(),
        "n_train": train.rows,
        "n_test": test.rows,
    }
    return _finish(args, run, results)


def cmd_regress(args, run):
    d, m = _load_labeled(args.embeddings, run)
    scores, names = _component_scores(args, run, d, m)
    response = ", ".join(names)
    reports, rules = [], []
    for text in args.indicator:
        feature = build_indicator(_parse_indicator(text), d)
        if len(names) == 1:
            r = regress_indicator(scores[:, 0], feature.values)
        else:
            r = regress_multi(scores, feature.values)
        reports.append(r.named(response, feature.name))
        rules.append(feature.definition)
    write_table(regression_table(reports), Path(run.output_dir) / "regressions.csv")
    results = {"regressions": [r.to_dict() for r in reports]}
    return _finish(args, run, results, rules=rules)


def cmd_kde(args, run):
    d, m = _load_labeled(args.embeddings, run)
    scores, names = _component_scores(args, run, d, m)
    feature = build_indicator(_parse_indicator(args.indicator), d)
    values = scores[:, 0]
    pad = 0.1 * (values.max() - values.min())
    grid = np.linspace(values.min() - pad, values.max() + pad, args.grid_points)
    densities = group_kde(values, feature.values, grid, bandwidth=args.bandwidth)
    frame = pd.DataFrame({"x": grid})
    for group, density in sorted(densities.items()):
        frame[f"density_{group}"] = density
    write_table(frame, Path(run.output_dir) / "kde.csv")
    results = {
        "component": names[0],
        "indicator": feature.name,
        "group_sizes": {str(g): int(np.sum(feature.values == g)) for g in (0, 1)},
        "bandwidth": {
            str(g): fit_kde(values[feature.values == g], args.bandwidth).bandwidth
            for g in sorted(densities)
        },
    }
    return _finish(args, run, results, rules=[feature.definition])


def _detect_grid(args, run):
    spec = ContaminationSpec(
        n_reference=tuple(args.n_reference),
        m_contaminants=tuple(args.m_contaminants),
        n_pcs=args.n_pcs,
        seeds=args.seeds,
        max_trees=args.max_trees,
        subsample=args.subsample,
        pca_on_reference_only=args.pca_reference_only,
        seed=run.seed,
    )
    reference = load_embeddings(args.reference)
    contaminants = load_embeddings(args.contaminants)
    result = run_contamination_experiment(reference, contaminants, spec, n_jobs=args.n_jobs)
    out = Path(run.output_dir)
    write_table(result.table, out / "auroc_table.csv")
    write_table(result.summary, out / "auroc_summary.csv")
    for n, curve in sorted(result.median_roc.items()):
        write_table(curve.to_frame(), out / f"median_roc_N{n}.csv")
    return _finish(args, run, result.to_dict())


def cmd_detect(args, run):
    if args.grid:
        if args.reference is None or args.contaminants is None:
            raise ConfigurationError("--grid needs --reference and --contaminants")
        if run.where is not None:
            raise ConfigurationError("--where does not apply to --grid")
        return _detect_grid(args, run)
    if args.embeddings is None or args.positive_label is None:
        raise ConfigurationError("--embeddings and --positive-label are required")
    d, m = _load_labeled(args.embeddings, run)
    if args.positive_label not in d.class_names:
        raise ValidationError(f"unknown label {args.positive_label!r}")
    truth = np.array([1 if label == args.positive_label else 0 for label in d.labels])
    m = _maybe_standardize(run, m)
    n_pcs = args.n_pcs
    if n_pcs == "recorded":
        n_pcs = RECORDED_PC_BUDGETS.get(m.rows, run.n_components)
    model, k = _fit_pca(m, n_pcs)
    scores = project(model, m, range(k))
    if args.n_trees is None:
        n_trees = tune_forest(
            scores,
            truth,
            max_trees=args.max_trees,
            seeds=args.seeds,
            subsample=args.subsample,
            seed=run.seed,
        )
    else:
        n_trees = args.n_trees
    forest = fit_forest(scores, n_trees=n_trees, subsample=args.subsample, seed=run.seed)
    anomaly = score(forest, scores)
    curve = roc(anomaly, truth)

    out = Path(run.output_dir)
    frame = _score_frame(m, anomaly[:, None], ["score"])
    frame["truth"] = truth
    write_table(frame, out / "anomaly_scores.csv")
    write_table(curve.to_frame(), out / "roc.csv")
    results = {
        "auroc": curve.auroc,
        "n_trees": n_trees,
        "n_pcs": k,
        "subsample_size": forest.subsample_size,
        "positives": int(truth.sum()),
    }
    return _finish(args, run, results)


def cmd_compare(args, run):
    d = load_dataset(run.labels) if run.labels is not None else None
    embedders = {}
    for name, path in map(_named_path, args.embeddings):
        m = load_embeddings(path)
        if d is not None:
            m = join(d, m)
        labels = d.labels if d is not None else dataset_from_matrix(m).labels
        embedders[name] = (_maybe_standardize(run, m), labels)
    s = SplitSpec(train_fraction=args.train_fraction, seed=run.seed, stratified=args.stratified)
    table = compare_embedders(embedders, s, shrinkage=args.shrinkage)
    write_table(table, Path(run.output_dir) / "compare.csv")
    return _finish(args, run, {"accuracy": table.to_dict(orient="records")})


# ------------------------------------------------------------------ parser


def build_parser():
    """
    Returns
    -------
    parser : ArgumentParser
    commands : dict
        Sub-command name to its sub-parser.
    """
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Interpretable analysis of latent embeddings: PCA, LDA, "
        "cluster regression and contamination detection.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
    common.add_argument(
        "--standardize", action="store_true", help="standardize each dimension first"
    )
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="leave wall-clock fields out of reports",
    )
    common.add_argument("--config", type=Path, default=None, help="YAML file of option values")
    common.add_argument("-v", "--verbose", action="count", default=0)

    outdir = argparse.ArgumentParser(add_help=False)
    outdir.add_argument("--out", type=Path, default=Path("."), help="output directory")

    embedded = argparse.ArgumentParser(add_help=False)
    embedded.add_argument("--embeddings", type=Path, help="jsonl, csv or packed binary file")
    embedded.add_argument("--labels", type=Path, default=None, help="jsonl dataset to join")
    embedded.add_argument(
        "--where", type=_where_arg, default=None, help="label:A[,B...] keeps only those samples"
    )

    components = argparse.ArgumentParser(add_help=False)
    components.add_argument("--n-components", type=_components_arg, default="elbow")

    projected = argparse.ArgumentParser(add_help=False)
    projected.add_argument("--space", choices=("pca", "lda"), default="pca")
    projected.add_argument(
        "--components", type=_int_list, default=[1], help="1-based, comma separated"
    )
    projected.add_argument("--shrinkage", type=float, default=None)

    splitting = argparse.ArgumentParser(add_help=False)
    splitting.add_argument("--train-fraction", type=float, default=0.8)
    splitting.add_argument("--no-stratify", dest="stratified", action="store_false")
    splitting.add_argument("--shrinkage", type=float, default=None)

    subparsers = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, handler, parents, help):
        sub = subparsers.add_parser(name, parents=[common, *parents], help=help)
        sub.set_defaults(handler=handler)
        commands[name] = sub
        return sub

    sub = add("embed", cmd_embed, [], "fetch embeddings from a service")
    sub.add_argument("--texts", type=Path, required=True, help="jsonl dataset with texts")
    sub.add_argument("--out", type=Path, required=True, help="embedding file to write")
    sub.add_argument("--service-url", default=None)
    sub.add_argument("--auth-token-env", default=None, help="variable holding the token")
    sub.add_argument("--batch-size", type=int, default=32)
    sub.add_argument("--timeout", type=float, default=30.0)
    sub.add_argument(
        "--pooling",
        choices=("service_pooled", "mean_pool_then_normalize"),
        default="service_pooled",
    )

    add("pca", cmd_pca, [outdir, embedded, components], "principal component scores")
    add("scree", cmd_scree, [outdir, embedded, components], "scree table and elbow")

    sub = add("lda", cmd_lda, [outdir, embedded, splitting], "train and test an LDA")

    sub = add("regress", cmd_regress, [outdir, embedded, components, projected], "cluster regression")
    sub.add_argument("--indicator", action="append", required=True)

    sub = add("kde", cmd_kde, [outdir, embedded, components, projected], "score densities")
    sub.add_argument("--indicator", required=True)
    sub.add_argument("--grid-points", type=int, default=256)
    sub.add_argument("--bandwidth", type=float, default=None)

    sub = add("detect", cmd_detect, [outdir, embedded, components], "isolation forest detection")
    sub.add_argument("--positive-label", default=None)
    sub.add_argument("--n-trees", type=int, default=None, help="tuned when omitted")
    sub.add_argument("--n-pcs", type=_pcs_arg, default="recorded")
    sub.add_argument("--subsample", type=int, default=None)
    sub.add_argument("--seeds", type=int, default=50)
    sub.add_argument("--max-trees", type=int, default=200)
    sub.add_argument("--grid", action="store_true", help="run the N x M contamination sweep")
    sub.add_argument("--reference", type=Path, default=None)
    sub.add_argument("--contaminants", type=Path, default=None)
    sub.add_argument("--n-reference", type=_int_list, default=[100, 200, 300, 400, 500, 1000, 2000])
    sub.add_argument("--m-contaminants", type=_int_list, default=[1, 2, 4, 6, 8, 10, 12, 15, 20])
    sub.add_argument("--pca-reference-only", action="store_true")
    sub.add_argument("--n-jobs", type=int, default=1)

    sub = add("compare", cmd_compare, [outdir, splitting], "LDA accuracy per embedder")
    sub.add_argument("--embeddings", action="append", required=True, help="NAME=PATH")
    sub.add_argument("--labels", type=Path, default=None)

    return parser, commands


def _apply_config_file(parser, sub, argv, args):
    with open(args.config, "r", encoding="utf-8") as fin:
        values = yaml.safe_load(fin) or {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"{args.config} must hold a mapping of option values")
    values = {key.replace("-", "_"): value for key, value in values.items()}
    unknown = sorted(set(values) - set(vars(args)) | (set(values) & _PLUMBING))
    if unknown:
        raise ConfigurationError(f"unknown options in {args.config}: {unknown}")
    # flags given on the command line still win over file values
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _configure_logging(verbose):
    level = max(logging.DEBUG, logging.WARNING - 10 * verbose)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("embed_forensics").setLevel(level)
    logging.getLogger("urllib3").setLevel(level=logging.WARNING)


def main(argv=None):
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.config is not None:
            args = _apply_config_file(parser, commands[args.command], argv, args)
        run = RunConfig.from_args(args)
        return args.handler(args, run)
    except (ValidationError, FileNotFoundError) as err:
        print(f"{PROG} {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        logger.debug("internal error", exc_info=True)
        print(f"{PROG} {args.command}: internal error: {err!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
