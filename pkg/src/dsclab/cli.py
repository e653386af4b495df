"""Command-line entry point.

Subcommands run one stage each on serialized artifacts (``generate`` ->
``train`` -> ``audit`` / ``score`` -> ``eval``; ``bounds``), or the whole grid
(``run``) followed by ``summarize``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bounds as bnd
from .formats import (
    MODEL_MAGIC,
    TEACHER_MAGIC,
    FormatError,
    load_container,
    load_features,
    read_manifest,
    save_container,
    save_features,
    save_scorer,
    write_manifest,
)
from .harness import (
    BOUNDS_HEADER,
    GEOMETRY_HEADER,
    ConfigError,
    ExperimentConfig,
    backbone_of,
    build_data,
    config_lines,
    lambda_sweep,
    parse_config,
    parse_config_text,
    read_report,
    run_experiment,
    stage_rng,
    summarize,
    SUMMARY_HEADER,
    train_student,
    write_outputs,
    write_table,
)
from .metrics import evaluate
from .residual import teacher_stats
from .scorers import VARIANTS, fit_knn, fit_scorer
from .specmath import FeatureMatrix, class_subspace, covariance_split, nullspace_audit, spectral_summary
from .student import MLPStudent, NumericalAbort, features
from .synthgen import SPLITS

log = logging.getLogger("dsclab")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"malformed lambda list {text!r}") from None


def _load_cfg(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else parse_config_text("")
    overrides = {}
    if getattr(args, "lambda_", None):
        overrides["lambda_grid"] = _float_list(args.lambda_)
    if getattr(args, "scorers", None):
        overrides["scorers"] = tuple(s.strip().upper() for s in args.scorers.split(","))
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = (args.seed,)
    return replace(cfg, **overrides) if overrides else cfg


def _cfg_from_manifest(path: Path) -> ExperimentConfig:
    if not path.is_file():
        raise ConfigError(f"missing {path}")
    return parse_config_text(path.read_text())


def _data_dir(path) -> tuple[ExperimentConfig, int, dict[str, FeatureMatrix], dict[str, FeatureMatrix]]:
    d = Path(path)
    meta = read_manifest(d / "manifest.txt")
    cfg = _cfg_from_manifest(d / "config.txt")
    c_train, c_total = cfg.generator.c_train, cfg.generator.c_total
    ncls = {"train": c_train, "id_test": c_train, "indomain_ood": c_total, "outdomain_ood": c_train}
    inputs = {s: load_features(d / f"{s}.dscf", ncls[s]) for s in SPLITS}
    teacher = {s: load_features(d / f"teacher_{s}.dscf", ncls[s]) for s in SPLITS}
    return cfg, int(meta["seed"]), inputs, teacher


def _load_student(model_dir) -> MLPStudent:
    _, arrays = load_container(Path(model_dir) / "student.dscm", MODEL_MAGIC)
    return MLPStudent.from_arrays(arrays)


# subcommands -------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data, emb = build_data(cfg, seed)
    for s in SPLITS:
        split = data.split(s)
        save_features(out / f"{s}.dscf", FeatureMatrix(split.x, split.labels, split.n_classes))
        save_features(out / f"teacher_{s}.dscf", FeatureMatrix(emb[s], split.labels, split.n_classes))
    (out / "config.txt").write_text("\n".join(config_lines(cfg)) + "\n")
    write_manifest(out / "manifest.txt", {"seed": seed, "root_seed": cfg.root_seed, "n": cfg.generator.n})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, seed, inputs, teacher = _data_dir(args.data)
    if args.config:
        cfg = replace(cfg, train=parse_config(args.config).train)
    lam = _float_list(args.lambda_)[0] if args.lambda_ else 1.0
    data, emb = build_data(cfg, seed)
    if not np.array_equal(data.train.x, inputs["train"].data):
        raise ConfigError("data directory does not match its recorded config")
    student, trace = train_student(cfg, data, emb, lam, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_container(out / "student.dscm", MODEL_MAGIC, 0, student.to_arrays())
    if lam != 0.0:
        stats = teacher_stats(teacher["train"], cfg.train.projector_eps)
        save_container(out / "teacher_stats.dsct", TEACHER_MAGIC, 0, stats.to_arrays())
    for s in SPLITS:
        z = features(student, inputs[s].data)
        save_features(out / f"features_{s}.dscf", FeatureMatrix(z, inputs[s].labels, inputs[s].n_classes))
    rows = [[backbone_of(lam), lam, seed, *r] for r in trace.rows()]
    write_table(out, "geometry", GEOMETRY_HEADER, rows, args.format)
    write_manifest(out / "manifest.txt", {"lambda": repr(lam), "seed": seed})
    return EXIT_OK


def _student_feats(args):
    cfg, seed, inputs, teacher = _data_dir(args.data)
    student = _load_student(args.model)
    z = {s: FeatureMatrix(features(student, inputs[s].data), inputs[s].labels, inputs[s].n_classes) for s in SPLITS}
    return cfg, seed, student, z, teacher


AUDIT_HEADER = ("split", "r_eff", "pr", "rho_k", "rho_within", "id_mean", "ood_mean", "separated")


def cmd_audit(args) -> int:
    cfg, _, _, z, _ = _student_feats(args)
    c = cfg.generator.c_train
    k = max(c - 1, 1)
    cov = covariance_split(z["train"])
    summ = spectral_summary(cov, [k])
    projector = class_subspace(cov, k)
    rows = []
    for split in ("indomain_ood", "outdomain_ood"):
        audit = nullspace_audit(z["id_test"].data, z[split].data, projector)
        rows.append([split, summ.r_eff, summ.pr, summ.rho_k[k], summ.rho_within,
                     audit.id_mean, audit.ood_mean, int(audit.separated)])
    write_table(args.out, "audit", AUDIT_HEADER, rows, args.format)
    return EXIT_OK


def cmd_score(args) -> int:
    cfg, _, student, z, teacher = _student_feats(args)
    names = tuple(s.strip().upper() for s in args.scorers.split(",")) if args.scorers else cfg.scorers
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown scorers {bad}")
    out = Path(args.out)
    (out / "scorers").mkdir(parents=True, exist_ok=True)
    scores = {s: {} for s in ("id_test", "indomain_ood", "outdomain_ood")}
    for name in names:
        fitted = fit_scorer(name, z["train"], student.head(), teacher["train"], cfg.scorer)
        save_scorer(out / "scorers" / f"{name}.dscs", fitted)
        src = teacher if name == "TEACHER_MDS" else z
        for s in scores:
            scores[s][name] = fitted.score(src[s].data)
    for s, cols in scores.items():
        n = z[s].n
        write_table(out, f"scores_{s}", list(cols), [[cols[c][i] for c in cols] for i in range(n)], "csv")
    return EXIT_OK


def _read_scores(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = np.array([[float(v) for v in r] for r in reader if r], dtype=np.float64)
    return {h: body[:, j] for j, h in enumerate(header)}


EVAL_HEADER = ("split", "scorer", "fpr95", "fpr98", "auroc", "aupr_in", "aupr_out", "n_id", "n_ood")


def cmd_eval(args) -> int:
    d = Path(args.scores)
    s_id = _read_scores(d / "scores_id_test.csv")
    rows = []
    for split, key in (("indomain", "indomain_ood"), ("outdomain", "outdomain_ood")):
        s_ood = _read_scores(d / f"scores_{key}.csv")
        for name in s_id:
            ev = evaluate(s_id[name], s_ood[name])
            rows.append([split, name, ev.fpr_at_95, ev.fpr_at_98, ev.auroc, ev.aupr_in, ev.aupr_out, ev.n_id, ev.n_ood])
    write_table(args.out, "report", EVAL_HEADER, rows, args.format)
    return EXIT_OK


def cmd_bounds(args) -> int:
    cfg, seed, student, z, _ = _student_feats(args)
    c = cfg.generator.c_train
    projector = class_subspace(covariance_split(z["train"]), max(c - 1, 1))
    knn = fit_knn(z["train"], cfg.bound_knn_k, normalize=False)
    meta = read_manifest(Path(args.model) / "manifest.txt")
    lam = float(meta.get("lambda", "0.0"))
    rng = stage_rng(cfg.root_seed, seed, "bounds", lam)
    rows = []
    for split, key in (("indomain", "indomain_ood"), ("outdomain", "outdomain_ood")):
        x_id, x_ood = z["id_test"].data, z[key].data
        for rep in (bnd.check_theorem1(x_id, x_ood, knn, projector, cfg.bound_pairs, rng),
                    bnd.check_prop1(x_id, x_ood, student.head(), projector, "energy", cfg.bound_pairs, rng),
                    bnd.check_prop1(x_id, x_ood, student.head(), projector, "msp", cfg.bound_pairs, rng)):
            rows.append([f"{split}_{rep.kind}", backbone_of(lam), lam, seed, split, *rep.row()])
    write_table(args.out, "bounds", BOUNDS_HEADER, rows, args.format)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg, str(out), jobs=max(1, args.jobs))
    write_outputs(result, out, args.format)
    (out / "config.txt").write_text("\n".join(config_lines(cfg)) + "\n")
    return EXIT_OK


def cmd_summarize(args) -> int:
    rows = read_report(args.report)
    write_table(args.out, "summary", SUMMARY_HEADER, summarize(rows), args.format)
    for metric in ("fpr95", "auroc"):
        header, body = lambda_sweep(rows, metric)
        write_table(args.out, f"lambda_sweep_{metric}", header, body, args.format)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "audit": cmd_audit, "score": cmd_score,
    "eval": cmd_eval, "bounds": cmd_bounds, "run": cmd_run, "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsclab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *, config=False, out=True, data=False, model=False, fmt=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", metavar="PATH")
        if out:
            p.add_argument("--out", metavar="DIR", required=name != "run")
        if data:
            p.add_argument("--data", metavar="DIR", required=True, help="output directory of 'generate'")
        if model:
            p.add_argument("--model", metavar="DIR", required=True, help="output directory of 'train'")
        if fmt:
            p.add_argument("--format", choices=("csv", "json"), default="csv")
        return p

    p = add("generate", "draw the synthetic splits and teacher embeddings", config=True, fmt=False)
    p.add_argument("--seed", type=int, default=None, help="grid seed (default: first configured seed)")

    p = add("train", "train one student on a generated data directory", config=True, data=True)
    p.add_argument("--lambda", dest="lambda_", metavar="X", help="guidance weight (0 = plain cross-entropy)")

    add("audit", "spectral and null-space audit of a trained student", data=True, model=True)
    p = add("score", "fit scorers and write per-sample scores", data=True, model=True, fmt=False)
    p.add_argument("--scorers", metavar="LIST")
    p = add("eval", "metrics from score files written by 'score'")
    p.add_argument("--scores", metavar="DIR", required=True)
    add("bounds", "plug-in bound checks for a trained student", data=True, model=True)

    p = add("run", "full grid: lambda x seeds x scorers x OOD splits", config=True)
    p.add_argument("--seed", type=int, default=None, help="restrict the grid to one seed")
    p.add_argument("--lambda", dest="lambda_", metavar="LIST", help="comma-separated lambda grid")
    p.add_argument("--scorers", metavar="LIST")
    p.add_argument("--jobs", type=int, default=1)

    p = add("summarize", "aggregate a report across seeds")
    p.add_argument("--report", metavar="PATH", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except RuntimeError as exc:
        if isinstance(exc.__cause__, NumericalAbort):
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
