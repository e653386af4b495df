"""Experiment grid: config parsing, seed streams, per-cell pipeline and report tables.

Seed streams
------------
Every random draw comes from ``SeedSequence(root_seed, spawn_key=key)`` with

    key = (seed, stage_code)                  for data, teacher, init, shuffle
    key = (seed, stage_code, lambda_micro)    for bounds

where ``lambda_micro = round(lambda * 1e6)``. Training streams do not depend on
lambda, so CE and TGT cells of one seed share data, teacher, initial weights and
batch order. Scorer fitting is deterministic and draws nothing.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bounds as bnd
from .formats import MODEL_MAGIC, TEACHER_MAGIC, save_container, save_scorer, write_csv
from .metrics import evaluate
from .residual import teacher_stats
from .scorers import VARIANTS, ScorerConfig, fit_knn, fit_scorer
from .specmath import FeatureMatrix, class_subspace, covariance_split, spectral_summary
from .student import NumericalAbort, Probe, TrainConfig, features, init_student, logits_of, train
from .synthgen import GeneratorSpec, SyntheticData, gen_single_domain, make_teacher, teacher_embed

STAGES = {"data": 1, "teacher": 2, "init": 3, "shuffle": 4, "bounds": 5}
OOD_SPLITS = (("indomain", "indomain_ood"), ("outdomain", "outdomain_ood"))
METRICS = ("fpr95", "fpr98", "auroc", "aupr_in", "aupr_out", "accuracy", "r_eff", "pr", "rho_k", "rho_within")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


def stage_rng(root_seed: int, seed: int, stage: str, lam: float | None = None) -> np.random.Generator:
    key = (int(seed), STAGES[stage])
    if lam is not None:
        key += (int(round(lam * 1e6)),)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=key))


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(record_geometry_every=10))
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    lambda_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    scorers: tuple[str, ...] = VARIANTS
    root_seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    d_feat: int = 32
    probe_size: int = 1024
    bound_knn_k: int = 10
    bound_pairs: int = bnd.DEFAULT_PAIRS
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not self.lambda_grid or not self.seeds or not self.scorers:
            raise ConfigError("lambda_grid, seeds and scorers must be nonempty")
        if any(lam < 0 or not math.isfinite(lam) for lam in self.lambda_grid):
            raise ConfigError("lambda values must be finite and nonnegative", key="lambda_grid")
        if len(set(self.lambda_grid)) != len(self.lambda_grid) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate entries in lambda_grid or seeds")
        bad = [s for s in self.scorers if s not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown scorers {bad}; expected a subset of {list(VARIANTS)}", key="scorers")
        if self.bound_pairs < 1 or self.probe_size < 1:
            raise ConfigError("bound_pairs and probe_size must be positive")


# config file ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    return lambda text: None if text.lower() == "none" else conv(text)


def _list(conv):
    def parse(text: str):
        items = [t.strip() for t in text.split(",")]
        if not items or any(not t for t in items):
            raise ValueError(f"malformed list: {text!r}")
        return tuple(conv(t) for t in items)

    return parse


_GEN_KEYS = {f.name: {"int": int, "float": float}[f.type] for f in fields(GeneratorSpec) if f.name != "seed"}
_TRAIN_KEYS = {
    "lr": float, "momentum": float, "weight_decay": float, "batch_size": int, "epochs": int,
    "prototype_mode": str, "ema_momentum": float, "projector_eps": float,
    "record_geometry_every": int, "detach_domain_head": _bool,
}
_SCORER_KEYS = {
    "lambda_shrink": _optional(float), "mds_per_class": _bool, "knn_k": int, "knn_normalize": _bool,
    "vim_dim": _optional(int), "react_percentile": float, "react_per_dim": _bool,
    "scale_percentile": float, "nci_gamma": float, "energy_temperature": float,
}
_TOP_KEYS = {
    "lambda_grid": _list(float), "seeds": _list(int), "scorers": _list(lambda s: s.upper()),
    "root_seed": int, "hidden": _list(int), "d_feat": int, "probe_size": int,
    "bound_knn_k": int, "bound_pairs": int, "out_dir": str,
}
CONFIG_KEYS = {**{k: ("generator", v) for k, v in _GEN_KEYS.items()},
               **{k: ("train", v) for k, v in _TRAIN_KEYS.items()},
               **{k: ("scorer", v) for k, v in _SCORER_KEYS.items()},
               **{k: ("top", v) for k, v in _TOP_KEYS.items()}}


def parse_config_text(text: str) -> ExperimentConfig:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys and bad values are errors."""
    sections: dict[str, dict] = {"generator": {}, "train": {}, "scorer": {}, "top": {}}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in seen:
            raise ConfigError(f"key {key!r} repeated (first set on line {seen[key]})", lineno, key)
        seen[key] = lineno
        section, conv = CONFIG_KEYS[key]
        try:
            sections[section][key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"malformed value for {key!r}: {exc}", lineno, key) from None
    try:
        gen = GeneratorSpec(**sections["generator"])
        tr = TrainConfig(**{"record_geometry_every": 10, **sections["train"]})
        sc = ScorerConfig(**sections["scorer"])
        return ExperimentConfig(generator=gen, train=tr, scorer=sc, **sections["top"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """The config as ``key = value`` lines that :func:`parse_config_text` reads back."""

    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        return repr(v) if isinstance(v, float) else str(v)

    out = []
    for key, (section, _) in CONFIG_KEYS.items():
        obj = cfg if section == "top" else getattr(cfg, section)
        out.append(f"{key} = {fmt(getattr(obj, key))}")
    return out


# per-cell pipeline -----------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    backbone: str
    lambda_: float
    seed: int
    split: str
    scorer: str
    fpr95: float
    fpr98: float
    auroc: float
    aupr_in: float
    aupr_out: float
    accuracy: float
    r_eff: float
    pr: float
    rho_k: float
    rho_within: float

    HEADER = ("backbone", "lambda", "seed", "split", "scorer", *METRICS[:5], *METRICS[5:])

    def row(self) -> list:
        return [getattr(self, "lambda_" if h == "lambda" else h) for h in self.HEADER]

    @classmethod
    def from_record(cls, rec: dict) -> "ReportRow":
        kw = {}
        for f in fields(cls):
            v = rec["lambda" if f.name == "lambda_" else f.name]
            kw[f.name] = {"str": str, "int": int, "float": float}[f.type](v)
        return cls(**kw)


GEOMETRY_HEADER = ("backbone", "lambda", "seed", "epoch", "r_eff", "pr", "rho_k", "rho_within", "fpr95_mds_far")
BOUNDS_HEADER = ("instance", "backbone", "lambda", "seed", "split", *bnd.BoundReport.HEADER)


@dataclass
class CellResult:
    report: list[ReportRow]
    geometry: list[list]
    bounds: list[list]


def backbone_of(lam: float) -> str:
    return "ce" if lam == 0.0 else "tgt"


def cell_name(lam: float, seed: int) -> str:
    return f"{backbone_of(lam)}_lambda{lam!r}_seed{seed}"


def build_data(cfg: ExperimentConfig, seed: int) -> tuple[SyntheticData, dict[str, np.ndarray]]:
    """Generated splits and their frozen-teacher embeddings for one grid seed."""
    data = gen_single_domain(cfg.generator, rng=stage_rng(cfg.root_seed, seed, "data"))
    teacher = make_teacher(cfg.generator, data.anchors, stage_rng(cfg.root_seed, seed, "teacher"))
    emb = {name: teacher_embed(teacher, data.split(name).x)
           for name in ("train", "id_test", "indomain_ood", "outdomain_ood")}
    return data, emb


def train_student(cfg: ExperimentConfig, data: SyntheticData, emb, lam: float, seed: int):
    spec = cfg.generator
    init = init_student(spec.d_in, spec.c_train, emb["train"].shape[1], cfg.hidden, cfg.d_feat,
                        rng=stage_rng(cfg.root_seed, seed, "init"))
    tcfg = replace(cfg.train, lambda_tgt=float(lam), seed=int(seed))
    k = cfg.probe_size
    probe = Probe(data.id_test.x[:k], data.id_test.labels[:k], data.outdomain_ood.x[:k])
    return train(init, data.train.x, data.train.labels, emb["train"], tcfg, probe,
                 rng=stage_rng(cfg.root_seed, seed, "shuffle"))


def run_cell(cfg: ExperimentConfig, lam: float, seed: int, out_dir: str | None = None) -> CellResult:
    try:
        return _run_cell(cfg, lam, seed, out_dir)
    except NumericalAbort as exc:
        raise NumericalAbort(f"lambda={lam!r} seed={seed}: {exc}") from exc
    except Exception as exc:
        raise RuntimeError(f"lambda={lam!r} seed={seed}: {type(exc).__name__}: {exc}") from exc


def _run_cell(cfg: ExperimentConfig, lam: float, seed: int, out_dir: str | None) -> CellResult:
    c = cfg.generator.c_train
    backbone = backbone_of(lam)
    data, emb = build_data(cfg, seed)
    student, trace = train_student(cfg, data, emb, lam, seed)

    z = {name: features(student, data.split(name).x) for name in emb}
    ftr = FeatureMatrix(z["train"], data.train.labels, c)
    t_train = FeatureMatrix(emb["train"], data.train.labels, c)
    cov = covariance_split(ftr)
    k = max(c - 1, 1)
    summ = spectral_summary(cov, [k])
    accuracy = float(np.mean(logits_of(student, data.id_test.x).argmax(axis=1) == data.id_test.labels))

    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells" / cell_name(lam, seed)
        (cell_dir / "scorers").mkdir(parents=True, exist_ok=True)
        save_container(cell_dir / "student.dscm", MODEL_MAGIC, 0, student.to_arrays())
        if lam != 0.0:
            stats = teacher_stats(t_train, cfg.train.projector_eps)
            save_container(cell_dir / "teacher_stats.dsct", TEACHER_MAGIC, 0, stats.to_arrays())

    report: list[ReportRow] = []
    for name in cfg.scorers:
        fitted = fit_scorer(name, ftr, student.head(), t_train, cfg.scorer)
        if cell_dir is not None:
            save_scorer(cell_dir / "scorers" / f"{name}.dscs", fitted)
        src = emb if name == "TEACHER_MDS" else z
        s_id = fitted.score(src["id_test"])
        for split, key in OOD_SPLITS:
            ev = evaluate(s_id, fitted.score(src[key]))
            report.append(ReportRow(backbone, float(lam), int(seed), split, name, ev.fpr_at_95, ev.fpr_at_98,
                                    ev.auroc, ev.aupr_in, ev.aupr_out, accuracy, summ.r_eff, summ.pr,
                                    summ.rho_k[k], summ.rho_within))

    geometry = [[backbone, float(lam), int(seed), *r] for r in trace.rows()]

    projector = class_subspace(cov, k)
    knn = fit_knn(ftr, cfg.bound_knn_k, normalize=False)
    rng = stage_rng(cfg.root_seed, seed, "bounds", lam)
    bound_rows = []
    for split, key in OOD_SPLITS:
        checks = (
            bnd.check_theorem1(z["id_test"], z[key], knn, projector, cfg.bound_pairs, rng),
            bnd.check_prop1(z["id_test"], z[key], student.head(), projector, "energy", cfg.bound_pairs, rng),
            bnd.check_prop1(z["id_test"], z[key], student.head(), projector, "msp", cfg.bound_pairs, rng),
        )
        for rep in checks:
            inst = f"{cell_name(lam, seed)}_{split}_{rep.kind}"
            bound_rows.append([inst, backbone, float(lam), int(seed), split, *rep.row()])
    return CellResult(report, geometry, bound_rows)


def _cell_job(args):
    return run_cell(*args)


@dataclass
class ExperimentResult:
    report: list[ReportRow]
    geometry: list[list]
    bounds: list[list]


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, jobs: int = 1) -> ExperimentResult:
    """Run every (lambda, seed) cell; results are merged in sorted cell order whatever ``jobs`` is."""
    cells = [(cfg, float(lam), int(seed), out_dir) for lam in sorted(cfg.lambda_grid) for seed in sorted(cfg.seeds)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, cells))
    else:
        results = [_cell_job(c) for c in cells]
    out = ExperimentResult([], [], [])
    for r in results:
        out.report.extend(r.report)
        out.geometry.extend(r.geometry)
        out.bounds.extend(r.bounds)
    return out


# aggregation -----------------------------------------------------------------------------

SUMMARY_METRICS = ("fpr95", "fpr98", "auroc", "aupr_in", "aupr_out", "accuracy", "r_eff")
SUMMARY_HEADER = (
    "aggregated_over", "backbone", "lambda", "scorer", "split", "n", "std_defined",
    *[f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")],
    "fpr95_reduction_pp", "auroc_gain_pp", "r_eff_increase",
)


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(math.fsum(arr) / arr.size)
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def summarize(rows: list[ReportRow]) -> list[list]:
    """Mean and sample std across seeds per (backbone, lambda, scorer, split).

    TGT groups also carry the paired comparison with the CE group of the same
    scorer and split: FPR@95 reduction and AUROC gain (CE to TGT) in percentage
    points, and the effective-rank increase.
    """
    if not rows:
        raise ValueError("summarize needs at least one row")
    groups: dict[tuple, list[ReportRow]] = defaultdict(list)
    for r in rows:
        groups[(r.backbone, r.lambda_, r.scorer, r.split)].append(r)
    seed_sets = {tuple(sorted(r.seed for r in g)) for g in groups.values()}
    if len(seed_sets) > 1:
        raise ValueError(f"incompatible grids: groups cover different seed sets {sorted(seed_sets)}")
    for key, g in groups.items():
        if len({r.seed for r in g}) != len(g):
            raise ValueError(f"incompatible grids: duplicate seeds in group {key}")

    stats = {key: {m: _mean_std([getattr(r, m) for r in g]) for m in SUMMARY_METRICS} for key, g in groups.items()}
    out = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], VARIANTS.index(k[2]) if k[2] in VARIANTS else 99, k[2], k[3])):
        backbone, lam, scorer, split = key
        n = len(groups[key])
        row = ["seeds", backbone, lam, scorer, split, n, int(n > 1)]
        for m in SUMMARY_METRICS:
            row.extend(stats[key][m])
        base = [k for k in groups if k[0] == "ce" and k[2] == scorer and k[3] == split]
        if backbone == "tgt" and base:
            ce = stats[base[0]]
            row.extend([
                100.0 * (ce["fpr95"][0] - stats[key]["fpr95"][0]),
                100.0 * (stats[key]["auroc"][0] - ce["auroc"][0]),
                stats[key]["r_eff"][0] - ce["r_eff"][0],
            ])
        else:
            row.extend(["", "", ""])
        out.append(row)
    return out


def lambda_sweep(rows: list[ReportRow], metric: str = "fpr95") -> tuple[list[str], list[list]]:
    """Seed-mean ``metric`` per (scorer, split) with one column per lambda."""
    lams = sorted({r.lambda_ for r in rows})
    acc: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        acc[(r.scorer, r.split, r.lambda_)].append(getattr(r, metric))
    keys = sorted({(r.scorer, r.split) for r in rows},
                  key=lambda k: (VARIANTS.index(k[0]) if k[0] in VARIANTS else 99, k[0], k[1]))
    header = ["scorer", "split", *[f"{metric}_lambda_{lam!r}" for lam in lams]]
    body = []
    for scorer, split in keys:
        cells = [acc.get((scorer, split, lam)) for lam in lams]
        body.append([scorer, split, *[_mean_std(v)[0] if v else "" for v in cells]])
    return header, body


# output ----------------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_table(out_dir, stem: str, header, rows, fmt: str = "csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        write_csv(path, list(header), rows)
    elif fmt == "json":
        path = out_dir / f"{stem}.json"
        recs = [{h: _jsonable(v) for h, v in zip(header, r)} for r in rows]
        path.write_text(json.dumps(recs, indent=1) + "\n")
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    return path


def write_outputs(result: ExperimentResult, out_dir, fmt: str = "csv") -> None:
    write_table(out_dir, "report", ReportRow.HEADER, [r.row() for r in result.report], fmt)
    write_table(out_dir, "geometry", GEOMETRY_HEADER, result.geometry, fmt)
    write_table(out_dir, "bounds", BOUNDS_HEADER, result.bounds, fmt)
    write_table(out_dir, "summary", SUMMARY_HEADER, summarize(result.report), fmt)
    for metric in ("fpr95", "auroc"):
        header, body = lambda_sweep(result.report, metric)
        write_table(out_dir, f"lambda_sweep_{metric}", header, body, fmt)


def read_report(path) -> list[ReportRow]:
    path = Path(path)
    if path.suffix == ".json":
        recs = json.loads(path.read_text())
    else:
        import csv

        with open(path, newline="") as fh:
            recs = list(csv.DictReader(fh))
    return [ReportRow.from_record(r) for r in recs]


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
