"""Run configuration and the search -> derive -> retrain -> score pipeline per fold."""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PairedStudy, make_folds
from .genotype import (Genotype, build_derived_network, derive_genotype, export_dot, export_json,
                       parse_json, predict_scores, train_derived, write_train_log)
from .metrics import (EvalReport, ScoredCase, aggregate_cv, read_scores_csv, write_report_csv,
                      write_roc_csv, write_scores_csv)
from .search import SearchBudget, run_search, write_search_log
from .supernet import MODALITY_MODES, ConfigError, SupernetConfig


@dataclass
class RetrainBudget:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("retrain epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunConfig:
    supernet: SupernetConfig
    search: SearchBudget = field(default_factory=SearchBudget)
    retrain: RetrainBudget = field(default_factory=RetrainBudget)
    k: int = 6

    @property
    def seed(self) -> int:
        return self.supernet.seed

    def to_dict(self) -> dict:
        d = self.supernet.to_dict()
        d["search"] = asdict(self.search)
        d["retrain"] = asdict(self.retrain)
        d["k"] = self.k
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "seed" not in d:
            raise ConfigError("config must set 'seed' (no clock-derived default)")
        try:
            search = SearchBudget(**d.pop("search", {}))
            retrain = RetrainBudget(**d.pop("retrain", {}))
            k = int(d.pop("k", 6))
            net = SupernetConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        net.validate()
        if k < 2:
            raise ConfigError("k must be >= 2")
        return cls(net, search, retrain, k)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from None

    def with_mode(self, mode: str) -> "RunConfig":
        if mode not in MODALITY_MODES:
            raise ConfigError(f"unknown modality mode {mode!r}; choose from {MODALITY_MODES}")
        return replace(self, supernet=replace(self.supernet, modality_mode=mode))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def check_dims(studies: Sequence[PairedStudy], config: SupernetConfig) -> None:
    for s in studies:
        if s.pet.dims != config.input_dims:
            raise ConfigError(f"study {s.id}: volume dims {s.pet.dims} != config input_dims {config.input_dims}")


# ---------------------------------------------------------------------------
# single steps


def search_and_derive(studies: Sequence[PairedStudy], cfg: RunConfig, seed: int, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    result = run_search(studies, cfg.supernet, cfg.search, seed)
    genotype = derive_genotype(result.alpha, seed)
    result.alpha.save(out / "alpha.mmp")
    write_search_log(result.log, out / "search_log.csv")
    (out / "genotype.json").write_text(export_json(genotype))
    (out / "genotype.dot").write_text(export_dot(genotype))
    return result, genotype


def train_and_score(genotype: Genotype, cfg: RunConfig, train: Sequence[PairedStudy],
                    test: Sequence[PairedStudy], seed: int, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    net = build_derived_network(genotype, cfg.supernet, derived_seed(seed, 1))
    result = train_derived(net, train, cfg.retrain.epochs, cfg.retrain.lr, derived_seed(seed, 2),
                           cfg.retrain.batch_size)
    net.store.save(out / "model.mmp")
    write_train_log(result.log, out / "train_log.csv")
    return net, predict_scores(net, test)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldTask:
    mode: str
    fold: int
    cfg: RunConfig
    train: list[PairedStudy]
    test: list[PairedStudy]
    seed: int
    out: Path
    genotype_text: str | None = None  # set when sharing one genotype across folds


def _fold_meta(task: FoldTask) -> dict:
    return {"mode": task.mode, "fold": task.fold, "seed": task.seed, "config": task.cfg.fingerprint(),
            "train": [s.id for s in task.train], "test": [s.id for s in task.test],
            "shared_genotype": task.genotype_text is not None}


def fold_done(task: FoldTask) -> bool:
    meta = task.out / "fold.json"
    return (meta.is_file() and (task.out / "scores.csv").is_file()
            and json.loads(meta.read_text()) == _fold_meta(task))


def run_fold(task: FoldTask) -> tuple[list[ScoredCase], float]:
    """Search (unless a genotype is given), derive, retrain, and score one fold.

    A fold whose fold.json matches the task is loaded instead of recomputed.
    """
    if fold_done(task):
        return read_scores_csv(task.out / "scores.csv"), 0.0
    t0 = time.perf_counter()
    task.out.mkdir(parents=True, exist_ok=True)
    (task.out / "fold.json").unlink(missing_ok=True)
    if task.genotype_text is None:
        _, genotype = search_and_derive(task.train, task.cfg, task.seed, task.out)
    else:
        genotype = parse_json(task.genotype_text)
        (task.out / "genotype.json").write_text(export_json(genotype))
        (task.out / "genotype.dot").write_text(export_dot(genotype))
    _, cases = train_and_score(genotype, task.cfg, task.train, task.test, task.seed, task.out)
    write_scores_csv(cases, task.out / "scores.csv")
    # written last: marks the fold complete
    (task.out / "fold.json").write_text(json.dumps(_fold_meta(task), indent=1) + "\n")
    elapsed = time.perf_counter() - t0
    (task.out / "timing.json").write_text(json.dumps({"seconds": elapsed}) + "\n")
    return cases, elapsed


def _run_fold_packed(task: FoldTask):
    return task.mode, task.fold, run_fold(task)


@dataclass
class CVResult:
    reports: dict[str, EvalReport]
    fold_seconds: dict[tuple[str, int], float]


def run_cv(studies: Sequence[PairedStudy], cfg: RunConfig, k: int, seed: int, out, modes: Sequence[str],
           jobs: int = 1, shared_genotype: bool = False) -> CVResult:
    out = Path(out)
    check_dims(studies, cfg.supernet)
    plan = make_folds(studies, k, seed)
    by_id = {s.id: s for s in studies}
    tasks: list[FoldTask] = []
    for mode in modes:
        mcfg = cfg.with_mode(mode)
        shared = None
        if shared_genotype:
            gdir = out / mode / "shared_search"
            gpath = gdir / "genotype.json"
            if not gpath.is_file():
                train0 = [by_id[i] for i in plan.train_ids(0)]
                search_and_derive(train0, mcfg, derived_seed(seed, 0), gdir)
            shared = gpath.read_text()
        for f in range(k):
            tasks.append(FoldTask(mode, f, mcfg, [by_id[i] for i in plan.train_ids(f)],
                                  [by_id[i] for i in plan.test_ids(f)], derived_seed(seed, f),
                                  out / mode / f"fold_{f}", shared))
    results: dict[tuple[str, int], list[ScoredCase]] = {}
    seconds: dict[tuple[str, int], float] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for mode, f, (cases, sec) in pool.map(_run_fold_packed, tasks):
                results[(mode, f)], seconds[(mode, f)] = cases, sec
    else:
        for t in tasks:
            mode, f, (cases, sec) = _run_fold_packed(t)
            results[(mode, f)], seconds[(mode, f)] = cases, sec
    reports = {}
    for mode in modes:
        folds = [results[(mode, f)] for f in range(k)]
        report = aggregate_cv(folds)
        reports[mode] = report
        mdir = out / mode
        write_report_csv([(mode, report)], mdir / "metrics.csv")
        write_report_csv([(f"fold_{f}", r) for f, r in enumerate(report.folds) if r is not None],
                         mdir / "folds.csv")
        write_roc_csv(report, mdir / "roc.csv")
    write_report_csv([(m, reports[m]) for m in modes], out / "summary.csv")
    return CVResult(reports, seconds)


def projected_makespan(durations: Sequence[float], workers: int = 8) -> float:
    """Longest-processing-time-first schedule length of independent tasks."""
    loads = [0.0] * workers
    for d in sorted(durations, reverse=True):
        i = int(np.argmin(loads))
        loads[i] += d
    return max(loads)
