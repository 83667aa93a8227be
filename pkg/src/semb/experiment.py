"""Seed-replicated comparison of training configurations on shared evaluation draws."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, DatasetManifest
from .encoder import ModelEncoder
from .evaluation import EvalReport, embed_pool, eval_pool, same_different, si_task, sv_task
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalPlan:
    splits: tuple[str, ...] = ("test", "unseen")
    si_k_way: int = 5
    si_enroll: int = 3
    si_query: int = 5
    si_repeats: int = 100
    sv_enroll_frames: int | None = None
    sv_pos: int = 10
    sv_repeats: int = 10
    samediff_pairs: int = 0
    seed: int = 12345


@dataclass
class CellResult:
    config: str
    metric: str
    split: str
    values: list[float] = field(default_factory=list)
    hashes: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def evaluate_model(params, dataset: Dataset, manifest: DatasetManifest, plan: EvalPlan, segment_frames: int, dist) -> list[EvalReport]:
    """Run the planned protocols; every model sees the same task draws."""
    encoder = ModelEncoder(params)
    reports = []
    for k, split in enumerate(plan.splits):
        pool = eval_pool(dataset, manifest, split, segment_frames)
        emb = embed_pool(pool, encoder)
        reports.append(
            si_task(emb, plan.si_k_way, plan.si_enroll, plan.si_query, None, dist, plan.si_repeats,
                    np.random.default_rng([plan.seed, k, 0]), split)
        )
        enroll = plan.sv_enroll_frames or plan.si_enroll * segment_frames
        sv, _ = sv_task(emb, enroll, segment_frames, plan.sv_pos, None, None, dist, plan.sv_repeats,
                        np.random.default_rng([plan.seed, k, 1]), split)
        reports.append(sv)
        if plan.samediff_pairs:
            sd, _ = same_different(emb, plan.samediff_pairs, None, dist, 1, np.random.default_rng([plan.seed, k, 2]), split)
            reports.append(sd)
    return reports


def run_comparison(
    dataset: Dataset,
    manifest: DatasetManifest,
    configs: Sequence[TrainConfig],
    seeds: Sequence[int],
    plan: EvalPlan = EvalPlan(),
    threads: int = 1,
) -> list[CellResult]:
    """Train every config once per seed and evaluate on identical draws."""
    jobs = [(c, s) for c in configs for s in seeds]

    def run(job):
        config, seed = job
        result = train(dataset, manifest, replace(config, seed=seed))
        log.info("%s seed %d: best epoch %d", config.label, seed, result.best_epoch)
        return evaluate_model(result.params, dataset, manifest, plan, config.crop_frames, config.dist)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run, jobs))
    else:
        outputs = [run(j) for j in jobs]

    cells: dict[tuple[str, str, str], CellResult] = {}
    for (config, seed), reports in zip(jobs, outputs):
        for rep in reports:
            key = (config.label, rep.metric, rep.task["split"])
            cell = cells.setdefault(key, CellResult(*key))
            cell.values.append(rep.mean)
            cell.hashes.append(rep.draws_hash)
    return list(cells.values())


def write_comparison_csv(path, cells: Sequence[CellResult], seeds: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "metric", "split", *[f"seed_{s}" for s in seeds], "mean", "std", "draws_hash"])
        for c in cells:
            w.writerow([c.config, c.metric, c.split, *[repr(v) for v in c.values], repr(c.mean), repr(c.std), c.hashes[0]])


def read_comparison_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
