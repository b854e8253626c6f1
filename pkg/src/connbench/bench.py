"""Runs the (model, modality, outer fold) grid serially or across worker processes."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits

from .dataio import Dataset
from .evalstats.crossval import FoldOutcome, KrrConfig, assemble_cell, run_outer_fold
from .evalstats.folds import FoldPlan, make_fold_plan
from .evalstats.report import BenchmarkReport, pairwise_report
from .training import PreparedData, TrainConfig

_STATE: dict = {}


class IncompatibleDataError(ValueError):
    pass


def _init_worker(datasets, plan, seed, train_config, krr_config):
    _STATE.clear()
    _STATE.update(datasets=datasets, plan=plan, seed=seed, train_config=train_config,
                  krr_config=krr_config, prepared={})


def _run_job(job: tuple[str, str, int]) -> FoldOutcome:
    model, modality, fold = job
    prepared = _STATE["prepared"]
    if modality not in prepared:
        prepared[modality] = PreparedData(_STATE["datasets"][modality])
    # One BLAS thread per job keeps serial and parallel floating point identical.
    with threadpool_limits(limits=1):
        return run_outer_fold(_STATE["datasets"][modality], model, _STATE["plan"], fold, _STATE["seed"],
                              _STATE["train_config"], _STATE["krr_config"], prepared[modality])


def shared_fold_plan(datasets: dict[str, Dataset], k: int = 10, seed: int = 0) -> FoldPlan:
    """One plan for every modality; the modalities must hold the same subjects."""
    names = list(datasets)
    ref = datasets[names[0]]
    for name in names[1:]:
        if datasets[name].ids != ref.ids:
            raise IncompatibleDataError(f"modality {name!r} holds different subjects than {names[0]!r}")
    return make_fold_plan(ref, k=k, seed=seed)


def run_bench(datasets: dict[str, Dataset], models: list[str], seed: int = 0, jobs: int = 1,
              train_config: TrainConfig | None = None, krr_config: KrrConfig | None = None,
              k: int = 10, plan: FoldPlan | None = None) -> BenchmarkReport:
    train_config = train_config or TrainConfig()
    krr_config = krr_config or KrrConfig()
    plan = plan or shared_fold_plan(datasets, k, seed)
    grid = [(m, d) for m in models for d in datasets]
    work = [(m, d, i) for m, d in grid for i in range(plan.k)]
    args = (datasets, plan, seed, train_config, krr_config)
    if jobs <= 1:
        _init_worker(*args)
        outcomes = [_run_job(job) for job in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=args) as pool:
            outcomes = list(pool.map(_run_job, work))
    by_cell: dict[tuple[str, str], list[FoldOutcome]] = {cell: [] for cell in grid}
    for (m, d, _), outcome in zip(work, outcomes):
        by_cell[(m, d)].append(outcome)
    cells = [assemble_cell(m, d, by_cell[(m, d)], plan.digest()) for m, d in grid]
    n_subjects = len(next(iter(datasets.values())))
    return pairwise_report(cells, n_subjects)
