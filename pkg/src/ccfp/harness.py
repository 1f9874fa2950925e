"""Experiment protocol: trials, training-domain model selection, random search, aggregation, diagnostics."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .backbone import DualStreamModel, Model, accuracy, site_function
from .data import DomainDataset, DomainSplits, split_domains
from .errors import AggregationError, ConfigError, TrainingAborted
from .trainer import TrainConfig, TrainData, train_ccfp, train_erm

logger = logging.getLogger(__name__)

ALGORITHMS = ("erm", "ccfp", "mixstyle_dual", "dsu_dual")
_PERTURBATION = {"ccfp": "ldp", "mixstyle_dual": "mixstyle", "dsu_dual": "dsu"}
_SEARCH_STREAM = 3


def select_checkpoint(val_accs: Sequence[float]) -> int:
    """Index of the highest validation accuracy; the earliest wins ties."""
    if len(val_accs) == 0:
        raise ValueError("no checkpoints to select from")
    return int(np.argmax(np.asarray(val_accs, dtype=float)))


@dataclass
class TrialResult:
    algorithm: str
    config: dict
    seed: int
    target_domain: int
    checkpoint_steps: List[int] = field(default_factory=list)
    val_accs: List[float] = field(default_factory=list)
    selected: Optional[int] = None
    selected_step: Optional[int] = None
    target_acc: Optional[float] = None
    wall_seconds: float = 0.0
    status: str = "ok"
    error: Optional[str] = None
    trial: int = 0
    # not serialized
    model: Optional[Model] = field(default=None, repr=False, compare=False)
    log: object = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def selected_val_acc(self) -> Optional[float]:
        return None if self.selected is None else self.val_accs[self.selected]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "algorithm": self.algorithm,
            "trial": self.trial,
            "seed": self.seed,
            "target_domain": self.target_domain,
            "config": self.config,
            "checkpoint_steps": self.checkpoint_steps,
            "val_accs": self.val_accs,
            "selected": self.selected,
            "selected_step": self.selected_step,
            "selected_val_acc": self.selected_val_acc,
            "target_acc": self.target_acc,
            "status": self.status,
            "error": self.error,
        }
        if include_timing:
            d["wall_seconds"] = self.wall_seconds
        return d


def run_trial(algorithm: str, cfg: TrainConfig, ds: Optional[DomainDataset] = None,
              target_domain: Optional[int] = None, *, splits: Optional[DomainSplits] = None,
              trial: int = 0, keep_model: bool = False) -> TrialResult:
    """Train, select the checkpoint with the best source-validation accuracy, test it once on the target.

    Pass either a dataset plus ``target_domain`` (split with ``cfg.seed``) or
    ready-made ``splits``. A NaN abort yields a failed result rather than an
    exception.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    cfg.validate()
    if splits is None:
        if ds is None or target_domain is None:
            raise ConfigError("run_trial needs a dataset and target domain, or splits")
        splits = split_domains(ds, target_domain, seed=cfg.seed)
    if len(splits.target_test) == 0:
        raise ConfigError("target test split is empty")
    result = TrialResult(algorithm, cfg.to_dict(), cfg.seed, splits.target_domain, trial=trial)
    t0 = time.perf_counter()
    data = TrainData.from_splits(splits)
    try:
        if algorithm == "erm":
            model, log, checkpoints = train_erm(cfg, data)
        else:
            model, log, checkpoints = train_ccfp(cfg, data, perturbation=_PERTURBATION[algorithm])
    except TrainingAborted as exc:
        result.status, result.error = "failed", f"{exc} | {exc.record}"
        result.wall_seconds = time.perf_counter() - t0
        logger.warning("trial %d seed %d failed: %s", trial, cfg.seed, exc)
        return result
    result.checkpoint_steps = [c.step for c in checkpoints]
    result.val_accs = [c.val_acc for c in checkpoints]
    result.selected = select_checkpoint(result.val_accs)
    result.selected_step = result.checkpoint_steps[result.selected]
    model.load_arrays(checkpoints[result.selected].state)
    test_x = splits.target_test.x.astype(np.dtype(cfg.dtype), copy=False)
    result.target_acc = accuracy(model, test_x, splits.target_test.y)
    result.wall_seconds = time.perf_counter() - t0
    if keep_model:
        result.model, result.log = model, log
    return result


# -- random search --------------------------------------------------------

def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


@dataclass
class SearchSpace:
    lr_range: Tuple[float, float] = (1e-3, 1e-3)
    batch_sizes: Tuple[int, ...] = (32,)
    lambda_dis_range: Tuple[float, float] = (0.1, 10.0)
    lambda_sem_range: Tuple[float, float] = (0.1, 10.0)
    apply_probs: Tuple[float, ...] = (0.5,)

    def validate(self) -> None:
        for name in ("lr_range", "lambda_dis_range", "lambda_sem_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not self.batch_sizes or not self.apply_probs:
            raise ConfigError("batch_sizes and apply_probs need at least one choice")

    def sample(self, rng: np.random.Generator) -> dict:
        """One configuration: log-uniform continuous draws, uniform over the discrete choices."""
        return {
            "lr": _log_uniform(rng, *self.lr_range),
            "batch_size": int(self.batch_sizes[rng.integers(len(self.batch_sizes))]),
            "lambda_dis": _log_uniform(rng, *self.lambda_dis_range),
            "lambda_sem": _log_uniform(rng, *self.lambda_sem_range),
            "apply_prob": float(self.apply_probs[rng.integers(len(self.apply_probs))]),
        }

    def sample_trials(self, n_trials: int, search_seed: int = 0) -> List[dict]:
        return [self.sample(np.random.default_rng([search_seed, _SEARCH_STREAM, t])) for t in range(n_trials)]


@dataclass
class SearchResults:
    results: List[TrialResult]
    best_per_seed: Dict[int, TrialResult]

    def selected_target_accs(self) -> List[float]:
        return [r.target_acc for r in self.best_per_seed.values()]


def best_per_seed(results: Sequence[TrialResult]) -> Dict[int, TrialResult]:
    """For each seed, the successful trial with the best selected validation accuracy.

    Ties go to the lowest trial index, so the choice does not depend on
    the order of ``results``.
    """
    best: Dict[int, TrialResult] = {}
    for r in results:
        if not r.ok:
            continue
        cur = best.get(r.seed)
        if cur is None or (r.selected_val_acc, -r.trial) > (cur.selected_val_acc, -cur.trial):
            best[r.seed] = r
    return dict(sorted(best.items()))


def _run_job(args) -> TrialResult:
    algorithm, cfg, splits, trial = args
    return run_trial(algorithm, cfg, splits=splits, trial=trial)


def random_search(space: SearchSpace, n_trials: int, seeds: Sequence[int], algorithm: str,
                  ds: DomainDataset, target_domain: int, base: Optional[TrainConfig] = None,
                  search_seed: int = 0, workers: int = 1) -> SearchResults:
    """Runs ``n_trials`` sampled configurations under every seed.

    Hyperparameters depend only on ``(search_seed, trial)``, so every seed
    sees the same configurations. Each seed gets its own data split.
    """
    if n_trials < 1:
        raise ConfigError(f"n_trials must be >= 1, got {n_trials}")
    if not seeds:
        raise ConfigError("need at least one seed")
    space.validate()
    base = base or TrainConfig()
    samples = space.sample_trials(n_trials, search_seed)
    splits = {s: split_domains(ds, target_domain, seed=s) for s in seeds}
    jobs = [(algorithm, replace(base, seed=int(s), **hp), splits[s], t)
            for t, hp in enumerate(samples) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    return SearchResults(results, best_per_seed(results))


# -- aggregation ------------------------------------------------------------

@dataclass(frozen=True)
class Aggregate:
    mean: float
    stderr: float
    n: int

    @property
    def single(self) -> bool:
        return self.n == 1

    def format(self, scale: float = 100.0) -> str:
        """``xx.x ± x.x`` (accuracies in percent by default)."""
        return f"{self.mean * scale:.1f} ± {self.stderr * scale:.1f}"


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean and standard error ``std(ddof=1) / sqrt(n)``; a single value has stderr 0."""
    vals = np.asarray([v for v in values], dtype=float)
    if vals.size == 0:
        raise AggregationError("cannot aggregate an empty group")
    if not np.all(np.isfinite(vals)):
        raise AggregationError("non-finite value in group")
    vals = np.sort(vals)  # order-independent summation
    if vals.size == 1:
        return Aggregate(float(vals[0]), 0.0, 1)
    return Aggregate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)), int(vals.size))


def aggregate_results(results: Sequence[TrialResult]) -> Dict[Tuple[str, int], Aggregate]:
    """Per (algorithm, target domain): aggregate of the per-seed best target accuracies."""
    groups: Dict[Tuple[str, int], List[TrialResult]] = {}
    for r in results:
        groups.setdefault((r.algorithm, r.target_domain), []).append(r)
    out = {}
    for key in sorted(groups):
        best = best_per_seed(groups[key])
        if not best:
            raise AggregationError(f"no successful trials for {key}")
        out[key] = aggregate([b.target_acc for b in best.values()])
    return out


RESULT_FIELDS = ("algorithm", "trial", "seed", "target_domain", "lr", "batch_size", "lambda_dis",
                 "lambda_sem", "apply_prob", "steps", "selected_step", "selected_val_acc",
                 "target_acc", "status")


def results_rows(results: Sequence[TrialResult]) -> List[dict]:
    rows = []
    for r in results:
        row = {k: r.config.get(k) for k in ("lr", "batch_size", "lambda_dis", "lambda_sem", "apply_prob", "steps")}
        row.update(algorithm=r.algorithm, trial=r.trial, seed=r.seed, target_domain=r.target_domain,
                   selected_step=r.selected_step, selected_val_acc=r.selected_val_acc,
                   target_acc=r.target_acc, status=r.status)
        rows.append({k: row[k] for k in RESULT_FIELDS})
    return rows


def write_csv(path, rows: Sequence[dict], fieldnames: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in fieldnames})


# -- diagnostics ------------------------------------------------------------

STATS_HEADER = ("domain", "site", "channel", "mean", "std")


def _inference_stream(model: Model):
    if isinstance(model, DualStreamModel):
        mask = np.ones(len(model.sites), dtype=bool)
        return model.perturbed.backbone, site_function(model, False, mask, None)
    return model.backbone, None


def dump_feature_stats(model: Model, ds: DomainDataset, tap_sites: Optional[Sequence[int]] = None,
                       path=None, batch_size: int = 500) -> List[tuple]:
    """Eval-mode instance statistics per (domain, site, channel).

    ``mean`` averages the per-example spatial means; ``std`` averages the
    per-example spatial standard deviations. For dual models the inference
    (perturbed) stream is measured. Rows are returned and, with ``path``,
    written as CSV.
    """
    backbone, site_fn = _inference_stream(model)
    n_blocks = len(backbone.cfg.widths)
    sites = tuple(backbone.tap_sites if tap_sites is None else tap_sites)
    if not sites:
        raise ConfigError("need at least one site")
    bad = [s for s in sites if not 0 <= int(s) < n_blocks]
    if bad:
        raise ConfigError(f"unknown sites {bad}; the backbone has blocks 0..{n_blocks - 1}")
    sites = tuple(sorted(set(int(s) for s in sites)))
    dtype = backbone.convs[0].data.dtype
    rows = []
    for d in ds.domain_ids:
        x, _ = ds.domain(d)
        if len(x) == 0:
            continue
        sums = {s: [np.zeros(backbone.site_channels(s)), np.zeros(backbone.site_channels(s))] for s in sites}
        with no_grad():
            for start in range(0, len(x), batch_size):
                xb = Tensor(x[start:start + batch_size].astype(dtype, copy=False))
                _, taps = backbone.forward(xb, train=False, site_fn=site_fn, tap_sites=sites, stop_after_taps=True)
                for s, t in zip(sites, taps):
                    a = t.data.astype(np.float64)
                    sums[s][0] += a.mean(axis=(2, 3)).sum(axis=0)
                    sums[s][1] += a.std(axis=(2, 3)).sum(axis=0)
        for s in sites:
            mean, std = sums[s][0] / len(x), sums[s][1] / len(x)
            rows.extend((int(d), s, c, float(mean[c]), float(std[c])) for c in range(len(mean)))
    if path is not None:
        Path(path).write_text(stats_csv(rows))
    return rows


def stats_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STATS_HEADER)
    for d, s, c, mean, std in rows:
        w.writerow((d, s, c, repr(mean), repr(std)))
    return buf.getvalue()


def expected_stats_rows(model: Model, n_domains: int, tap_sites: Sequence[int]) -> int:
    backbone, _ = _inference_stream(model)
    return n_domains * sum(backbone.site_channels(s) for s in set(tap_sites))


def format_exception(exc: BaseException) -> str:
    return "".join(traceback.format_exception_only(type(exc), exc)).strip()
