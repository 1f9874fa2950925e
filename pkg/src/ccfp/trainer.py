"""Alternating min/max training of the dual-stream model, and the ERM baseline.

Trainers only ever see ``(x, y)`` arrays: domain ids are not part of the
data interface.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Adam, Tensor, no_grad, softmax_cross_entropy
from .backbone import (
    BackboneConfig,
    DualStreamModel,
    Model,
    Stream,
    accuracy,
    build_dual_model,
    build_stream,
    draw_ldp_mask,
    dual_forward,
    recalibrate_bn,
)
from .errors import ConfigError, TrainingAborted
from .objectives import LossWeights, discrepancy, semantic_loss, total_loss

logger = logging.getLogger(__name__)

SEM_VARIANTS = ("classifier", "feature")

# independent RNG streams derived from the run seed
_INIT, _DATA, _PERTURB, _RECAL = 11, 12, 13, 14


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 5000
    lambda_dis: float = 1.0
    lambda_sem: float = 1.0
    apply_prob: float = 0.5
    sem_variant: str = "classifier"
    seed: int = 0
    eval_every: int = 300
    widths: Tuple[int, ...] = (32, 32, 64, 64)
    ldp_sites: Tuple[int, ...] = (0, 1, 2)
    eps: float = 1e-5
    mixstyle_alpha: float = 0.1
    grad_clip: Optional[float] = None
    dtype: str = "float32"
    # training examples used to re-estimate the perturbed stream's BN statistics at checkpoints; 0 disables
    bn_recalibration: int = 1024

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.ldp_sites = tuple(int(s) for s in self.ldp_sites)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_dis, self.lambda_sem)

    def validate(self) -> None:
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError(f"apply_prob must lie in [0, 1], got {self.apply_prob}")
        if self.sem_variant not in SEM_VARIANTS:
            raise ConfigError(f"sem_variant must be one of {SEM_VARIANTS}, got {self.sem_variant!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.bn_recalibration < 0:
            raise ConfigError(f"bn_recalibration must be >= 0, got {self.bn_recalibration}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.weights  # noqa: B018 - validates the lambdas

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["ldp_sites"] = list(self.ldp_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    def backbone_config(self, in_channels: int) -> BackboneConfig:
        return BackboneConfig(in_channels=in_channels, widths=self.widths, ldp_sites=self.ldp_sites)


@dataclass
class TrainData:
    """What a trainer may read: training and validation pairs."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self):
        if len(self.train_y) == 0:
            raise ConfigError("training split is empty")
        if len(self.val_y) == 0:
            raise ConfigError("validation split is empty")
        if len(self.train_x) != len(self.train_y) or len(self.val_x) != len(self.val_y):
            raise ConfigError("x and y lengths differ")

    @classmethod
    def from_splits(cls, splits) -> "TrainData":
        return cls(splits.source_train.x, splits.source_train.y, splits.source_val.x, splits.source_val.y)

    @property
    def in_channels(self) -> int:
        return self.train_x.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.train_y.max(), self.val_y.max())) + 1


@dataclass
class Checkpoint:
    step: int
    val_acc: float
    state: Dict[str, np.ndarray] = field(repr=False)


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    checkpoints: List[dict] = field(default_factory=list)

    def add(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step indices must increase")
        self.records.append(record)

    def write_jsonl(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.records:
                fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.checkpoints:
                fh.write(json.dumps({"type": "checkpoint", **rec}, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            (log.records if kind == "step" else log.checkpoints).append(rec)
        return log


@dataclass
class OptStates:
    """Three independent Adam states: original group, perturbed group, max-stage LDP."""

    original: Adam
    perturbed: Adam
    ldp_max: Optional[Adam]


def make_optimizers(m: DualStreamModel, lr: float) -> OptStates:
    ldp = m.ldp_parameters()
    return OptStates(
        Adam(m.original_parameters(), lr),
        Adam(m.perturbed_parameters() + ldp, lr),
        Adam(ldp, lr) if ldp else None,
    )


class BatchSampler:
    """Epoch-wise shuffled minibatches from one seeded stream."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n:
            batch_size = n
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _clip(params, max_norm: Optional[float]) -> None:
    if max_norm is None:
        return
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


def _finite_or_abort(stage: str, record: dict) -> None:
    bad = {k: v for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)}
    if bad:
        raise TrainingAborted(f"non-finite loss in {stage} stage: {bad}", {"stage": stage, **record})


def min_step(m: DualStreamModel, batch: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
             opt: OptStates, rng: np.random.Generator) -> dict:
    """Minimization stage: classification + semantic consistency for both streams.

    One backward of ``L_cls1 + L_cls2 + lambda_sem * L_sem`` yields exactly
    grad(L_cls1 + lambda_sem L_sem) on the original group and
    grad(L_cls2 + lambda_sem L_sem) on the perturbed group (incl. LDP),
    since cls1 and cls2 touch disjoint parameters.
    """
    x, y = batch
    if len(y) == 0:
        raise ConfigError("empty batch")
    acts = dual_forward(m, Tensor(x), "train", rng)
    cls1 = softmax_cross_entropy(acts.logits_o, y)
    cls2 = softmax_cross_entropy(acts.logits_p, y)
    if cfg.sem_variant == "classifier":
        sem = semantic_loss(acts.logits_o, acts.logits_p)
    else:
        sem = semantic_loss(acts.feats_o, acts.feats_p)
    record = {"cls1": float(cls1.data), "cls2": float(cls2.data), "sem": float(sem.data)}
    _finite_or_abort("min", record)
    objective = cls1 + cls2
    if cfg.lambda_sem != 0:
        objective = objective + sem * cfg.lambda_sem
    for p in opt.original.params + opt.perturbed.params:
        p.grad = None
    objective.backward()
    _clip(opt.original.params, cfg.grad_clip)
    _clip(opt.perturbed.params, cfg.grad_clip)
    opt.original.step()
    opt.perturbed.step()
    record["ldp_mask"] = [bool(v) for v in acts.ldp_mask]
    return record


def measure_discrepancy(m: DualStreamModel, x: np.ndarray, mask=None, update_stats: bool = False) -> float:
    """Train-mode Gram discrepancy at the tap sites, without recording a graph."""
    mask = np.ones(len(m.sites), dtype=bool) if mask is None else mask
    with no_grad():
        acts = dual_forward(m, Tensor(x), "train", ldp_mask=mask, update_stats=update_stats, taps_only=True)
        return float(discrepancy(acts.taps_o, acts.taps_p).data)


def max_step(m: DualStreamModel, batch: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
             opt_ldp: Optional[Adam], measure_after: bool = True) -> Tuple[float, float]:
    """Maximization stage: one Adam ascent step of ``lambda_dis * D`` on the LDP offsets only.

    Every LDP site is active here (the stage exists to move them). The fresh
    forward updates both streams' BN running statistics; the extra
    post-update measurement does not. With ``lambda_dis == 0`` the objective
    is constant, so D is only measured and no state changes.
    Returns D before and after the update, both on this batch.
    """
    x, _ = batch
    if len(x) == 0:
        raise ConfigError("empty batch")
    if opt_ldp is None or not m.ldp:
        return float("nan"), float("nan")
    active = cfg.lambda_dis != 0
    mask = np.ones(len(m.sites), dtype=bool)
    xt = Tensor(x)
    with no_grad():
        taps_o = dual_forward(m, xt, "train", ldp_mask=mask, taps_only=True, streams="original",
                              update_stats=active).taps_o
    if not active:
        with no_grad():
            taps_p = dual_forward(m, xt, "train", ldp_mask=mask, taps_only=True, streams="perturbed",
                                  update_stats=False).taps_p
            d = float(discrepancy(taps_o, taps_p).data)
        _finite_or_abort("max", {"d_before": d})
        return d, d
    frozen = m.perturbed_parameters()
    for p in frozen:
        p.requires_grad = False
    try:
        taps_p = dual_forward(m, xt, "train", ldp_mask=mask, taps_only=True, streams="perturbed").taps_p
        D = discrepancy(taps_o, taps_p)
        d_before = float(D.data)
        _finite_or_abort("max", {"d_before": d_before})
        for p in opt_ldp.params:
            p.grad = None
        (D * cfg.lambda_dis).backward()
    finally:
        for p in frozen:
            p.requires_grad = True
    _clip(opt_ldp.params, cfg.grad_clip)
    opt_ldp.step(sign=-1.0)
    for p in opt_ldp.params:
        p.grad = None
    if not measure_after:
        return d_before, float("nan")
    with no_grad():
        taps_p = dual_forward(m, xt, "train", ldp_mask=mask, taps_only=True, streams="perturbed",
                              update_stats=False).taps_p
        d_after = float(discrepancy(taps_o, taps_p).data)
    _finite_or_abort("max", {"d_after": d_after})
    return d_before, d_after


def init_rng(seed: int) -> np.random.Generator:
    """The generator that initializes a run's weights for ``seed``."""
    return np.random.default_rng([seed, _INIT])


def _rngs(seed: int):
    return (np.random.default_rng([seed, _INIT]), np.random.default_rng([seed, _DATA]),
            np.random.default_rng([seed, _PERTURB]))


def _snapshot(m: Model) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in m.state_arrays().items()}


def _is_checkpoint_step(step: int, cfg: TrainConfig) -> bool:
    return step % cfg.eval_every == 0 or step == cfg.steps


def _bn_buffers(m: DualStreamModel) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(bn.state.running_mean.copy(), bn.state.running_var.copy()) for bn in m.perturbed.backbone.norms]


def _restore_bn(m: DualStreamModel, buffers) -> None:
    for bn, (mean, var) in zip(m.perturbed.backbone.norms, buffers):
        bn.state.running_mean[:] = mean
        bn.state.running_var[:] = var


def _recalibrated_checkpoint(m: DualStreamModel, step: int, val, recal_x: Optional[np.ndarray],
                             batch_size: int) -> Checkpoint:
    """Checkpoint whose perturbed-stream BN statistics match inference; the live buffers are left as they were."""
    if recal_x is None:
        return Checkpoint(step, accuracy(m, *val), _snapshot(m))
    live = _bn_buffers(m)
    recalibrate_bn(m, recal_x, batch_size)
    ckpt = Checkpoint(step, accuracy(m, *val), _snapshot(m))
    _restore_bn(m, live)
    return ckpt


def build_models_for(cfg: TrainConfig, data: TrainData, perturbation: str = "ldp") -> DualStreamModel:
    init_rng, _, _ = _rngs(cfg.seed)
    return build_dual_model(cfg.backbone_config(data.in_channels), data.n_classes, init_rng,
                            apply_prob=cfg.apply_prob, perturbation=perturbation, eps=cfg.eps,
                            mixstyle_alpha=cfg.mixstyle_alpha, dtype=np.dtype(cfg.dtype))


def train_ccfp(cfg: TrainConfig, data: TrainData, perturbation: str = "ldp",
               model: Optional[DualStreamModel] = None
               ) -> Tuple[DualStreamModel, TrainLog, List[Checkpoint]]:
    """Algorithm loop: min stage then max stage on the same batch, ``cfg.steps`` times.

    ``perturbation`` selects LDP (the full method) or the Mixstyle/DSU
    dual-stream baselines, which have no max stage.
    """
    cfg.validate()
    _, data_rng, perturb_rng = _rngs(cfg.seed)
    m = model if model is not None else build_models_for(cfg, data, perturbation)
    dtype = np.dtype(cfg.dtype)
    train_x = data.train_x.astype(dtype, copy=False)
    val_x = data.val_x.astype(dtype, copy=False)
    opt = make_optimizers(m, cfg.lr)
    sampler = BatchSampler(len(data.train_y), cfg.batch_size, data_rng)
    recal_x = None
    if cfg.bn_recalibration > 0:
        n = len(train_x)
        pick = np.random.default_rng([cfg.seed, _RECAL]).permutation(n)[:min(cfg.bn_recalibration, n)]
        recal_x = train_x[np.sort(pick)]
    log, checkpoints = TrainLog(), []
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        batch = (train_x[idx], data.train_y[idx])
        rec = min_step(m, batch, cfg, opt, perturb_rng)
        if m.perturbation == "ldp":
            rec["d_before"], rec["d_after"] = max_step(m, batch, cfg, opt.ldp_max)
        rec["total"] = float(total_loss(rec["cls1"], rec["cls2"], rec.get("d_before", 0.0) if m.ldp else 0.0,
                                        rec["sem"], cfg.weights))
        log.add({"step": step, **rec})
        if _is_checkpoint_step(step, cfg):
            ckpt = _recalibrated_checkpoint(m, step, (val_x, data.val_y), recal_x, cfg.batch_size)
            checkpoints.append(ckpt)
            log.checkpoints.append({"step": step, "val_acc": ckpt.val_acc})
            logger.info("step %d  cls2 %.4f  val_acc %.4f", step, rec["cls2"], ckpt.val_acc)
    return m, log, checkpoints


def build_erm_model(cfg: TrainConfig, data: TrainData) -> Stream:
    init_rng, _, _ = _rngs(cfg.seed)
    return build_stream(cfg.backbone_config(data.in_channels), data.n_classes, init_rng, np.dtype(cfg.dtype))


def erm_step(model: Stream, batch, opt: Adam, cfg: TrainConfig) -> dict:
    x, y = batch
    logits, _, _ = model.forward(Tensor(x), train=True)
    loss = softmax_cross_entropy(logits, y)
    record = {"cls": float(loss.data)}
    _finite_or_abort("erm", record)
    for p in opt.params:
        p.grad = None
    loss.backward()
    _clip(opt.params, cfg.grad_clip)
    opt.step()
    return record


def train_erm(cfg: TrainConfig, data: TrainData, model: Optional[Stream] = None
              ) -> Tuple[Stream, TrainLog, List[Checkpoint]]:
    """Cross-entropy on the pooled training data; same sampler and checkpointing as CCFP."""
    cfg.validate()
    _, data_rng, _ = _rngs(cfg.seed)
    m = model if model is not None else build_erm_model(cfg, data)
    dtype = np.dtype(cfg.dtype)
    train_x = data.train_x.astype(dtype, copy=False)
    val_x = data.val_x.astype(dtype, copy=False)
    opt = Adam(m.parameters(), cfg.lr)
    sampler = BatchSampler(len(data.train_y), cfg.batch_size, data_rng)
    log, checkpoints = TrainLog(), []
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        rec = erm_step(m, (train_x[idx], data.train_y[idx]), opt, cfg)
        log.add({"step": step, **rec})
        if _is_checkpoint_step(step, cfg):
            acc = accuracy(m, val_x, data.val_y)
            checkpoints.append(Checkpoint(step, acc, _snapshot(m)))
            log.checkpoints.append({"step": step, "val_acc": acc})
            logger.info("step %d  cls %.4f  val_acc %.4f", step, rec["cls"], acc)
    return m, log, checkpoints
