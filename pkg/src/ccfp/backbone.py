"""ConvNet backbone, feature-statistics perturbations and the dual-stream model."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    batch_norm2d,
    channel_stats,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    no_grad,
    relu,
)
from .errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PERTURBATIONS = ("ldp", "mixstyle", "dsu")


# ---------------------------------------------------------------------------
# perturbation modules


@dataclass
class LdpParams:
    """Learnable offsets added to the instance std (``gamma``) and mean (``beta``)."""

    gamma: Tensor
    beta: Tensor
    site_index: int

    @classmethod
    def zeros(cls, channels: int, site_index: int, dtype=np.float64) -> "LdpParams":
        return cls(
            gamma=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"ldp{site_index}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"ldp{site_index}.beta"),
            site_index=site_index,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]


def ldp_forward(x: Tensor, p: LdpParams, eps: float = 1e-5) -> Tensor:
    """``(sigma + gamma) * (x - mu) / sigma + mu + beta`` with instance statistics.

    Evaluated in the algebraically equal form ``x + gamma * xhat + beta`` so
    that zero offsets reproduce the input bit for bit.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"LDP site {p.site_index} expects {p.channels} channels, got shape {x.shape}")
    C = p.channels
    mu, sigma = channel_stats(x, eps)
    xhat = (x - mu.reshape(-1, C, 1, 1)) / sigma.reshape(-1, C, 1, 1)
    return x + xhat * p.gamma.reshape(1, C, 1, 1) + p.beta.reshape(1, C, 1, 1)


def _detached_stats(x: Tensor, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    sigma = np.sqrt(x.data.var(axis=(2, 3), keepdims=True) + eps)
    return mu, sigma


def mixstyle_forward(x: Tensor, rng: np.random.Generator, alpha: float = 0.1, prob: float = 0.5,
                     eps: float = 1e-5, lam: Optional[np.ndarray] = None,
                     perm: Optional[np.ndarray] = None) -> Tensor:
    """Mix each instance's statistics with a shuffled batch partner's.

    ``lam`` (shape (B,) or scalar) and ``perm`` override the random draws.
    Statistics are treated as constants in the backward pass.
    """
    B = x.shape[0]
    if B < 2:
        logger.warning("mixstyle needs a batch of at least 2; returning the input unchanged")
        return x
    if rng.random() >= prob:
        return x
    mu, sigma = _detached_stats(x, eps)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=B)
    lam = np.broadcast_to(np.asarray(lam, dtype=x.dtype), (B,)).reshape(B, 1, 1, 1)
    if perm is None:
        perm = rng.permutation(B)
    mu_mix = lam * mu + (1.0 - lam) * mu[perm]
    sigma_mix = lam * sigma + (1.0 - lam) * sigma[perm]
    # xhat * sigma_mix + mu_mix, rearranged so lam == 1 returns x exactly
    scale = sigma_mix / sigma
    return x * scale + Tensor(mu_mix - mu * scale)


def dsu_forward(x: Tensor, rng: np.random.Generator, eps: float = 1e-5,
                noise: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """Resample instance statistics around themselves with batch-level spread.

    ``noise`` = (eps_mu, eps_sigma), each of shape (B, C), overrides the
    standard-normal draws.
    """
    B, C = x.shape[0], x.shape[1]
    if B < 2:
        logger.warning("DSU needs a batch of at least 2; returning the input unchanged")
        return x
    mu, sigma = _detached_stats(x, eps)
    spread_mu = mu.std(axis=0, keepdims=True)
    spread_sigma = sigma.std(axis=0, keepdims=True)
    if noise is None:
        e_mu = rng.standard_normal((B, C))
        e_sigma = rng.standard_normal((B, C))
    else:
        e_mu, e_sigma = noise
    e_mu = np.asarray(e_mu, dtype=x.dtype).reshape(B, C, 1, 1)
    e_sigma = np.asarray(e_sigma, dtype=x.dtype).reshape(B, C, 1, 1)
    shift_mu = e_mu * spread_mu
    shift_sigma = e_sigma * spread_sigma
    # new_sigma * xhat + new_mu, with new_* = old_* + shift_*, written around x
    scale = (sigma + shift_sigma) / sigma
    return x * scale + Tensor(mu + shift_mu - mu * scale)


# ---------------------------------------------------------------------------
# backbone


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    mode: str = "train"


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64, name: str = ""):
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")
        self.state = BatchNormState(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)
        self.eps = eps

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True, batch_stats_in_eval: bool = False) -> Tensor:
        self.state.mode = "train" if train else "eval"
        use_batch = train or batch_stats_in_eval
        return batch_norm2d(
            x, self.weight, self.bias, self.state.running_mean, self.state.running_var,
            train=use_batch, momentum=self.state.momentum, eps=self.eps,
            update_stats=update_stats and train,
        )


@dataclass
class BackboneConfig:
    """Architecture of the ConvNet: ``len(widths)`` blocks of conv3x3 -> BN -> ReLU.

    Site indices refer to blocks; a site is the output of that block's
    batch-norm layer (before the ReLU).
    """

    in_channels: int = 1
    widths: Tuple[int, ...] = (32, 32, 64, 64)
    pool_after: Tuple[int, ...] = (1, 3)
    ldp_sites: Tuple[int, ...] = (0, 1, 2)
    tap_sites: Optional[Tuple[int, ...]] = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    eval_batch_stats: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.pool_after = tuple(int(i) for i in self.pool_after)
        self.ldp_sites = tuple(int(i) for i in self.ldp_sites)
        if self.tap_sites is None:
            self.tap_sites = self.ldp_sites
        self.tap_sites = tuple(int(i) for i in self.tap_sites)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {list(self.widths)}")
        n = len(self.widths)
        for label, sites in (("ldp_sites", self.ldp_sites), ("tap_sites", self.tap_sites), ("pool_after", self.pool_after)):
            bad = [s for s in sites if not 0 <= s < n]
            if bad:
                raise ConfigError(f"{label} {bad} outside the {n} blocks")
            if len(set(sites)) != len(sites) or list(sites) != sorted(sites):
                raise ConfigError(f"{label} must be strictly increasing, got {list(sites)}")
        if not self.tap_sites:
            raise ConfigError("at least one tap site is required")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("widths", "pool_after", "ldp_sites", "tap_sites"):
            d[key] = list(d[key])
        return d


class Backbone:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.convs: List[Tensor] = []
        self.norms: List[BatchNorm2d] = []
        c_in = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            std = np.sqrt(2.0 / (c_in * 9))
            w = (rng.standard_normal((width, c_in, 3, 3)) * std).astype(dtype)
            self.convs.append(Tensor(w, requires_grad=True, name=f"conv{i}"))
            self.norms.append(BatchNorm2d(width, cfg.bn_momentum, cfg.bn_eps, dtype, name=f"bn{i}"))
            c_in = width

    @property
    def feature_dim(self) -> int:
        return self.cfg.widths[-1]

    @property
    def tap_sites(self) -> Tuple[int, ...]:
        return self.cfg.tap_sites

    @property
    def ldp_sites(self) -> Tuple[int, ...]:
        return self.cfg.ldp_sites

    def site_channels(self, site: int) -> int:
        return self.cfg.widths[site]

    def parameters(self) -> List[Tensor]:
        params = []
        for conv, bn in zip(self.convs, self.norms):
            params.extend([conv, bn.weight, bn.bias])
        return params

    def forward(self, x: Tensor, *, train: bool,
                site_fn: Optional[Callable[[int, Tensor], Tensor]] = None,
                tap_sites: Optional[Sequence[int]] = None, stop_after_taps: bool = False,
                update_stats: bool = True) -> Tuple[Optional[Tensor], List[Tensor]]:
        """Run the blocks; return (pooled features, activations at tap sites).

        ``site_fn(i, h)`` is applied at each LDP site right after batch norm.
        With ``stop_after_taps`` the pass ends at the last tap and the
        features are ``None``.
        """
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"backbone expects (B, {self.cfg.in_channels}, H, W) input, got {x.shape}")
        taps_at = self.cfg.tap_sites if tap_sites is None else tuple(tap_sites)
        last_tap = max(taps_at) if taps_at else -1
        taps = []
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            h = conv2d(h, conv, stride=1, padding=1)
            h = bn(h, train, update_stats=update_stats, batch_stats_in_eval=self.cfg.eval_batch_stats)
            if site_fn is not None and i in self.cfg.ldp_sites:
                h = site_fn(i, h)
            if i in taps_at:
                taps.append(h)
            if stop_after_taps and i == last_tap:
                return None, taps
            h = relu(h)
            if i in self.cfg.pool_after:
                h = max_pool2d(h, 2, 2)
        return global_avg_pool(h), taps


def build_backbone(cfg: BackboneConfig, rng: Optional[np.random.Generator] = None, dtype=np.float64) -> Backbone:
    """Default: widths [32, 32, 64, 64], pools after blocks 2 and 4, LDP after the first three BNs."""
    return Backbone(cfg, rng if rng is not None else np.random.default_rng(0), dtype)


class Stream:
    """Backbone followed by one linear classifier."""

    def __init__(self, backbone: Backbone, n_classes: int, rng: np.random.Generator, dtype=np.float64):
        d = backbone.feature_dim
        bound = 1.0 / np.sqrt(d)
        self.backbone = backbone
        self.n_classes = n_classes
        self.head_w = Tensor(rng.uniform(-bound, bound, (d, n_classes)).astype(dtype), requires_grad=True, name="head.weight")
        self.head_b = Tensor(rng.uniform(-bound, bound, n_classes).astype(dtype), requires_grad=True, name="head.bias")

    def parameters(self) -> List[Tensor]:
        return self.backbone.parameters() + [self.head_w, self.head_b]

    def forward(self, x: Tensor, *, train: bool, site_fn=None, update_stats: bool = True):
        feats, taps = self.backbone.forward(x, train=train, site_fn=site_fn, update_stats=update_stats)
        return linear(feats, self.head_w, self.head_b), feats, taps

    # -- state ---------------------------------------------------------
    def state_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        bb = self.backbone
        for i, (conv, bn) in enumerate(zip(bb.convs, bb.norms)):
            out[f"{prefix}conv{i}"] = conv.data
            out[f"{prefix}bn{i}.weight"] = bn.weight.data
            out[f"{prefix}bn{i}.bias"] = bn.bias.data
            out[f"{prefix}bn{i}.running_mean"] = bn.state.running_mean
            out[f"{prefix}bn{i}.running_var"] = bn.state.running_var
        out[f"{prefix}head.weight"] = self.head_w.data
        out[f"{prefix}head.bias"] = self.head_b.data
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        bb = self.backbone
        for i, (conv, bn) in enumerate(zip(bb.convs, bb.norms)):
            _assign(conv, arrays[f"{prefix}conv{i}"])
            _assign(bn.weight, arrays[f"{prefix}bn{i}.weight"])
            _assign(bn.bias, arrays[f"{prefix}bn{i}.bias"])
            bn.state.running_mean[...] = arrays[f"{prefix}bn{i}.running_mean"]
            bn.state.running_var[...] = arrays[f"{prefix}bn{i}.running_var"]
        _assign(self.head_w, arrays[f"{prefix}head.weight"])
        _assign(self.head_b, arrays[f"{prefix}head.bias"])


def _assign(t: Tensor, value: np.ndarray) -> None:
    if t.shape != value.shape:
        raise DimensionError(f"{t.name}: stored shape {value.shape} != model shape {t.shape}")
    t.data[...] = value


def build_stream(cfg: BackboneConfig, n_classes: int, seed_or_rng=0, dtype=np.float64) -> Stream:
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return Stream(build_backbone(cfg, rng, dtype), n_classes, rng, dtype)


# ---------------------------------------------------------------------------
# dual-stream model


@dataclass
class DualActivations:
    taps_o: List[Tensor]
    taps_p: List[Tensor]
    logits_o: Optional[Tensor]
    logits_p: Optional[Tensor]
    feats_o: Optional[Tensor] = None
    feats_p: Optional[Tensor] = None
    ldp_mask: Optional[np.ndarray] = None


@dataclass
class DualStreamModel:
    """Original stream (f_o, g_o) and perturbed stream (f_p, g_p) with perturbation sites."""

    original: Stream
    perturbed: Stream
    ldp: List[LdpParams]
    apply_prob: float = 0.5
    perturbation: str = "ldp"
    eps: float = 1e-5
    mixstyle_alpha: float = 0.1
    n_classes: int = field(init=False)

    def __post_init__(self):
        if self.perturbation not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {self.perturbation!r}; choose from {PERTURBATIONS}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError(f"apply_prob must lie in [0, 1], got {self.apply_prob}")
        self.n_classes = self.original.n_classes

    @property
    def sites(self) -> Tuple[int, ...]:
        return self.perturbed.backbone.ldp_sites

    def ldp_parameters(self) -> List[Tensor]:
        return [t for p in self.ldp for t in p.parameters()]

    def original_parameters(self) -> List[Tensor]:
        return self.original.parameters()

    def perturbed_parameters(self) -> List[Tensor]:
        return self.perturbed.parameters()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = self.original.state_arrays("original.")
        out.update(self.perturbed.state_arrays("perturbed."))
        for p in self.ldp:
            out[f"ldp{p.site_index}.gamma"] = p.gamma.data
            out[f"ldp{p.site_index}.beta"] = p.beta.data
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.original.load_arrays(arrays, "original.")
        self.perturbed.load_arrays(arrays, "perturbed.")
        for p in self.ldp:
            _assign(p.gamma, arrays[f"ldp{p.site_index}.gamma"])
            _assign(p.beta, arrays[f"ldp{p.site_index}.beta"])


def build_dual_model(cfg: BackboneConfig, n_classes: int, seed_or_rng=0, *, apply_prob: float = 0.5,
                     perturbation: str = "ldp", share_init: bool = True, eps: float = 1e-5,
                     mixstyle_alpha: float = 0.1, dtype=np.float64) -> DualStreamModel:
    """Two parameter-disjoint streams.

    With ``share_init`` the perturbed stream starts as a copy of the original
    one (the same initial backbone), and the original stream's weights equal
    those of :func:`build_stream` for the same seed.
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    original = Stream(build_backbone(cfg, rng, dtype), n_classes, rng, dtype)
    if share_init:
        perturbed = copy.deepcopy(original)
    else:
        perturbed = Stream(build_backbone(cfg, rng, dtype), n_classes, rng, dtype)
    ldp = [LdpParams.zeros(cfg.widths[s], s, dtype) for s in cfg.ldp_sites] if perturbation == "ldp" else []
    return DualStreamModel(original, perturbed, ldp, apply_prob, perturbation, eps, mixstyle_alpha)


def site_function(m: DualStreamModel, train: bool, mask: np.ndarray, rng: Optional[np.random.Generator]):
    sites = m.sites
    by_site = {p.site_index: p for p in m.ldp}

    def fn(i: int, h: Tensor) -> Tensor:
        k = sites.index(i)
        if m.perturbation == "ldp":
            if not train or mask[k]:
                return ldp_forward(h, by_site[i], m.eps)
            return h
        if not train or not mask[k]:
            return h
        if m.perturbation == "mixstyle":
            return mixstyle_forward(h, rng, alpha=m.mixstyle_alpha, prob=1.0, eps=m.eps)
        return dsu_forward(h, rng, eps=m.eps)

    return fn


def recalibrate_bn(m: DualStreamModel, x: np.ndarray, batch_size: int) -> None:
    """Re-estimate the perturbed stream's BN running statistics under inference-time perturbation.

    Training applies each site only part of the time, so the moving averages
    mix perturbed and clean activations while inference always perturbs.
    Here every BN buffer is replaced by the average of the batch statistics
    over ``x`` (full batches only), computed with every LDP site active and
    Mixstyle/DSU off. Parameters are untouched.
    """
    n = len(x)
    if n < 2:
        raise ConfigError("recalibration needs at least two examples")
    batch_size = min(batch_size, n)
    fn = site_function(m, False, np.ones(len(m.sites), dtype=bool), None)
    norms = m.perturbed.backbone.norms
    saved = [bn.state.momentum for bn in norms]
    try:
        with no_grad():
            for k, start in enumerate(range(0, n - batch_size + 1, batch_size), start=1):
                for bn in norms:
                    bn.state.momentum = 1.0 / k  # cumulative average
                m.perturbed.backbone.forward(Tensor(x[start:start + batch_size]), train=True, site_fn=fn)
    finally:
        for bn, mom in zip(norms, saved):
            bn.state.momentum = mom


def draw_ldp_mask(m: DualStreamModel, rng: Optional[np.random.Generator]) -> np.ndarray:
    if rng is None:
        raise ConfigError("train-mode dual forward needs an rng (or an explicit ldp_mask)")
    return rng.random(len(m.sites)) < m.apply_prob


def dual_forward(m: DualStreamModel, x, mode: str = "train", rng: Optional[np.random.Generator] = None,
                 *, ldp_mask: Optional[Sequence[bool]] = None, update_stats: bool = True,
                 taps_only: bool = False, streams: str = "both") -> DualActivations:
    """Run both streams on the same batch and record tap activations.

    In train mode each perturbation site is active with probability
    ``apply_prob`` (or per ``ldp_mask``); in eval mode LDP is applied at every
    site and Mixstyle/DSU are the identity. ``streams`` may be ``"original"``
    or ``"perturbed"`` to skip the other stream.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x = x if isinstance(x, Tensor) else Tensor(x)
    if ldp_mask is None:
        mask = draw_ldp_mask(m, rng) if train else np.ones(len(m.sites), dtype=bool)
    else:
        mask = np.asarray(ldp_mask, dtype=bool)
        if mask.shape != (len(m.sites),):
            raise DimensionError(f"ldp_mask needs {len(m.sites)} entries, got {mask.shape}")
    acts = DualActivations([], [], None, None, ldp_mask=mask)
    if streams in ("both", "original"):
        if taps_only:
            _, acts.taps_o = m.original.backbone.forward(x, train=train, stop_after_taps=True, update_stats=update_stats)
        else:
            acts.logits_o, acts.feats_o, acts.taps_o = m.original.forward(x, train=train, update_stats=update_stats)
    if streams in ("both", "perturbed"):
        fn = site_function(m, train, mask, rng)
        if taps_only:
            _, acts.taps_p = m.perturbed.backbone.forward(x, train=train, site_fn=fn, stop_after_taps=True,
                                                          update_stats=update_stats)
        else:
            acts.logits_p, acts.feats_p, acts.taps_p = m.perturbed.forward(x, train=train, site_fn=fn,
                                                                           update_stats=update_stats)
    return acts


Model = Union[DualStreamModel, Stream]


def predict_logits(m: Model, x, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits of the inference stream (the perturbed one for dual models)."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    chunks = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb = Tensor(x[start:start + batch_size])
            if isinstance(m, DualStreamModel):
                acts = dual_forward(m, xb, mode="eval", streams="perturbed")
                chunks.append(acts.logits_p.data)
            else:
                chunks.append(m.forward(xb, train=False)[0].data)
    if not chunks:
        return np.zeros((0, m.n_classes))
    return np.concatenate(chunks, axis=0)


def predict(m: Model, x, batch_size: int = 500) -> np.ndarray:
    """Class indices; ties go to the lowest index."""
    return np.argmax(predict_logits(m, x, batch_size), axis=1)


def accuracy(m: Model, x, y, batch_size: int = 500) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(m, x, batch_size) == y))


# ---------------------------------------------------------------------------
# checkpoints


def model_meta(m: Model) -> dict:
    if isinstance(m, DualStreamModel):
        return {
            "kind": "dual",
            "backbone": m.original.backbone.cfg.to_dict(),
            "n_classes": m.n_classes,
            "apply_prob": m.apply_prob,
            "perturbation": m.perturbation,
            "eps": m.eps,
            "mixstyle_alpha": m.mixstyle_alpha,
            "ldp_sites": [p.site_index for p in m.ldp],
            "dtype": str(m.original.head_w.dtype),
        }
    return {
        "kind": "stream",
        "backbone": m.backbone.cfg.to_dict(),
        "n_classes": m.n_classes,
        "dtype": str(m.head_w.dtype),
    }


def save_checkpoint(path, m: Model, extra: Optional[dict] = None,
                    arrays: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """Write an ``.npz`` holding every parameter/buffer plus a JSON header.

    ``arrays`` substitutes a stored snapshot for the model's live state.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "ccfp-checkpoint", "version": CHECKPOINT_VERSION, **model_meta(m), "extra": extra or {}}
    state = arrays if arrays is not None else m.state_arrays()
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **state)
    return path


def load_checkpoint(path) -> Tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != "ccfp-checkpoint":
        raise ConfigError(f"{path} is not a checkpoint file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = BackboneConfig(**meta["backbone"])
    dtype = np.dtype(meta["dtype"])
    if meta["kind"] == "dual":
        m = build_dual_model(cfg, meta["n_classes"], 0, apply_prob=meta["apply_prob"],
                             perturbation=meta["perturbation"], eps=meta["eps"],
                             mixstyle_alpha=meta["mixstyle_alpha"], dtype=dtype)
    else:
        m = build_stream(cfg, meta["n_classes"], 0, dtype)
    m.load_arrays(arrays)
    return m, meta
