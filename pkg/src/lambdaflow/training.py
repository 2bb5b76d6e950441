"""Optimiser and the three training stages (choice, flow, asynchronous post-training)."""

from __future__ import annotations

import math
import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .conditioner import Conditioner, candidate_distances, choice_loss
from .diffcore import Tensor
from .flow_expert import FlowConfig, FlowExpert, flow_loss_per_sample, reweight, sample_tau
from .nn import CAUSAL, LAMBDA, ConfigError
from .simworld import Dataset

CHOICE, FLOW, POSTTRAIN_ASYNC, POSTTRAIN_SYNC = "choice", "flow", "posttrain_async", "posttrain_sync"
STAGES = (CHOICE, FLOW, POSTTRAIN_ASYNC, POSTTRAIN_SYNC)
ONLINE, GROUND_TRUTH = "online", "ground_truth"
CONSTANT, COSINE = "constant", "cosine"


class TrainingFault(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class FreezeViolation(TrainingFault):
    pass


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: list, grads: list, state: OptimizerState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, decay: float = 0.0) -> OptimizerState:
    """In-place AdamW update of the arrays in ``params``; returns ``state`` advanced by one step."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser moments must align")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + decay * p)
    return state


class AdamW:
    """AdamW over a list of :class:`~lambdaflow.nn.Parameter` with warmup and global-norm clipping.

    With ``total_steps`` set, the rate follows a half cosine from ``lr`` down to
    zero between the end of warmup and ``total_steps``; otherwise it stays flat.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0, warmup: int = 0,
                 grad_clip: float | None = None, betas=(0.9, 0.999), eps: float = 1e-8,
                 total_steps: int | None = None):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0")
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.weight_decay, self.warmup = lr, weight_decay, warmup
        self.grad_clip, self.betas, self.eps = grad_clip, betas, eps
        self.total_steps = total_steps
        self.state = OptimizerState.like([p.data for p in self.params])

    def current_lr(self) -> float:
        n = self.state.step
        if n < self.warmup:
            return self.lr * (n + 1) / self.warmup
        if self.total_steps is None or self.total_steps <= self.warmup:
            return self.lr
        frac = min(1.0, (n - self.warmup) / (self.total_steps - self.warmup))
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        if self.grad_clip and norm > self.grad_clip:
            grads = [g * (self.grad_clip / norm) for g in grads]
        lr = self.current_lr()
        adamw_step([p.data for p in self.params], grads, self.state, lr, *self.betas, self.eps,
                   self.weight_decay)
        return norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# configuration and data
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = CHOICE
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    warmup: int = 100
    grad_clip: float = 1.0
    freeze_conditioner: bool = True
    prefix_set: tuple = tuple(range(7))
    prefix_source: str = ONLINE
    mask_kind: str = LAMBDA
    score_weight: float = 0.1
    log_every: int = 10
    lr_schedule: str = COSINE
    # stages 1 and 2 set the model's per-dimension action mean/std from the dataset
    fit_action_stats: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr_schedule not in (CONSTANT, COSINE):
            raise ConfigError(f"lr_schedule must be {CONSTANT!r} or {COSINE!r}")
        if self.prefix_source not in (ONLINE, GROUND_TRUTH):
            raise ConfigError(f"prefix_source must be {ONLINE!r} or {GROUND_TRUTH!r}")
        if self.mask_kind not in (CAUSAL, LAMBDA):
            raise ConfigError(f"unknown mask kind {self.mask_kind!r}")
        self.prefix_set = tuple(int(x) for x in self.prefix_set)
        if not self.prefix_set or min(self.prefix_set) < 0:
            raise ConfigError("prefix_set must be a non-empty set of non-negative lengths")


@dataclass
class Batch:
    obs: np.ndarray  # (B, D)
    state: np.ndarray  # (B, S)
    ids: np.ndarray  # (B,)
    chunk: np.ndarray  # (B, T, A)


class ChunkSampler:
    """Uniform ``(episode, tick)`` sampling.

    Chunk rows past the episode end repeat its final action, so the targets stay
    inside the action distribution the model is standardised on.
    """

    def __init__(self, dataset: Dataset, horizon: int):
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        self.dataset, self.horizon = dataset, horizon
        lengths = np.array([len(e.actions) for e in dataset.episodes])
        self.episode_of = np.repeat(np.arange(len(lengths)), lengths)
        self.tick_of = np.concatenate([np.arange(n) for n in lengths])
        self.obs = np.concatenate([e.observations for e in dataset.episodes])
        self.states = np.concatenate([e.states for e in dataset.episodes])
        self.ids = np.repeat([e.instruction_id for e in dataset.episodes], lengths)
        t, a = horizon, dataset.action_dim
        self.chunks = np.zeros((len(self.obs), t, a))
        row = 0
        for e in dataset.episodes:
            n = len(e.actions)
            padded = np.concatenate([e.actions, np.repeat(e.actions[-1:], t, axis=0)])
            idx = np.arange(n)[:, None] + np.arange(t)[None, :]
            self.chunks[row:row + n] = padded[idx]
            row += n

    def __len__(self):
        return len(self.obs)

    def take(self, rows) -> Batch:
        return Batch(self.obs[rows], self.states[rows], self.ids[rows], self.chunks[rows])

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        return self.take(rng.integers(0, len(self), batch_size))


def build_models(obs_dim: int, state_dim: int, action_dim: int, flow_cfg: FlowConfig, n_candidates: int = 4,
                 seed: int = 0, vocab: int = 2, difference_pairs: tuple = ()):
    rng = np.random.default_rng(seed)
    cond = Conditioner(obs_dim, state_dim, action_dim, flow_cfg.horizon, n_candidates=n_candidates,
                       model_dim=flow_cfg.model_dim, heads=flow_cfg.heads, layers=flow_cfg.layers,
                       vocab=vocab, mlp_ratio=flow_cfg.mlp_ratio, rng=rng, difference_pairs=difference_pairs)
    expert = FlowExpert(flow_cfg, rng)
    return cond, expert


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    winner_counts: np.ndarray | None = None
    prefix_counts: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        keys = ["step", "stage", "loss", "lr", "grad_norm", "prefix_hist", "winner_hist"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r.get(k, "") for k in keys})


def _hist_text(counts) -> str:
    return ";".join(str(int(c)) for c in counts)


def _guard(loss: Tensor, step: int):
    if not np.isfinite(loss.data).all():
        raise TrainingFault("non-finite loss", step)


def _apply(opt: AdamW, step: int) -> float:
    try:
        return opt.step()
    except FloatingPointError as exc:
        raise TrainingFault(str(exc), step) from None


def _optimizer(params, cfg: TrainConfig) -> AdamW:
    total = cfg.steps if cfg.lr_schedule == COSINE else None
    return AdamW(params, cfg.lr, cfg.weight_decay, cfg.warmup, cfg.grad_clip, total_steps=total)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _all_actions(dataset: Dataset) -> np.ndarray:
    return np.concatenate([ep.actions for ep in dataset.episodes])


def pretrain_choice(dataset: Dataset, cfg: TrainConfig, conditioner: Conditioner) -> TrainLog:
    """Stage 1: fit the conditioner's multi-candidate head with winner-takes-all."""
    if cfg.stage != CHOICE:
        raise ConfigError("pretrain_choice needs stage 'choice'")
    rng = np.random.default_rng(cfg.seed)
    sampler = ChunkSampler(dataset, conditioner.horizon)
    conditioner.unfreeze()
    if cfg.fit_action_stats:
        conditioner.action_norm.fit(_all_actions(dataset))
    opt = _optimizer(conditioner.parameters(), cfg)
    log = TrainLog(winner_counts=np.zeros(conditioner.n_candidates, dtype=np.int64))
    window = np.zeros(conditioner.n_candidates, dtype=np.int64)
    for step in range(cfg.steps):
        b = sampler.sample(rng, cfg.batch_size)
        opt.zero_grad()
        out = conditioner.choice_forward((b.obs, b.ids), b.state)
        loss, info = choice_loss(out, conditioner.action_norm.encode(b.chunk), cfg.score_weight)
        _guard(loss, step)
        dc.backward(loss)
        lr = opt.current_lr()
        norm = _apply(opt, step)
        counts = np.bincount(info["winners"], minlength=conditioner.n_candidates)
        log.winner_counts += counts
        window += counts
        log.losses.append(float(loss.data))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.rows.append(dict(step=step, stage=CHOICE, loss=float(loss.data), lr=lr, grad_norm=norm,
                                 winner_hist=_hist_text(window)))
            window[:] = 0
    return log


def _flow_batch(expert: FlowExpert, kv, b: Batch, rng: np.random.Generator, plens: np.ndarray,
                prefix: np.ndarray | None):
    cfg = expert.cfg
    bsz, t, a = b.chunk.shape
    clean = expert.action_norm.encode(b.chunk)
    tau = sample_tau(rng, cfg, bsz)
    eps = rng.standard_normal((bsz, t, a))
    noisy = tau[:, None, None] * clean + (1.0 - tau[:, None, None]) * eps
    target = clean - eps
    if prefix is not None:
        rows = np.arange(t)[None, :, None] < plens[:, None, None]
        noisy = np.where(rows, expert.action_norm.encode(prefix), noisy)
    return noisy, target, tau


def pretrain_flow(dataset: Dataset, cfg: TrainConfig, conditioner: Conditioner, expert: FlowExpert) -> TrainLog:
    """Stage 2: flow matching with the conditioner frozen (causal mask, no prefix)."""
    if cfg.stage != FLOW:
        raise ConfigError("pretrain_flow needs stage 'flow'")
    rng = np.random.default_rng(cfg.seed)
    sampler = ChunkSampler(dataset, expert.cfg.horizon)
    conditioner.freeze()
    expert.unfreeze()
    if cfg.fit_action_stats:
        expert.action_norm.fit(_all_actions(dataset))
    opt = _optimizer(expert.parameters(), cfg)
    spec = expert.cfg.mask(CAUSAL)
    cond_params = conditioner.parameters()
    log = TrainLog()
    for step in range(cfg.steps):
        b = sampler.sample(rng, cfg.batch_size)
        opt.zero_grad()
        conditioner.zero_grad()
        kv = conditioner.encode_context((b.obs, b.ids))
        noisy, target, tau = _flow_batch(expert, kv, b, rng, np.zeros(len(b.obs), np.int64), None)
        v = expert.velocity(kv, b.state, noisy, tau, 0, spec)
        loss = dc.mean(flow_loss_per_sample(v, target, 0))
        _guard(loss, step)
        dc.backward(loss, cond_params)
        leak = max(float(np.max(np.abs(p.grad))) for p in cond_params)
        if leak != 0.0:
            raise FreezeViolation(f"conditioner gradient {leak:g} while frozen", step)
        lr = opt.current_lr()
        norm = _apply(opt, step)
        log.losses.append(float(loss.data))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.rows.append(dict(step=step, stage=FLOW, loss=float(loss.data), lr=lr, grad_norm=norm))
    return log


def online_prefix(expert: FlowExpert, kv, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unconditioned chunk from the current model, used as the committed prefix."""
    with dc.no_grad():
        return expert.sample_chunk(kv.detach(), state, None, rng, spec=expert.cfg.mask(CAUSAL))


def posttrain(dataset: Dataset, cfg: TrainConfig, conditioner: Conditioner, expert: FlowExpert) -> TrainLog:
    """Prefix-conditioned post-training with per-sample prefix lengths and loss re-weighting.

    ``stage='posttrain_sync'`` reduces to prefix length 0 under the causal mask.
    """
    if cfg.stage not in (POSTTRAIN_ASYNC, POSTTRAIN_SYNC):
        raise ConfigError("posttrain needs a posttrain stage")
    fc = expert.cfg
    prefix_set = np.array(cfg.prefix_set if cfg.stage == POSTTRAIN_ASYNC else (0,))
    if prefix_set.max() > fc.horizon:
        raise ConfigError(f"prefix length {prefix_set.max()} exceeds horizon {fc.horizon}")
    kind = cfg.mask_kind if cfg.stage == POSTTRAIN_ASYNC else CAUSAL
    if kind == CAUSAL and prefix_set.max() > 0 and not fc.allow_causal_prefix:
        raise ConfigError("causal post-training with a prefix needs allow_causal_prefix")
    spec = fc.mask(kind)
    rng = np.random.default_rng(cfg.seed)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    sampler = ChunkSampler(dataset, fc.horizon)
    expert.unfreeze()
    if cfg.freeze_conditioner:
        conditioner.freeze()
        params = expert.parameters()
    else:
        conditioner.unfreeze()
        params = expert.parameters() + conditioner.parameters()
    opt = _optimizer(params, cfg)
    log = TrainLog(prefix_counts={int(k): 0 for k in range(int(prefix_set.max()) + 1)})
    window = np.zeros(int(prefix_set.max()) + 1, dtype=np.int64)
    t = fc.horizon
    for step in range(cfg.steps):
        b = sampler.sample(rng, cfg.batch_size)
        plens = prefix_set[rng.integers(0, len(prefix_set), len(b.obs))]
        opt.zero_grad()
        kv = conditioner.encode_context((b.obs, b.ids))
        errors = np.zeros(len(b.obs))
        prefix = b.chunk
        if plens.max() > 0:
            pred = online_prefix(expert, kv, b.state, sample_rng)
            rows = np.arange(t)[None, :] < plens[:, None]
            l1 = np.abs(pred - b.chunk).mean(axis=2)
            errors = np.where(plens > 0, (l1 * rows).sum(axis=1) / np.maximum(plens, 1), 0.0)
            if cfg.prefix_source == ONLINE:
                prefix = pred
        noisy, target, tau = _flow_batch(expert, kv, b, rng, plens, prefix)
        v = expert.velocity(kv, b.state, noisy, tau, plens, spec)
        per = flow_loss_per_sample(v, target, plens)
        loss = reweight(per, errors, plens, fc.reweight_lambda, fc.reweight_max)
        _guard(loss, step)
        dc.backward(loss)
        lr = opt.current_lr()
        norm = _apply(opt, step)
        counts = np.bincount(plens, minlength=len(window))
        window += counts
        for k, c in enumerate(counts):
            log.prefix_counts[k] = log.prefix_counts.get(k, 0) + int(c)
        log.losses.append(float(loss.data))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.rows.append(dict(step=step, stage=cfg.stage, loss=float(loss.data), lr=lr, grad_norm=norm,
                                 prefix_hist=_hist_text(window)))
            window[:] = 0
    return log


posttrain_async = posttrain


def choice_mode_spread(conditioner: Conditioner, batch: Batch) -> np.ndarray:
    """Per-candidate mean distance to the ground truth on a batch (diagnostic)."""
    with dc.no_grad():
        out = conditioner.choice_forward((batch.obs, batch.ids), batch.state)
    return candidate_distances(out.candidates.data, conditioner.action_norm.encode(batch.chunk)).mean(axis=0)


__all__ = [
    "AdamW", "Batch", "ChunkSampler", "FreezeViolation", "OptimizerState", "TrainConfig", "TrainLog",
    "TrainingFault", "adamw_step", "build_models", "online_prefix", "posttrain", "posttrain_async",
    "pretrain_choice", "pretrain_flow",
]
