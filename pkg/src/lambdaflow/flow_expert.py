"""DiT action expert trained by flow matching, with prefix conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .conditioner import KVCacheSet
from .diffcore import Tensor
from .nn import (CAUSAL, LAMBDA, ConfigError, DiTBlock, Linear, MaskSpec, MLP, Module, Parameter,
                 Standardizer, TimestepEmbedder, TokenLayout, build_mask, rope_indices)


@dataclass
class FlowConfig:
    horizon: int = 30
    action_dim: int = 2
    state_dim: int = 2
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    window: int = 6
    rope_offset: int = 10
    tau_max: float = 0.999
    tau_alpha: float = 1.5
    tau_beta: float = 1.0
    sample_steps: int = 5
    reweight_lambda: float = 1.0
    reweight_max: float = 5.0
    # baseline only: causal mask with a visible prefix
    allow_causal_prefix: bool = False

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 < self.tau_max < 1.0:
            raise ConfigError("tau_max must lie in (0, 1)")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be >= 1")

    def mask(self, kind: str) -> MaskSpec:
        return MaskSpec(kind, self.window)


@dataclass
class NoisySample:
    clean: np.ndarray
    noise: np.ndarray
    tau: np.ndarray | float
    noisy: np.ndarray = field(init=False)
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        tau = _tau_like(self.tau, self.clean)
        self.noisy = tau * self.clean + (1.0 - tau) * self.noise
        self.target = self.clean - self.noise


@dataclass
class PrefixSpec:
    actions: np.ndarray  # (dtc, A) or (B, dtc, A)

    @property
    def prefix_len(self) -> int:
        return int(np.asarray(self.actions).shape[-2])


def _tau_like(tau, ref: np.ndarray):
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim == 0:
        return tau
    return tau.reshape(tau.shape + (1,) * (ref.ndim - tau.ndim))


def sample_tau(rng: np.random.Generator, cfg: FlowConfig, size=None):
    """Beta-distributed flow time mapped so that mass sits near tau = 0 (noise)."""
    u = rng.beta(cfg.tau_alpha, cfg.tau_beta, size)
    return cfg.tau_max * (1.0 - u)


def make_noisy(a: np.ndarray, tau, eps: np.ndarray) -> NoisySample:
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != action shape {a.shape}")
    return NoisySample(a, eps, tau)


class FlowExpert(Module):
    def __init__(self, cfg: FlowConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.model_dim
        if d % cfg.heads:
            raise ConfigError(f"model_dim {d} not divisible by head_count {cfg.heads}")
        self.sink = Parameter(rng.normal(0.0, 1.0, d))
        self.state_encoder = MLP(cfg.state_dim, d, d, rng)
        self.action_encoder = MLP(cfg.action_dim, d, d, rng)
        self.time_embed = TimestepEmbedder(d, rng)
        self.blocks = [DiTBlock(d, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.layers)]
        self.final_modulation = Linear(d, 2 * d, rng, zero=True)
        self.head = Linear(d, cfg.action_dim, rng, zero=True)
        # the network sees actions standardised per dimension
        self.action_norm = Standardizer(cfg.action_dim)
        self._mask_cache: dict = {}

    # -- masks ------------------------------------------------------------

    def _layout_arrays(self, prefix_lens: np.ndarray, spec: MaskSpec):
        t = self.cfg.horizon
        vis, rope = [], []
        for plen in prefix_lens:
            key = (int(plen), spec.kind, spec.window)
            if key not in self._mask_cache:
                layout = TokenLayout(int(plen), t - int(plen))
                self._mask_cache[key] = (build_mask(layout, spec), rope_indices(layout, self.cfg.rope_offset))
            m, r = self._mask_cache[key]
            vis.append(m)
            rope.append(r)
        return np.stack(vis)[:, None], np.stack(rope)[:, None]

    def _validate(self, kv: KVCacheSet, prefix_lens: np.ndarray, spec: MaskSpec):
        if kv.layer_count != len(self.blocks):
            raise ConfigError(f"KV cache has {kv.layer_count} layers, expert has {len(self.blocks)}")
        if spec.kind == CAUSAL and np.any(prefix_lens > 0) and not self.cfg.allow_causal_prefix:
            raise ConfigError("causal mask requires prefix_len == 0")
        if np.any(prefix_lens < 0) or np.any(prefix_lens > self.cfg.horizon):
            raise ConfigError("prefix_len must lie in [0, horizon]")

    # -- forward ----------------------------------------------------------

    def velocity(self, kv: KVCacheSet, state: np.ndarray, actions_in: np.ndarray, tau,
                 prefix_lens, spec: MaskSpec) -> Tensor:
        """Batched velocity prediction ``(B, T, A)`` over the whole action band.

        ``actions_in`` holds clean prefix actions in rows ``< prefix_len`` and
        noisy actions after; callers read only the noisy rows.
        """
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        b = state.shape[0]
        prefix_lens = np.broadcast_to(np.asarray(prefix_lens, dtype=np.int64), (b,))
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,))
        self._validate(kv, prefix_lens, spec)
        d = self.cfg.model_dim
        vis, rope = self._layout_arrays(prefix_lens, spec)
        sink = dc.reshape(dc.expand(self.sink, 0, b), (b, 1, d))
        st = dc.reshape(self.state_encoder(Tensor(state)), (b, 1, d))
        acts = self.action_encoder(dc.as_tensor(actions_in))
        x = dc.concat([sink, st, acts], axis=1)
        cond = self.time_embed(tau)
        for blk, layer_kv in zip(self.blocks, kv.layers):
            x = blk(x, cond, vis, rope, layer_kv)
        mod = self.final_modulation(dc.silu(cond))
        shift, scale = mod[:, :d], mod[:, d:]
        n = x.shape[1]
        h = dc.layer_norm(x) * dc.expand(1.0 + scale, 1, n) + dc.expand(shift, 1, n)
        return self.head(h[:, 2:])

    def sample_chunk(self, kv: KVCacheSet, state: np.ndarray, prefix: np.ndarray | None,
                     rng: np.random.Generator, steps: int | None = None,
                     spec: MaskSpec | None = None) -> np.ndarray:
        """Generate ``(B, T, A)`` chunks by Euler integration from Gaussian noise.

        Works in action units: ``prefix`` is standardised on the way in and the
        integrated band is mapped back. The first ``prefix_len`` rows of the
        output are the prefix, unchanged.
        """
        cfg = self.cfg
        steps = cfg.sample_steps if steps is None else steps
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        b, t, a = state.shape[0], cfg.horizon, cfg.action_dim
        if prefix is None:
            prefix = np.zeros((b, 0, a))
        prefix = np.asarray(prefix, dtype=np.float64).reshape(b, -1, a)
        plen = prefix.shape[1]
        if plen > t:
            raise ConfigError("prefix longer than horizon")
        if spec is None:
            spec = cfg.mask(LAMBDA if plen > 0 else CAUSAL)
        x0 = rng.standard_normal((b, t - plen, a))
        pre = self.action_norm.encode(prefix)

        def field(noisy, tau):
            inp = np.concatenate([pre, noisy], axis=1)
            return self.velocity(kv, state, inp, np.full(b, tau), plen, spec).data[:, plen:]

        with dc.no_grad():
            band = euler_integrate(field, x0, steps)
        return np.concatenate([prefix, self.action_norm.decode(band)], axis=1)


def euler_integrate(field: Callable[[np.ndarray, float], np.ndarray], x0: np.ndarray, steps: int) -> np.ndarray:
    """Left-endpoint Euler on tau in {0, 1/steps, ..., (steps-1)/steps}."""
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    for k in range(steps):
        x = x + h * field(x, k / steps)
    return x


def dit_forward(model: FlowExpert, kv: KVCacheSet, state: np.ndarray, noisy: np.ndarray, tau: float,
                prefix: PrefixSpec, spec: MaskSpec) -> Tensor:
    """Single-sample velocity over the noisy band, shape ``(T - prefix_len, A)``."""
    pre = np.asarray(prefix.actions, dtype=np.float64).reshape(-1, model.cfg.action_dim)
    plen = pre.shape[0]
    noisy = np.asarray(noisy, dtype=np.float64)
    if plen + noisy.shape[0] != model.cfg.horizon:
        raise ConfigError("prefix_len + noisy_len must equal the horizon")
    inp = np.concatenate([pre, noisy], axis=0)[None]
    v = model.velocity(kv, np.asarray(state)[None], inp, tau, plen, spec)
    return v[0, plen:]


def noisy_position_weights(prefix_lens, horizon: int, action_dim: int) -> np.ndarray:
    """Per-element weights that average squared error over each sample's noisy band."""
    prefix_lens = np.asarray(prefix_lens, dtype=np.int64)
    keep = np.arange(horizon)[None, :] >= prefix_lens[:, None]
    counts = (horizon - prefix_lens) * action_dim
    w = keep / np.maximum(counts, 1)[:, None]
    return np.repeat(w[:, :, None], action_dim, axis=2)


def flow_loss_per_sample(v: Tensor, target: np.ndarray, prefix_lens) -> Tensor:
    """MSE between predicted and target velocity over noisy rows, one value per sample."""
    b, t, a = v.shape
    w = noisy_position_weights(np.broadcast_to(prefix_lens, (b,)), t, a)
    sq = dc.square(v - Tensor(target))
    return dc.sum_(sq * Tensor(w), axis=(1, 2))


def flow_loss(v: Tensor, sample: NoisySample | np.ndarray, prefix_len=0) -> Tensor:
    """Flow-matching loss averaged over the batch.

    ``v`` is either ``(B, T, A)`` over the full band (prefix rows ignored) or
    a single ``(T - prefix_len, A)`` noisy band.
    """
    target = sample.target if isinstance(sample, NoisySample) else np.asarray(sample)
    if v.ndim == 2:
        return dc.mean(dc.square(v - Tensor(target[-v.shape[0]:])))
    return dc.mean(flow_loss_per_sample(v, target, prefix_len))


def reweight_weights(prefix_errors, prefix_lens, lam: float = 1.0, w_max: float = 5.0) -> np.ndarray:
    prefix_errors = np.asarray(prefix_errors, dtype=np.float64)
    prefix_lens = np.broadcast_to(np.asarray(prefix_lens), prefix_errors.shape)
    raw = np.where(prefix_lens > 0, np.minimum(1.0 + lam * prefix_errors, w_max), 1.0)
    return raw / raw.mean()


def reweight(batch_losses: Tensor, prefix_errors, prefix_lens, lam: float = 1.0, w_max: float = 5.0) -> Tensor:
    """Batch loss with per-sample weights from online-prediction prefix error."""
    w = reweight_weights(prefix_errors, prefix_lens, lam, w_max)
    return dc.sum_(batch_losses * Tensor(w)) * (1.0 / batch_losses.shape[0])
