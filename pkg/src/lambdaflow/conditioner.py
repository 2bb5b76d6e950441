"""Small trainable stand-in for the frozen VLM.

It turns ``(observation, instruction)`` into per-layer key/value caches for the
action expert and carries the multi-candidate "choice" head used in the first
pre-training stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import ConfigError, EncoderBlock, Linear, MLP, Module, Parameter, Standardizer


class VocabularyError(KeyError):
    pass


@dataclass
class ContextInput:
    observation: np.ndarray  # (D,) or (B, D)
    instruction_id: int | np.ndarray
    timestamp_tick: int = 0

    def batched(self):
        obs = np.atleast_2d(np.asarray(self.observation, dtype=np.float64))
        ids = np.broadcast_to(np.asarray(self.instruction_id, dtype=np.int64), (obs.shape[0],))
        return obs, np.ascontiguousarray(ids)


@dataclass
class KVCacheSet:
    """Per-layer ``(keys, values)``, each ``(B, heads, tokens, head_dim)``."""

    layers: list

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def token_count(self) -> int:
        return self.layers[0][0].shape[-2]

    def detach(self) -> "KVCacheSet":
        return KVCacheSet([(k.detach(), v.detach()) for k, v in self.layers])

    def select(self, rows) -> "KVCacheSet":
        return KVCacheSet([(Tensor(k.data[rows]), Tensor(v.data[rows])) for k, v in self.layers])


@dataclass
class ChoiceOutput:
    candidates: Tensor  # (B, N, T, A)
    scores: Tensor  # (B, N)


class Conditioner(Module):
    def __init__(self, obs_dim: int, state_dim: int, action_dim: int, horizon: int, *,
                 n_candidates: int = 4, model_dim: int = 64, heads: int = 4, layers: int = 4,
                 vocab: int = 2, mlp_ratio: int = 2, rng: np.random.Generator | None = None,
                 difference_pairs: tuple = ()):
        if n_candidates < 2:
            raise ConfigError("choice head needs at least 2 candidates")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.state_dim, self.action_dim = obs_dim, state_dim, action_dim
        self.horizon, self.n_candidates = horizon, n_candidates
        self.model_dim, self.heads, self.vocab = model_dim, heads, vocab
        # extra tokens for obs[:, i] - obs[:, j]; lets relative geometry enter without attention arithmetic
        self.difference_pairs = tuple((int(i), int(j)) for i, j in difference_pairs)
        for i, j in self.difference_pairs:
            if not (0 <= i < obs_dim and 0 <= j < obs_dim):
                raise ConfigError(f"difference pair ({i}, {j}) outside observation width {obs_dim}")
        n_feat = obs_dim + len(self.difference_pairs)
        self.instruction_table = Parameter(rng.normal(0.0, 1.0, (vocab, model_dim)))
        self.feature_weight = Parameter(rng.normal(0.0, 1.0, (n_feat, model_dim)))
        self.feature_bias = Parameter(rng.normal(0.0, 1.0, (n_feat, model_dim)))
        self.state_encoder = MLP(state_dim, model_dim, model_dim, rng)
        self.action_queries = Parameter(rng.normal(0.0, 1.0, (horizon, model_dim)))
        self.score_query = Parameter(rng.normal(0.0, 1.0, (model_dim,)))
        self.blocks = [EncoderBlock(model_dim, heads, rng, mlp_ratio) for _ in range(layers)]
        self.action_head = Linear(model_dim, n_candidates * action_dim, rng)
        # distinct per-candidate offsets so winner-takes-all does not start collapsed
        self.action_head.bias.data[:] = rng.normal(0.0, 0.5, n_candidates * action_dim)
        self.score_head = Linear(model_dim, n_candidates, rng)
        # candidate chunks are predicted in standardised action units
        self.action_norm = Standardizer(action_dim)

    @property
    def layer_count(self) -> int:
        return len(self.blocks)

    def _check(self, obs: np.ndarray, ids: np.ndarray):
        if obs.shape[-1] != self.obs_dim:
            raise ConfigError(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        if np.any(ids < 0) or np.any(ids >= self.vocab):
            raise VocabularyError(f"instruction id outside vocabulary of size {self.vocab}")

    def features(self, obs: np.ndarray) -> np.ndarray:
        if not self.difference_pairs:
            return obs
        extra = [obs[:, i] - obs[:, j] for i, j in self.difference_pairs]
        return np.concatenate([obs, np.stack(extra, axis=1)], axis=1)

    def context_tokens(self, obs: np.ndarray, ids: np.ndarray) -> Tensor:
        obs = self.features(obs)
        b = obs.shape[0]
        d = self.model_dim
        instr = dc.reshape(dc.embedding(self.instruction_table, ids), (b, 1, d))
        scale = Tensor(np.repeat(obs[:, :, None], d, axis=2))
        feats = dc.expand(self.feature_weight, 0, b) * scale + dc.expand(self.feature_bias, 0, b)
        return dc.concat([instr, feats], axis=1)

    def encode_context(self, ctx: ContextInput | tuple) -> KVCacheSet:
        obs, ids = ctx.batched() if isinstance(ctx, ContextInput) else ctx
        self._check(obs, ids)
        x = self.context_tokens(obs, ids)
        vis = np.ones((x.shape[1], x.shape[1]), dtype=bool)
        layers = []
        for blk in self.blocks:
            x, kv = blk(x, vis)
            layers.append(kv)
        return KVCacheSet(layers)

    def choice_forward(self, ctx: ContextInput | tuple, state: np.ndarray) -> ChoiceOutput:
        obs, ids = ctx.batched() if isinstance(ctx, ContextInput) else ctx
        self._check(obs, ids)
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        if state.shape != (obs.shape[0], self.state_dim):
            raise ConfigError(f"state shape {state.shape} does not match ({obs.shape[0]}, {self.state_dim})")
        b, d, t = obs.shape[0], self.model_dim, self.horizon
        ctx_tok = self.context_tokens(obs, ids)
        n_ctx = ctx_tok.shape[1]
        st = dc.reshape(self.state_encoder(Tensor(state)), (b, 1, d))
        queries = dc.expand(self.action_queries, 0, b)
        score = dc.reshape(dc.expand(self.score_query, 0, b), (b, 1, d))
        x = dc.concat([ctx_tok, st, queries, score], axis=1)
        n = x.shape[1]
        # context attends to itself only, so its keys/values match encode_context
        vis = np.tril(np.ones((n, n), dtype=bool))
        vis[:n_ctx, :n_ctx] = True
        for blk in self.blocks:
            x, _ = blk(x, vis)
        x = dc.layer_norm(x)
        act = self.action_head(x[:, n_ctx + 1:n_ctx + 1 + t])
        act = dc.transpose(dc.reshape(act, (b, t, self.n_candidates, self.action_dim)), (0, 2, 1, 3))
        scores = self.score_head(x[:, n - 1])
        return ChoiceOutput(act, scores)


def candidate_distances(candidates: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean-L1 distance of each candidate chunk to the ground truth, shape ``(B, N)``."""
    return np.abs(candidates - gt[:, None]).mean(axis=(2, 3))


def choice_loss(out: ChoiceOutput, gt: np.ndarray, score_weight: float = 0.1):
    """Winner-takes-all action loss plus score regression onto realised distances.

    Returns ``(loss, info)`` where ``info`` carries the per-candidate distances
    and winner indices (lowest index wins ties).
    """
    cand = out.candidates
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    if cand.shape[0] != gt.shape[0] or cand.shape[2:] != gt.shape[1:]:
        raise ConfigError(f"candidates {cand.shape} vs ground truth {gt.shape}")
    b, n = cand.shape[:2]
    target = np.repeat(gt[:, None], n, axis=1)
    dist = dc.mean(dc.abs_(cand - Tensor(target)), axis=(2, 3))
    winners = np.argmin(dist.data, axis=1)
    best = dist[np.arange(b), winners]
    targets = dist.data.copy()
    score_err = dc.square(out.scores - Tensor(targets))
    loss = dc.mean(best) + dc.mean(score_err) * score_weight
    return loss, {"distances": targets, "winners": winners}
