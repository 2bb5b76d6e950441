"""End-to-end glue: models from a run config, stage runners, and batched rollouts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import simworld as sw
from .conditioner import Conditioner
from .flow_expert import FlowConfig, FlowExpert
from .nn import CAUSAL, LAMBDA
from .policy import FlowPolicy
from .runtime import RolloutTrace, ScheduleConfig, async_rollout, sync_rollout
from .storage import RunConfig, bundle, load_checkpoint, save_checkpoint, unbundle
from .training import (CHOICE, FLOW, POSTTRAIN_ASYNC, TrainConfig, TrainLog, build_models, posttrain,
                       pretrain_choice, pretrain_flow)

SYNC, ASYNC = "sync", "async"


def flow_config(cfg: RunConfig) -> FlowConfig:
    m, f = cfg.model, cfg.flow
    return FlowConfig(horizon=m.horizon, action_dim=sw.ACTION_DIM, state_dim=sw.STATE_DIM, layers=m.layers,
                      model_dim=m.model_dim, heads=m.heads, mlp_ratio=m.mlp_ratio, window=f.window,
                      rope_offset=f.rope_offset, tau_max=f.tau_max, tau_alpha=f.tau_alpha, tau_beta=f.tau_beta,
                      sample_steps=f.sample_steps, reweight_lambda=f.reweight_lambda,
                      reweight_max=f.reweight_max, allow_causal_prefix=cfg.train.post_mask == CAUSAL)


def make_models(cfg: RunConfig) -> tuple[Conditioner, FlowExpert]:
    pairs = sw.RELATIVE_PAIRS if cfg.model.relative_features else ()
    return build_models(sw.OBS_DIM, sw.STATE_DIM, sw.ACTION_DIM, flow_config(cfg), cfg.model.n_candidates,
                        seed=cfg.train.seed, vocab=len(sw.TASKS), difference_pairs=pairs)


def train_config(cfg: RunConfig, stage: str) -> TrainConfig:
    t = cfg.train
    common = dict(stage=stage, weight_decay=t.weight_decay, batch_size=t.batch_size, seed=t.seed,
                  warmup=t.warmup, grad_clip=t.grad_clip, log_every=t.log_every,
                  lr_schedule=t.lr_schedule)
    if stage == CHOICE:
        return TrainConfig(lr=cfg.choice.lr, steps=cfg.choice.steps, score_weight=cfg.choice.score_weight,
                           **common)
    if stage == FLOW:
        return TrainConfig(lr=cfg.flow.lr, steps=cfg.flow.steps, **common)
    return TrainConfig(lr=t.post_lr, steps=t.post_steps, prefix_set=tuple(range(t.prefix_max + 1)),
                       prefix_source=t.prefix_source, mask_kind=t.post_mask,
                       freeze_conditioner=not t.unfreeze_conditioner, **common)


def task_spec(cfg: RunConfig, kind: str | None = None, demo: bool = False) -> sw.TaskSpec:
    task = sw.default_task(kind or cfg.sim.task)
    return dataclasses.replace(task, demo_noise=cfg.sim.demo_noise) if demo else task


def run_stage(stage: str, dataset: sw.Dataset, cfg: RunConfig, cond: Conditioner,
              expert: FlowExpert) -> TrainLog:
    if stage == CHOICE:
        return pretrain_choice(dataset, train_config(cfg, CHOICE), cond)
    if stage == FLOW:
        return pretrain_flow(dataset, train_config(cfg, FLOW), cond, expert)
    return posttrain(dataset, train_config(cfg, stage), cond, expert)


def save_models(path, cond: Conditioner, expert: FlowExpert | None) -> None:
    save_checkpoint(path, bundle(conditioner=cond, expert=expert))


def load_models(path, cfg: RunConfig, need_expert: bool = True) -> tuple[Conditioner, FlowExpert]:
    cond, expert = make_models(cfg)
    tensors = load_checkpoint(path)
    cond.load_state_dict(unbundle(tensors, "conditioner"))
    expert_state = unbundle(tensors, "expert")
    if expert_state:
        expert.load_state_dict(expert_state)
    elif need_expert:
        raise KeyError(f"checkpoint {path} holds no flow expert")
    return cond, expert


def schedule(cfg: RunConfig) -> ScheduleConfig:
    r = cfg.runtime
    return ScheduleConfig(cfg.model.horizon, r.exec_steps, r.prefix_len, r.latency_ticks, r.control_rate_hz,
                          r.jitter)


@dataclass
class RolloutResult:
    trace: RolloutTrace
    world: sw.VecWorld
    records: list

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.world.success))


def records_from(trace: RolloutTrace, world: sw.VecWorld) -> list:
    acts = trace.action_array()
    ids = np.asarray(trace.chunk_id)
    out = []
    for i in range(world.n):
        end = int(trace.done_tick[i])
        jt = int(world.params.jump_tick[i]) if world.jumped[i] else -1
        out.append(sw.EpisodeRecord(acts[:end, i].copy(), bool(world.success[i]), end, ids[:end].copy(), jt))
    return out


def jump_markers(world: sw.VecWorld) -> dict:
    return {i: [(int(world.params.jump_tick[i]), "jump")] for i in range(world.n) if world.jumped[i]}


def rollout(policy, task: sw.TaskSpec, episodes: int, seed: int, sched: ScheduleConfig, mode: str = ASYNC,
            use_prefix: bool = True, max_ticks: int | None = None, latency_seed: int | None = None) -> RolloutResult:
    """Run ``episodes`` lock-stepped episodes of ``task`` under one shared schedule."""
    world = sw.VecWorld(task, episodes, seed, sched.horizon)
    ticks = max_ticks if max_ticks is not None else int(world.params.cap.max()) * 2
    rng = np.random.default_rng(latency_seed) if latency_seed is not None else None
    if mode == SYNC:
        trace = sync_rollout(policy, world, sched, ticks, rng)
    elif mode == ASYNC:
        trace = async_rollout(policy, world, sched, ticks, rng, use_prefix=use_prefix)
    else:
        raise ValueError(f"unknown rollout mode {mode!r}")
    return RolloutResult(trace, world, records_from(trace, world))


def model_policy(cond: Conditioner, expert: FlowExpert, task: sw.TaskSpec, episodes: int, seed: int,
                 mask_kind: str = LAMBDA) -> FlowPolicy:
    return FlowPolicy(cond, expert, np.full(episodes, task.instruction_id), seed=seed, mask_kind=mask_kind)


__all__ = ["ASYNC", "SYNC", "POSTTRAIN_ASYNC", "RolloutResult", "flow_config", "jump_markers", "load_models",
           "make_models", "model_policy", "records_from", "rollout", "run_stage", "save_models", "schedule",
           "task_spec", "train_config"]
