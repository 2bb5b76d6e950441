"""Adapter turning a conditioner + flow expert pair into a rollout policy callable."""

from __future__ import annotations

import numpy as np

from .conditioner import Conditioner
from .flow_expert import FlowExpert
from .nn import CAUSAL, LAMBDA


class FlowPolicy:
    """``policy(obs, state, prefix) -> chunks`` with its own sampling stream.

    ``mask_kind`` picks the mask used whenever a prefix is supplied; without a
    prefix the causal mask is always used.
    """

    def __init__(self, conditioner: Conditioner, expert: FlowExpert, instruction_ids, seed: int = 0,
                 mask_kind: str = LAMBDA, steps: int | None = None):
        self.conditioner, self.expert = conditioner, expert
        self.instruction_ids = np.asarray(instruction_ids, dtype=np.int64)
        self.rng = np.random.default_rng(seed)
        self.mask_kind, self.steps = mask_kind, steps
        self.calls = 0

    def __call__(self, obs: np.ndarray, state: np.ndarray, prefix: np.ndarray | None) -> np.ndarray:
        self.calls += 1
        kv = self.conditioner.encode_context((np.asarray(obs, dtype=np.float64), self.instruction_ids))
        if prefix is None or prefix.shape[1] == 0:
            spec = self.expert.cfg.mask(CAUSAL)
            prefix = None
        else:
            spec = self.expert.cfg.mask(self.mask_kind)
        return self.expert.sample_chunk(kv, state, prefix, self.rng, self.steps, spec)
