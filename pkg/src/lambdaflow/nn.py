"""Transformer building blocks: token layout, visibility masks, RoPE, attention, adaLN."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import Tensor

CAUSAL = "causal"
LAMBDA = "lambda"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layout / masks / positions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenLayout:
    """Token order: [SINK], state, prefix actions, noisy actions."""

    prefix_len: int = 0
    noisy_len: int = 1
    has_sink: bool = True
    has_state: bool = True

    def __post_init__(self):
        if self.prefix_len < 0 or self.noisy_len < 0:
            raise ConfigError("band lengths must be non-negative")

    @property
    def horizon(self) -> int:
        return self.prefix_len + self.noisy_len

    @property
    def n_lead(self) -> int:
        return int(self.has_sink) + int(self.has_state)

    @property
    def n_tokens(self) -> int:
        return self.n_lead + self.horizon


@dataclass(frozen=True)
class MaskSpec:
    kind: str = CAUSAL
    window: int = 6

    def __post_init__(self):
        if self.kind not in (CAUSAL, LAMBDA):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if self.kind == LAMBDA and self.window < 1:
            raise ConfigError(f"lambda mask needs window >= 1, got {self.window}")


def build_mask(layout: TokenLayout, spec: MaskSpec) -> np.ndarray:
    """Boolean ``[query, key]`` visibility over the self tokens of ``layout``."""
    return kernels.visibility(layout.n_lead, layout.prefix_len, layout.noisy_len, spec.window, spec.kind == LAMBDA)


def mask_to_ascii(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "." for v in row) for row in mask)


def mask_from_ascii(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.strip().splitlines()]
    return np.array([[c == "1" for c in row] for row in rows], dtype=bool)


def rope_indices(layout: TokenLayout, offset: int = 10) -> np.ndarray:
    """sink -> 0, state -> 1, action at chunk step i -> 2+i (+offset if noisy).

    Without a sink or state token the corresponding slot is simply skipped;
    action indices keep their base of 2.
    """
    idx = []
    if layout.has_sink:
        idx.append(0)
    if layout.has_state:
        idx.append(1)
    idx.extend(2 + i for i in range(layout.prefix_len))
    idx.extend(2 + i + offset for i in range(layout.prefix_len, layout.horizon))
    return np.array(idx, dtype=np.int64)


def rope_tables(indices: np.ndarray, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape ``indices.shape + (head_dim // 2,)``."""
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    theta = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    ang = np.asarray(indices, dtype=np.float64)[..., None] * theta
    return np.cos(ang), np.sin(ang)


def apply_rope(vectors: Tensor, indices: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate ``vectors[..., tokens, head_dim]`` by per-token positional angles."""
    if vectors.shape[-1] % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {vectors.shape[-1]}")
    cos, sin = rope_tables(indices, vectors.shape[-1], base)
    return dc.rotate_pairs(vectors, cos, sin)


def attention(q: Tensor, k: Tensor, v: Tensor, visible: np.ndarray, rope=None,
              context: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Scaled dot-product attention over ``[context ∥ self]`` keys.

    q, k, v: ``(..., L, dh)``.  ``visible``: boolean ``(..., L, L)`` for self
    keys, broadcastable against the scores.  Context keys are always visible
    and are not rotated.  ``rope`` is an index array ``(..., L)`` or ``None``.
    """
    dh = q.shape[-1]
    if rope is not None:
        q = apply_rope(q, rope)
        k = apply_rope(k, rope)
    visible = np.asarray(visible, dtype=bool)
    if context is not None and context[0].shape[-2] > 0:
        kc, vc = context
        k = dc.concat([kc, k], axis=-2)
        v = dc.concat([vc, v], axis=-2)
        ones = np.ones(visible.shape[:-1] + (kc.shape[-2],), dtype=bool)
        visible = np.concatenate([ones, visible], axis=-1)
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = dc.bmm(q, dc.transpose(k, axes)) * (1.0 / math.sqrt(dh))
    weights = dc.masked_softmax(scores, visible)
    return dc.bmm(weights, v)


def sinusoid_features(tau, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Interleaved ``[sin, cos]`` features of ``scale * tau``; shape ``tau.shape + (dim,)``."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError("flow time must lie in [0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = (scale * tau)[..., None] * freqs
    out = np.zeros(tau.shape + (dim,))
    out[..., 0:2 * half:2] = np.sin(args)
    out[..., 1:2 * half:2] = np.cos(args)
    return out


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Buffer:
    """Non-trainable array that still travels with ``state_dict``."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape


class Module:
    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, val in vars(self).items():
            if isinstance(val, Buffer):
                yield f"{prefix}{name}", val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in (*self.named_parameters(), *self.named_buffers())}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = {**dict(self.named_parameters()), **dict(self.named_buffers())}
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if strict and (missing or extra):
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = np.ascontiguousarray(arr)

    def jitter_(self, rng: np.random.Generator, std: float = 0.1):
        """Add Gaussian noise to every parameter (breaks zero-init symmetry in tests)."""
        for p in self.parameters():
            p.data = p.data + rng.normal(0.0, std, p.shape)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())



class Standardizer(Module):
    """Per-dimension affine map to zero mean / unit spread, fitted from data."""

    def __init__(self, dim: int):
        self.shift = Buffer(np.zeros(dim))
        self.scale = Buffer(np.ones(dim))

    def fit(self, x: np.ndarray, floor: float = 1e-3) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.shift.shape[0])
        self.shift.data = x.mean(axis=0)
        self.scale.data = np.maximum(x.std(axis=0), floor)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift.data) / self.scale.data

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.scale.data + self.shift.data

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return dc.linear(x, self.weight, self.bias)


class MLP(Module):
    """Two affine maps with a GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(dc.gelu(self.fc1(x)))


class TimestepEmbedder(Module):
    def __init__(self, dim: int, rng: np.random.Generator, scale: float = 1000.0):
        self.dim = dim
        self.scale = scale
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def raw(self, tau) -> np.ndarray:
        return sinusoid_features(tau, self.dim, self.scale)

    def __call__(self, tau) -> Tensor:
        return self.fc2(dc.silu(self.fc1(Tensor(self.raw(tau)))))


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"model_dim {dim} not divisible by head_count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng)

    def split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return dc.transpose(dc.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def merge(self, x: Tensor) -> Tensor:
        b, _, n, _ = x.shape
        return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (b, n, self.dim))

    def __call__(self, x: Tensor, visible, rope=None, context=None, return_kv: bool = False):
        q, k, v = self.split(self.wq(x)), self.split(self.wk(x)), self.split(self.wv(x))
        out = self.wo(self.merge(attention(q, k, v, visible, rope=rope, context=context)))
        return (out, (k, v)) if return_kv else out


def _broadcast_tokens(t: Tensor, n: int) -> Tensor:
    return dc.expand(t, 1, n)


class AdaLNBlock(Module):
    """``y = x + gate(c) * sub(LN(x) * (1 + scale(c)) + shift(c))``, modulation zero-initialised."""

    def __init__(self, dim: int, sublayer, rng: np.random.Generator):
        self.dim = dim
        self.sub = sublayer
        self.modulation = Linear(dim, 3 * dim, rng, zero=True)

    def modulate(self, cond: Tensor):
        mod = self.modulation(dc.silu(cond))
        d = self.dim
        return mod[:, :d], mod[:, d:2 * d], mod[:, 2 * d:]

    def __call__(self, x: Tensor, cond: Tensor, *args, **kwargs) -> Tensor:
        n = x.shape[1]
        shift, scale, gate = self.modulate(cond)
        h = dc.layer_norm(x)
        h = h * _broadcast_tokens(1.0 + scale, n) + _broadcast_tokens(shift, n)
        return x + _broadcast_tokens(gate, n) * self.sub(h, *args, **kwargs)


class _MLPSub(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.mlp = MLP(dim, hidden, dim, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return self.mlp(h)


class DiTBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.attn = AdaLNBlock(dim, SelfAttention(dim, heads, rng), rng)
        self.ff = AdaLNBlock(dim, _MLPSub(dim, mlp_ratio * dim, rng), rng)

    def __call__(self, x: Tensor, cond: Tensor, visible, rope, context) -> Tensor:
        x = self.attn(x, cond, visible, rope, context)
        return self.ff(x, cond)


class EncoderBlock(Module):
    """Pre-LN transformer block; exposes its keys/values for caching."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.attn = SelfAttention(dim, heads, rng)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor, visible):
        a, kv = self.attn(dc.layer_norm(x), visible, return_kv=True)
        x = x + a
        x = x + self.mlp(dc.layer_norm(x))
        return x, kv
