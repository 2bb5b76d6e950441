"""Hot numeric kernels.

Every kernel has a numba loop variant (``*_nb``) and a vectorised numpy variant
(``*_np``). The unsuffixed name dispatches on :data:`lambdaflow._accel.USE_NUMBA`.
Both variants are exported so ``benchmarks/bench_kernels.py`` and the tests can
compare them directly.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# masked softmax over the last axis
# ---------------------------------------------------------------------------


@njit
def _softmax_rows_loop(x, vis, out):
    rows, cols = x.shape
    for r in range(rows):
        m = -np.inf
        for c in range(cols):
            if vis[r, c] and x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            if vis[r, c]:
                e = np.exp(x[r, c] - m)
                out[r, c] = e
                s += e
            else:
                out[r, c] = 0.0
        for c in range(cols):
            out[r, c] /= s
    return out


@njit
def _softmax_bwd_loop(p, g, out):
    rows, cols = p.shape
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            s += g[r, c] * p[r, c]
        for c in range(cols):
            out[r, c] = p[r, c] * (g[r, c] - s)
    return out


def masked_softmax_fwd_nb(x: np.ndarray, vis: np.ndarray) -> np.ndarray:
    vis = np.ascontiguousarray(np.broadcast_to(vis, x.shape))
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    out = np.empty_like(x2)
    _softmax_rows_loop(x2, vis.reshape(-1, x.shape[-1]), out)
    return out.reshape(x.shape)


def masked_softmax_fwd_np(x: np.ndarray, vis: np.ndarray) -> np.ndarray:
    shifted = np.where(vis, x, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd_nb(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    p2 = np.ascontiguousarray(p).reshape(-1, p.shape[-1])
    g2 = np.ascontiguousarray(g).reshape(-1, p.shape[-1])
    out = np.empty_like(p2)
    _softmax_bwd_loop(p2, g2, out)
    return out.reshape(p.shape)


def softmax_bwd_np(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# layer norm (no affine) over the last axis
# ---------------------------------------------------------------------------


@njit
def _layernorm_loop(x, eps, y, inv):
    rows, cols = x.shape
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            var += d * d
        var /= cols
        s = 1.0 / np.sqrt(var + eps)
        inv[r] = s
        for c in range(cols):
            y[r, c] = (x[r, c] - mu) * s


@njit
def _layernorm_bwd_loop(xhat, inv, g, out):
    rows, cols = xhat.shape
    for r in range(rows):
        mg = 0.0
        mgx = 0.0
        for c in range(cols):
            mg += g[r, c]
            mgx += g[r, c] * xhat[r, c]
        mg /= cols
        mgx /= cols
        for c in range(cols):
            out[r, c] = inv[r] * (g[r, c] - mg - xhat[r, c] * mgx)


def layernorm_fwd_nb(x: np.ndarray, eps: float):
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    y = np.empty_like(x2)
    inv = np.empty(x2.shape[0])
    _layernorm_loop(x2, eps, y, inv)
    return y.reshape(x.shape), inv.reshape(x.shape[:-1] + (1,))


def layernorm_fwd_np(x: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    return d * inv, inv


def layernorm_bwd_nb(xhat: np.ndarray, inv: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = xhat.shape[-1]
    xh = np.ascontiguousarray(xhat).reshape(-1, n)
    out = np.empty_like(xh)
    _layernorm_bwd_loop(xh, np.ascontiguousarray(inv).reshape(-1), np.ascontiguousarray(g).reshape(-1, n), out)
    return out.reshape(xhat.shape)


def layernorm_bwd_np(xhat: np.ndarray, inv: np.ndarray, g: np.ndarray) -> np.ndarray:
    return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# tanh-approximated GELU, value and derivative in one pass
# ---------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


@njit
def _gelu_loop(x, y, dy):
    # 0.5 * (1 + tanh(z)) == sigmoid(2z); exp is much cheaper than tanh here
    for i in range(x.shape[0]):
        v = x[i]
        v2 = v * v
        s = 1.0 / (1.0 + np.exp(-2.0 * _GELU_C * v * (1.0 + 0.044715 * v2)))
        y[i] = v * s
        dy[i] = s + 2.0 * v * s * (1.0 - s) * _GELU_C * (1.0 + 3 * 0.044715 * v2)


def gelu_nb(x: np.ndarray):
    flat = np.ascontiguousarray(x).reshape(-1)
    y = np.empty_like(flat)
    dy = np.empty_like(flat)
    _gelu_loop(flat, y, dy)
    return y.reshape(x.shape), dy.reshape(x.shape)


def gelu_np(x: np.ndarray):
    x2 = x * x
    s = 1.0 / (1.0 + np.exp(-2.0 * _GELU_C * x * (1.0 + 0.044715 * x2)))
    y = x * s
    dy = s + 2.0 * x * s * (1.0 - s) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return y, dy


# ---------------------------------------------------------------------------
# attention visibility
# ---------------------------------------------------------------------------


@njit
def _mask_loop(n_lead, prefix_len, noisy_len, window, lam, out):
    # lead tokens: sink/state, chunk timestep -1 (never windowed out)
    n = n_lead + prefix_len + noisy_len
    for q in range(n):
        for k in range(q + 1):
            if not lam or q < n_lead or k < n_lead:
                out[q, k] = True
            else:
                p = q - n_lead
                t = k - n_lead
                out[q, k] = t >= p - window
    return out


def visibility_nb(n_lead: int, prefix_len: int, noisy_len: int, window: int, lam: bool) -> np.ndarray:
    n = n_lead + prefix_len + noisy_len
    out = np.zeros((n, n), dtype=np.bool_)
    return _mask_loop(n_lead, prefix_len, noisy_len, window, lam, out)


def visibility_np(n_lead: int, prefix_len: int, noisy_len: int, window: int, lam: bool) -> np.ndarray:
    n = n_lead + prefix_len + noisy_len
    idx = np.arange(n)
    vis = idx[None, :] <= idx[:, None]
    if lam:
        step = idx - n_lead
        lead = idx < n_lead
        near = step[None, :] >= step[:, None] - window
        vis &= near | lead[None, :] | lead[:, None]
    return vis


# ---------------------------------------------------------------------------
# nearest-timestamp selection
# ---------------------------------------------------------------------------


@njit
def _nearest_loop(stamps, ticks, out):
    j = 0
    n = stamps.shape[0]
    for i in range(ticks.shape[0]):
        t = ticks[i]
        while j + 1 < n and stamps[j + 1] <= t:
            j += 1
        best = j
        if j + 1 < n and stamps[j] <= t:
            # strict: ties go to the earlier stamp
            if stamps[j + 1] - t < t - stamps[j]:
                best = j + 1
        # distances can round equal; the first stamp at the minimum wins
        while best > 0 and abs(t - stamps[best - 1]) <= abs(t - stamps[best]):
            best -= 1
        out[i] = best
    return out


def nearest_indices_nb(stamps: np.ndarray, ticks: np.ndarray) -> np.ndarray:
    out = np.empty(ticks.shape[0], dtype=np.int64)
    return _nearest_loop(np.ascontiguousarray(stamps, dtype=np.float64),
                         np.ascontiguousarray(ticks, dtype=np.float64), out)


def nearest_indices_np(stamps: np.ndarray, ticks: np.ndarray) -> np.ndarray:
    stamps = np.asarray(stamps, dtype=np.float64)
    ticks = np.asarray(ticks, dtype=np.float64)
    right = np.searchsorted(stamps, ticks, side="left")
    right = np.clip(right, 0, len(stamps) - 1)
    left = np.clip(right - 1, 0, len(stamps) - 1)
    take_right = np.abs(stamps[right] - ticks) < np.abs(ticks - stamps[left])
    best = np.where(take_right, right, left).astype(np.int64)
    while True:
        prev = np.maximum(best - 1, 0)
        step = (best > 0) & (np.abs(ticks - stamps[prev]) <= np.abs(ticks - stamps[best]))
        if not step.any():
            return best
        best = np.where(step, prev, best)


if USE_NUMBA:
    masked_softmax_fwd = masked_softmax_fwd_nb
    softmax_bwd = softmax_bwd_nb
    layernorm_fwd = layernorm_fwd_nb
    layernorm_bwd = layernorm_bwd_nb
    gelu = gelu_nb
    visibility = visibility_nb
    nearest_indices = nearest_indices_nb
else:
    masked_softmax_fwd = masked_softmax_fwd_np
    softmax_bwd = softmax_bwd_np
    layernorm_fwd = layernorm_fwd_np
    layernorm_bwd = layernorm_bwd_np
    gelu = gelu_np
    visibility = visibility_np
    nearest_indices = nearest_indices_np
