"""Tick-accurate synchronous / asynchronous chunk execution and sensor resampling.

Time is a logical tick clock.  Inference latency is modelled as a completion
tick: the policy is evaluated at the trigger tick (with the observation of that
tick) and its chunk becomes available ``latency`` ticks later.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import kernels

EXEC, IDLE, TRIGGER, COMPLETE = "exec", "idle", "trigger", "complete"


class ScheduleError(ValueError):
    pass


class StarvationRiskError(ScheduleError):
    pass


class LayoutError(ScheduleError):
    pass


class MissingModalityError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    horizon: int = 30
    exec_steps: int = 10
    prefix_len: int = 5
    latency_ticks: int = 3
    control_rate_hz: int = 30
    # per-inference latency drawn from {latency-1, latency}
    jitter: bool = False


def validate_schedule(cfg: ScheduleConfig, asynchronous: bool = True) -> None:
    """Raise unless the schedule can run without starving the executor."""
    if cfg.exec_steps < 1:
        raise LayoutError("exec_steps must be >= 1")
    if cfg.latency_ticks < 0 or cfg.prefix_len < 0:
        raise LayoutError("latency and prefix length must be non-negative")
    if not asynchronous:
        if cfg.exec_steps > cfg.horizon:
            raise LayoutError(f"exec_steps {cfg.exec_steps} exceeds horizon {cfg.horizon}")
        return
    if cfg.prefix_len < cfg.latency_ticks:
        raise StarvationRiskError(
            f"starvation risk: prefix_len {cfg.prefix_len} < latency_ticks {cfg.latency_ticks}; "
            "the committed prefix must cover the whole inference window")
    if cfg.exec_steps + cfg.prefix_len > cfg.horizon:
        raise LayoutError(f"exec_steps + prefix_len = {cfg.exec_steps + cfg.prefix_len} exceeds horizon {cfg.horizon}")
    if cfg.exec_steps < cfg.latency_ticks:
        raise LayoutError("exec_steps must be >= latency_ticks so each chunk is live before its successor triggers")


class Env(Protocol):
    n: int
    done: np.ndarray

    def observe(self) -> tuple[np.ndarray, np.ndarray]: ...

    def step(self, actions: np.ndarray) -> None: ...

    def hold(self) -> None: ...


# policy(obs (n, D), state (n, S), prefix (n, dtc, A) or None) -> chunks (n, T, A)
Policy = Callable[[np.ndarray, np.ndarray, "np.ndarray | None"], np.ndarray]


@dataclass
class RolloutTrace:
    """Per-tick record shared by all lanes of a vectorised rollout."""

    actions: list = field(default_factory=list)  # per tick: (n, A)
    chunk_id: list = field(default_factory=list)
    chunk_pos: list = field(default_factory=list)
    event: list = field(default_factory=list)
    chunk_start: dict = field(default_factory=dict)  # chunk id -> absolute tick of position 0
    chunks: list = field(default_factory=list)  # chunk id -> (n, T, A)
    prefixes: list = field(default_factory=list)  # chunk id -> prefix passed to its inference
    triggers: list = field(default_factory=list)  # (tick, chunk id)
    completions: list = field(default_factory=list)  # (tick, chunk id)
    faults: list = field(default_factory=list)
    done_tick: np.ndarray | None = None
    success: np.ndarray | None = None
    mode: str = "async"

    @property
    def ticks(self) -> int:
        return len(self.event)

    def action_array(self) -> np.ndarray:
        """``(ticks, n, A)``"""
        return np.stack(self.actions) if self.actions else np.zeros((0, 0, 0))

    def lane(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Executed actions and chunk ids of lane ``i`` up to its finishing tick."""
        end = self.ticks if self.done_tick is None or self.done_tick[i] < 0 else int(self.done_tick[i])
        return self.action_array()[:end, i], np.asarray(self.chunk_id[:end])

    def boundaries(self) -> list[int]:
        """Ticks at which a new chunk's first executed action occurs."""
        out, prev = [], None
        for t, (cid, ev) in enumerate(zip(self.chunk_id, self.event)):
            if ev == EXEC:
                if prev is not None and cid != prev:
                    out.append(t)
                prev = cid
        return out


def _lanes_done(env) -> bool:
    return bool(np.all(env.done))


def _latency(cfg: ScheduleConfig, rng: np.random.Generator | None) -> int:
    if cfg.jitter and rng is not None and cfg.latency_ticks > 0:
        return int(cfg.latency_ticks - rng.integers(0, 2))
    return cfg.latency_ticks


def sync_rollout(policy: Policy, env: Env, cfg: ScheduleConfig, episode_ticks: int,
                 rng: np.random.Generator | None = None) -> RolloutTrace:
    """Execute ``exec_steps`` actions, then idle while the next chunk is inferred."""
    validate_schedule(cfg, asynchronous=False)
    tr = RolloutTrace(mode="sync")
    obs, state = env.observe()
    chunk = np.asarray(policy(obs, state, None))
    cid, t0 = 0, 0
    tr.chunks.append(chunk)
    tr.prefixes.append(None)
    tr.chunk_start[0] = 0
    tick = 0
    while tick < episode_ticks and not _lanes_done(env):
        pos = tick - t0
        if pos < cfg.exec_steps:
            a = chunk[:, pos]
            tr.actions.append(a)
            tr.chunk_id.append(cid)
            tr.chunk_pos.append(pos)
            tr.event.append(EXEC)
            env.step(a)
            tick += 1
            continue
        # trigger on the latest observation, stay idle for the latency
        tr.triggers.append((tick, cid + 1))
        obs, state = env.observe()
        nxt = np.asarray(policy(obs, state, None))
        lat = _latency(cfg, rng)
        for _ in range(lat):
            if tick >= episode_ticks or _lanes_done(env):
                break
            tr.actions.append(np.zeros_like(chunk[:, 0]))
            tr.chunk_id.append(-1)
            tr.chunk_pos.append(-1)
            tr.event.append(IDLE)
            env.hold()
            tick += 1
        cid += 1
        chunk, t0 = nxt, tick
        tr.chunks.append(chunk)
        tr.prefixes.append(None)
        tr.chunk_start[cid] = t0
        tr.completions.append((tick, cid))
    _finish(tr, env)
    return tr


def async_rollout(policy: Policy, env: Env, cfg: ScheduleConfig, episode_ticks: int,
                  rng: np.random.Generator | None = None, use_prefix: bool = True) -> RolloutTrace:
    """Keep executing the current chunk while the next one is being inferred.

    Chunk ``k`` has position 0 at absolute tick ``t0``.  At ``t0 + exec_steps``
    the next inference starts with prefix ``chunk[exec_steps : exec_steps +
    prefix_len]``; its result is aligned so that its position 0 is that trigger
    tick, and it takes over at position ``latency``.  ``use_prefix=False``
    runs the same schedule with unconditioned inference.
    """
    validate_schedule(cfg, asynchronous=True)
    tr = RolloutTrace(mode="async")
    obs, state = env.observe()
    active = np.asarray(policy(obs, state, None))
    cid, t0 = 0, 0
    tr.chunks.append(active)
    tr.prefixes.append(None)
    tr.chunk_start[0] = 0
    pending = None  # (completion tick, chunk, id, start tick)
    tick = 0
    te, dtc = cfg.exec_steps, cfg.prefix_len
    while tick < episode_ticks and not _lanes_done(env):
        if pending is not None and tick == pending[0]:
            _, active, cid, t0 = pending
            pending = None
            tr.completions.append((tick, cid))
        if pending is None and tick == t0 + te:
            prefix = active[:, te:te + dtc].copy() if use_prefix else None
            obs, state = env.observe()
            new = np.asarray(policy(obs, state, prefix))
            new_id = len(tr.chunks)
            tr.chunks.append(new)
            tr.prefixes.append(prefix)
            tr.chunk_start[new_id] = tick
            tr.triggers.append((tick, new_id))
            pending = (tick + _latency(cfg, rng), new, new_id, tick)
            if pending[0] == tick:
                _, active, cid, t0 = pending
                pending = None
                tr.completions.append((tick, cid))
        pos = tick - t0
        if not 0 <= pos < active.shape[1]:
            tr.faults.append(f"starvation at tick {tick}: chunk {cid} has no position {pos}")
            break
        a = active[:, pos]
        tr.actions.append(a)
        tr.chunk_id.append(cid)
        tr.chunk_pos.append(pos)
        tr.event.append(EXEC)
        env.step(a)
        tick += 1
    _finish(tr, env)
    return tr


def _finish(tr: RolloutTrace, env) -> None:
    done_tick = getattr(env, "done_tick", None)
    tr.done_tick = None if done_tick is None else np.where(done_tick < 0, tr.ticks, done_tick)
    succ = getattr(env, "success", None)
    tr.success = None if succ is None else succ.copy()


# ---------------------------------------------------------------------------
# sensor resampling
# ---------------------------------------------------------------------------


@dataclass
class SensorStream:
    timestamps: np.ndarray  # seconds, strictly increasing
    values: np.ndarray  # (len, ...) measurements

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values)
        if self.timestamps.ndim != 1 or len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values must have matching length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")


def tick_times(rate_hz: float, duration: float) -> np.ndarray:
    n = int(np.floor(duration * rate_hz + 1e-9))
    return np.arange(n) / rate_hz


def resample(streams: dict, rate_hz: float = 30.0, duration: float = 1.0) -> list[dict]:
    """One frame per tick ``k / rate_hz``; each modality contributes its nearest sample.

    Ties go to the earlier timestamp.
    """
    ticks = tick_times(rate_hz, duration)
    picks = {}
    for name, s in streams.items():
        if len(s.timestamps) == 0:
            raise MissingModalityError(f"stream {name!r} is empty")
        picks[name] = kernels.nearest_indices(s.timestamps, ticks)
    return [{"t": float(t), **{name: streams[name].values[picks[name][k]] for name in streams}}
            for k, t in enumerate(ticks)]


def resample_indices(streams: dict, rate_hz: float = 30.0, duration: float = 1.0) -> dict:
    ticks = tick_times(rate_hz, duration)
    out = {}
    for name, s in streams.items():
        if len(s.timestamps) == 0:
            raise MissingModalityError(f"stream {name!r} is empty")
        out[name] = kernels.nearest_indices(s.timestamps, ticks)
    return out


# ---------------------------------------------------------------------------
# smoothness statistics
# ---------------------------------------------------------------------------


def boundary_discontinuities(actions: np.ndarray, chunk_ids) -> list[float]:
    """∞-norm jump between the last action of one chunk and the first of the next.

    Idle ticks (chunk id -1) are skipped.
    """
    actions = np.asarray(actions, dtype=np.float64)
    chunk_ids = np.asarray(chunk_ids)
    live = np.nonzero(chunk_ids >= 0)[0]
    if len(live) < 2:
        return []
    ids = chunk_ids[live]
    change = np.nonzero(ids[1:] != ids[:-1])[0]
    a = actions[live]
    return [float(np.max(np.abs(a[i + 1] - a[i]))) for i in change]


def max_jerk(actions: np.ndarray) -> float:
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) < 3:
        return 0.0
    second = actions[2:] - 2 * actions[1:-1] + actions[:-2]
    return float(np.max(np.abs(second)))


@dataclass
class StitchStats:
    discontinuities: list
    mean_discontinuity: float
    max_discontinuity: float
    max_jerk: float


def stitch_metrics(trace: RolloutTrace, lane: int = 0) -> StitchStats:
    acts, ids = trace.lane(lane)
    disc = boundary_discontinuities(acts, ids)
    return StitchStats(disc, float(np.mean(disc)) if disc else 0.0, float(np.max(disc)) if disc else 0.0,
                       max_jerk(acts))


def write_trace_csv(path, trace: RolloutTrace, extra_rows: dict | None = None) -> None:
    """CSV rows ``episode, tick, a0..aK, chunk_id, chunk_pos, event``.

    Each lane is written as one episode up to its finishing tick, with
    ``trigger``/``complete`` marker rows (empty action cells) and a final
    ``success``/``timeout`` row.  ``extra_rows`` maps lane -> list of
    ``(tick, event)`` markers such as target jumps.
    """
    acts = trace.action_array()
    n = acts.shape[1] if acts.size else 0
    a_dim = acts.shape[2] if acts.size else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "tick"] + [f"a{k}" for k in range(a_dim)] + ["chunk_id", "chunk_pos", "event"])
        blank = [""] * a_dim
        for lane in range(n):
            end = trace.ticks if trace.done_tick is None else int(trace.done_tick[lane])
            markers = [(t, TRIGGER, c) for t, c in trace.triggers if t < end]
            markers += [(t, COMPLETE, c) for t, c in trace.completions if t < end]
            markers += [(t, ev, -1) for t, ev in (extra_rows or {}).get(lane, []) if t < end]
            by_tick: dict = {}
            for t, ev, c in markers:
                by_tick.setdefault(t, []).append((ev, c))
            for t in range(end):
                for ev, c in by_tick.get(t, []):
                    w.writerow([lane, t] + blank + [c, "", ev])
                a = acts[t, lane]
                w.writerow([lane, t] + [repr(float(x)) for x in a]
                           + [trace.chunk_id[t], trace.chunk_pos[t], trace.event[t]])
            ok = trace.success is not None and bool(trace.success[lane])
            w.writerow([lane, end] + blank + ["", "", "success" if ok else "timeout"])


def read_trace_csv(path):
    """Inverse of :func:`write_trace_csv`; returns per-episode dicts."""
    episodes: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        a_cols = [i for i, h in enumerate(header) if h.startswith("a") and h[1:].isdigit()]
        for row in r:
            ep = episodes.setdefault(int(row[0]), {"actions": [], "chunk_ids": [], "events": [],
                                                   "success": False, "ticks": 0, "jump_tick": -1})
            ev = row[-1]
            if ev in (EXEC, IDLE):
                ep["actions"].append([float(row[i]) for i in a_cols])
                ep["chunk_ids"].append(int(row[-3]))
            elif ev in ("success", "timeout"):
                ep["success"] = ev == "success"
                ep["ticks"] = int(row[1])
            elif ev == "jump":
                ep["jump_tick"] = int(row[1])
            ep["events"].append((int(row[1]), ev))
    out = []
    for k in sorted(episodes):
        ep = episodes[k]
        ep["actions"] = np.array(ep["actions"]).reshape(-1, len(a_cols))
        ep["chunk_ids"] = np.array(ep["chunk_ids"], dtype=np.int64)
        out.append(ep)
    return out
