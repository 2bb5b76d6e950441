"""Deterministic 2-D point-agent tasks, scripted experts and evaluation metrics.

Two tasks share one observation layout ``[pos(2), goal(2), obstacle centre(2),
obstacle radius]``; the proprioceptive state is the agent position.

* ``fork_reach``: reach a goal past a disc obstacle; the expert goes round it
  either above or below (the mode is hidden from the observation).
* ``moving_target``: walk to a goal that jumps once, at a random tick; the
  episode only succeeds at the post-jump goal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import USE_NUMBA, njit

RATE_HZ = 30
DT = 1.0 / RATE_HZ
V_MAX = 1.0
ARENA = 1.0
OBS_DIM = 7
STATE_DIM = 2
ACTION_DIM = 2

FORK_REACH = "fork_reach"
MOVING_TARGET = "moving_target"
TASKS = (FORK_REACH, MOVING_TARGET)
INSTRUCTION_IDS = {FORK_REACH: 0, MOVING_TARGET: 1}

UP, DOWN = 1, -1

# observation columns: 0-1 agent, 2-3 goal, 4-5 obstacle centre, 6 obstacle radius
RELATIVE_PAIRS = ((2, 0), (3, 1), (4, 0), (5, 1))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = FORK_REACH
    success_radius: float = 0.05
    episode_cap: int = 240
    expert_speed: float = 0.5
    obstacle_radius: float = 0.2
    arc_height: float = 0.4
    start_jitter: float = 0.1
    # moving_target: jump tick uniform in [jump_min, jump_max], new goal at
    # jump_distance (uniform range) from the agent, rotated by jump_angle_deg
    jump_min: int = 30
    jump_max: int = 90
    jump_distance: tuple = (0.5, 0.8)
    jump_angle_deg: tuple = (60.0, 120.0)
    reroute_budget: int = 90
    # demonstrations execute expert + AR(1) noise but record the clean expert
    # action, so the data covers states slightly off the expert's path
    demo_noise: float = 0.0
    demo_noise_corr: float = 0.9

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")
        if self.success_radius <= 0:
            raise ValueError("success radius must be positive")

    @property
    def instruction_id(self) -> int:
        return INSTRUCTION_IDS[self.kind]


def default_task(kind: str) -> TaskSpec:
    if kind == MOVING_TARGET:
        return TaskSpec(kind=MOVING_TARGET, expert_speed=0.4, obstacle_radius=0.0, episode_cap=90 + 90)
    return TaskSpec(kind=FORK_REACH)


# ---------------------------------------------------------------------------
# scalar physics / expert (numba-compatible)
# ---------------------------------------------------------------------------


@njit
def _advance(px, py, ax, ay, ox, oy, orad):
    ax = min(max(ax, -V_MAX), V_MAX)
    ay = min(max(ay, -V_MAX), V_MAX)
    nx = px + ax * DT
    ny = py + ay * DT
    dx = nx - ox
    dy = ny - oy
    dist = math.sqrt(dx * dx + dy * dy)
    if dist < orad:
        if dist > 0.0:
            nx = ox + dx / dist * orad
            ny = oy + dy / dist * orad
        else:
            nx = px
            ny = py
    nx = min(max(nx, -ARENA), ARENA)
    ny = min(max(ny, -ARENA), ARENA)
    return nx, ny


@njit
def _aim(px, py, gx, gy, speed):
    dx = gx - px
    dy = gy - py
    d = math.sqrt(dx * dx + dy * dy)
    if d == 0.0:
        return 0.0, 0.0
    s = min(speed, d / DT)
    return dx / d * s, dy / d * s


@njit
def _fork_expert(px, py, gx, gy, cx, cy, rad, sign, speed):
    dx = gx - px
    dy = gy - py
    if math.sqrt(dx * dx + dy * dy) < 0.15:
        return _aim(px, py, gx, gy, speed)
    rx = px - cx
    ry = py - cy
    rn = math.sqrt(rx * rx + ry * ry)
    ux = rx / rn
    uy = ry / rn
    vx = sign * uy * speed + 2.0 * (rad - rn) * ux
    vy = -sign * ux * speed + 2.0 * (rad - rn) * uy
    vn = math.sqrt(vx * vx + vy * vy)
    return vx / vn * speed, vy / vn * speed


def fork_arc(start: np.ndarray, goal: np.ndarray, mode: int, height: float):
    """Circle through start, goal and an apex ``height`` off the chord midpoint.

    Returns ``(centre, radius, sign)``; ``sign`` orients the tangent toward the goal.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    chord = goal - start
    c = 0.5 * math.hypot(chord[0], chord[1])
    d = chord / (2 * c)
    normal = np.array([-d[1], d[0]]) * mode
    rad = (c * c + height * height) / (2 * height)
    centre = 0.5 * (start + goal) + normal * (height - rad)
    return centre, rad, float(mode)


# ---------------------------------------------------------------------------
# episode parameters
# ---------------------------------------------------------------------------


@dataclass
class EpisodeParams:
    """Everything random about a batch of episodes, drawn once at reset."""

    start: np.ndarray  # (n, 2)
    goal: np.ndarray  # (n, 2)
    obstacle: np.ndarray  # (n, 3): cx, cy, r
    mode: np.ndarray  # (n,) +-1, fork only
    arc: np.ndarray  # (n, 4): cx, cy, rad, sign
    jump_tick: np.ndarray  # (n,) int, -1 when none
    jump_angle: np.ndarray  # (n,) radians, signed
    jump_dist: np.ndarray  # (n,)
    cap: np.ndarray  # (n,) int
    noise: np.ndarray | None = None  # (n, max cap, 2) execution perturbation for demonstrations


def ar1_noise(rng: np.random.Generator, n: int, length: int, sigma: float, rho: float) -> np.ndarray:
    """Stationary AR(1) sequences with marginal std ``sigma``, shape ``(n, length, 2)``."""
    out = np.zeros((n, length, ACTION_DIM))
    if length == 0 or sigma == 0.0:
        return out
    xi = rng.standard_normal((n, length, ACTION_DIM)) * sigma
    out[:, 0] = xi[:, 0]
    k = math.sqrt(1.0 - rho * rho)
    for t in range(1, length):
        out[:, t] = rho * out[:, t - 1] + k * xi[:, t]
    return out


def draw_episodes(task: TaskSpec, n: int, rng: np.random.Generator, horizon: int = 30,
                  modes: np.ndarray | None = None) -> EpisodeParams:
    if task.kind == FORK_REACH:
        j = task.start_jitter
        start = np.column_stack([rng.uniform(-0.8 - j, -0.8 + j, n), rng.uniform(-j, j, n)])
        goal = np.column_stack([rng.uniform(0.8 - j, 0.8 + j, n), rng.uniform(-j, j, n)])
        mode = np.where(rng.random(n) < 0.5, UP, DOWN) if modes is None else np.asarray(modes)
        arc = np.zeros((n, 4))
        for i in range(n):
            centre, rad, sign = fork_arc(start[i], goal[i], int(mode[i]), task.arc_height)
            arc[i] = centre[0], centre[1], rad, sign
        obstacle = np.tile([0.0, 0.0, task.obstacle_radius], (n, 1))
        jump_tick = np.full(n, -1)
        angle = np.zeros(n)
        dist = np.zeros(n)
        cap = np.full(n, task.episode_cap)
    else:
        start = rng.uniform(-0.8, 0.8, (n, 2))
        heading = rng.uniform(-np.pi, np.pi, n)
        reach = rng.uniform(0.6, 1.2, n)
        goal = np.clip(start + reach[:, None] * np.column_stack([np.cos(heading), np.sin(heading)]), -0.9, 0.9)
        mode = np.zeros(n, dtype=np.int64)
        arc = np.zeros((n, 4))
        obstacle = np.tile([0.0, 0.0, task.obstacle_radius], (n, 1))
        lo, hi = task.jump_min, task.jump_max
        jump_tick = rng.integers(lo, hi + 1, n)
        angle = np.radians(rng.uniform(*task.jump_angle_deg, n)) * np.where(rng.random(n) < 0.5, 1.0, -1.0)
        dist = rng.uniform(*task.jump_distance, n)
        cap = jump_tick + task.reroute_budget
    noise = ar1_noise(rng, n, int(cap.max()), task.demo_noise, task.demo_noise_corr) \
        if task.demo_noise > 0 else np.zeros((n, int(cap.max()), ACTION_DIM))
    return EpisodeParams(start, goal, obstacle, mode.astype(np.int64), arc, jump_tick.astype(np.int64),
                         angle, dist, cap.astype(np.int64), noise)


@njit
def _jump_goal(px, py, gx, gy, angle, dist):
    dx = gx - px
    dy = gy - py
    d = math.sqrt(dx * dx + dy * dy)
    if d < 1e-9:
        dx, dy, d = 1.0, 0.0, 1.0
    ux = dx / d
    uy = dy / d
    nx, ny = px, py
    for attempt in range(2):
        a = angle if attempt == 0 else -angle
        c = math.cos(a)
        s = math.sin(a)
        nx = px + dist * (c * ux - s * uy)
        ny = py + dist * (s * ux + c * uy)
        if -0.95 <= nx <= 0.95 and -0.95 <= ny <= 0.95:
            return nx, ny
    return min(max(nx, -0.95), 0.95), min(max(ny, -0.95), 0.95)


# ---------------------------------------------------------------------------
# world state (single episode) + functional step
# ---------------------------------------------------------------------------


@dataclass
class WorldState:
    pos: np.ndarray
    goal: np.ndarray
    obstacle_center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    obstacle_radius: float = 0.2
    tick: int = 0
    task: str = FORK_REACH
    success_radius: float = 0.05
    cap: int = 240
    jump_tick: int = -1
    jump_angle: float = 0.0
    jump_dist: float = 0.0
    jumped: bool = False
    arc: tuple = (0.0, 0.0, 1.0, 1.0)

    def observation(self) -> np.ndarray:
        return np.concatenate([self.pos, self.goal, self.obstacle_center, [self.obstacle_radius]])

    def reached(self) -> bool:
        if self.task == MOVING_TARGET and not self.jumped:
            return False
        return float(np.hypot(*(self.pos - self.goal))) <= self.success_radius


def make_world(task: TaskSpec, params: EpisodeParams, i: int = 0) -> WorldState:
    w = WorldState(pos=params.start[i].copy(), goal=params.goal[i].copy(),
                   obstacle_center=params.obstacle[i, :2].copy(), obstacle_radius=float(params.obstacle[i, 2]),
                   task=task.kind, success_radius=task.success_radius, cap=int(params.cap[i]),
                   jump_tick=int(params.jump_tick[i]), jump_angle=float(params.jump_angle[i]),
                   jump_dist=float(params.jump_dist[i]), arc=tuple(params.arc[i]))
    _maybe_jump(w)
    return w


def _maybe_jump(w: WorldState):
    if w.task == MOVING_TARGET and not w.jumped and w.tick >= w.jump_tick >= 0:
        w.goal = np.array(_jump_goal(w.pos[0], w.pos[1], w.goal[0], w.goal[1], w.jump_angle, w.jump_dist))
        w.jumped = True


def step(state: WorldState, action) -> tuple[WorldState, bool]:
    """Advance one control tick; returns ``(new_state, done)``."""
    if state.reached():
        return state, True
    a = np.asarray(action, dtype=np.float64)
    nx, ny = _advance(state.pos[0], state.pos[1], a[0], a[1], state.obstacle_center[0],
                      state.obstacle_center[1], state.obstacle_radius)
    new = WorldState(**{**state.__dict__, "pos": np.array([nx, ny]), "tick": state.tick + 1,
                        "goal": state.goal.copy()})
    _maybe_jump(new)
    return new, new.reached() or new.tick >= new.cap


def expert_action(state: WorldState, mode: int | None = None, speed: float = 0.5) -> np.ndarray:
    """Scripted expert: arc round the obstacle (fork) or re-aim at the goal (moving)."""
    if state.task == FORK_REACH:
        cx, cy, rad, sign = state.arc
        if mode is not None and np.sign(sign) != mode:
            raise ValueError("mode disagrees with the episode's arc")
        return np.array(_fork_expert(state.pos[0], state.pos[1], state.goal[0], state.goal[1],
                                     cx, cy, rad, sign, speed))
    return np.array(_aim(state.pos[0], state.pos[1], state.goal[0], state.goal[1], speed))


# ---------------------------------------------------------------------------
# batched expert simulation (dataset generation)
# ---------------------------------------------------------------------------


@njit
def _simulate_expert_loop(is_fork, speed, radius, start, goal, obstacle, arc, jump_tick, jump_angle,
                          jump_dist, cap, noise, obs, acts, lengths, success):
    n = start.shape[0]
    for i in range(n):
        px, py = start[i, 0], start[i, 1]
        gx, gy = goal[i, 0], goal[i, 1]
        ox, oy, orad = obstacle[i, 0], obstacle[i, 1], obstacle[i, 2]
        jumped = False
        if not is_fork and jump_tick[i] == 0:
            gx, gy = _jump_goal(px, py, gx, gy, jump_angle[i], jump_dist[i])
            jumped = True
        t = 0
        done = False
        while t < cap[i] and not done:
            if is_fork:
                ax, ay = _fork_expert(px, py, gx, gy, arc[i, 0], arc[i, 1], arc[i, 2], arc[i, 3], speed)
            else:
                ax, ay = _aim(px, py, gx, gy, speed)
            obs[i, t, 0] = px
            obs[i, t, 1] = py
            obs[i, t, 2] = gx
            obs[i, t, 3] = gy
            obs[i, t, 4] = ox
            obs[i, t, 5] = oy
            obs[i, t, 6] = orad
            acts[i, t, 0] = ax
            acts[i, t, 1] = ay
            px, py = _advance(px, py, ax + noise[i, t, 0], ay + noise[i, t, 1], ox, oy, orad)
            t += 1
            if not is_fork and not jumped and t >= jump_tick[i]:
                gx, gy = _jump_goal(px, py, gx, gy, jump_angle[i], jump_dist[i])
                jumped = True
            dx = px - gx
            dy = py - gy
            if (is_fork or jumped) and math.sqrt(dx * dx + dy * dy) <= radius:
                done = True
                success[i] = True
        lengths[i] = t


def _simulate_expert_numpy(is_fork, speed, radius, p: EpisodeParams, obs, acts, lengths, success):
    """Lock-step vectorised variant of :func:`_simulate_expert_loop`."""
    n = p.start.shape[0]
    pos = p.start.copy()
    goal = p.goal.copy()
    active = np.ones(n, dtype=bool)
    jumped = np.zeros(n, dtype=bool)
    if not is_fork:
        _jump_lanes(pos, goal, p, jumped, p.jump_tick == 0)
    t = 0
    while active.any():
        idx = np.nonzero(active)[0]
        a = _expert_batch(is_fork, speed, pos[idx], goal[idx], p.arc[idx])
        obs[idx, t, 0:2] = pos[idx]
        obs[idx, t, 2:4] = goal[idx]
        obs[idx, t, 4:7] = p.obstacle[idx]
        acts[idx, t] = a
        pos[idx] = _advance_batch(pos[idx], a + p.noise[idx, t], p.obstacle[idx])
        t += 1
        if not is_fork:
            _jump_lanes(pos, goal, p, jumped, active & ~jumped & (t >= p.jump_tick))
        dist = np.sqrt(((pos - goal) ** 2).sum(axis=1))
        hit = active & (is_fork | jumped) & (dist <= radius)
        success |= hit
        lengths[active] = t
        active &= ~hit & (t < p.cap)


def _jump_lanes(pos, goal, p, jumped, which):
    for i in np.nonzero(which)[0]:
        goal[i] = _jump_goal(pos[i, 0], pos[i, 1], goal[i, 0], goal[i, 1], p.jump_angle[i], p.jump_dist[i])
        jumped[i] = True


def _advance_batch(pos, a, obstacle):
    a = np.clip(a, -V_MAX, V_MAX)
    new = pos + a * DT
    d = new - obstacle[:, :2]
    dist = np.sqrt((d * d).sum(axis=1))
    inside = dist < obstacle[:, 2]
    if inside.any():
        safe = np.where(dist > 0, dist, 1.0)
        proj = obstacle[:, :2] + d / safe[:, None] * obstacle[:, 2:3]
        proj = np.where((dist > 0)[:, None], proj, pos)
        new = np.where(inside[:, None], proj, new)
    return np.clip(new, -ARENA, ARENA)


def _expert_batch(is_fork, speed, pos, goal, arc):
    g = goal - pos
    dg = np.sqrt((g * g).sum(axis=1))
    s = np.minimum(speed, dg / DT)
    with np.errstate(invalid="ignore", divide="ignore"):
        aim = np.where(dg[:, None] > 0, g / dg[:, None] * s[:, None], 0.0)
    if not is_fork:
        return aim
    r = pos - arc[:, :2]
    rn = np.sqrt((r * r).sum(axis=1))
    u = r / rn[:, None]
    sign = arc[:, 3]
    corr = 2.0 * (arc[:, 2] - rn)
    v = np.column_stack([sign * u[:, 1] * speed + corr * u[:, 0], -sign * u[:, 0] * speed + corr * u[:, 1]])
    vn = np.sqrt((v * v).sum(axis=1))
    v = v / vn[:, None] * speed
    return np.where((dg < 0.15)[:, None], aim, v)


def simulate_expert(task: TaskSpec, params: EpisodeParams, use_numba: bool | None = None):
    """Roll the expert on every episode; returns ``(obs, actions, lengths, success)``.

    ``obs``/``actions`` are zero-padded to the longest cap.
    """
    use_numba = USE_NUMBA if use_numba is None else use_numba
    n = params.start.shape[0]
    tmax = int(params.cap.max())
    obs = np.zeros((n, tmax, OBS_DIM))
    acts = np.zeros((n, tmax, ACTION_DIM))
    lengths = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    is_fork = task.kind == FORK_REACH
    if params.noise is None:
        params.noise = np.zeros((n, tmax, ACTION_DIM))
    if use_numba:
        _simulate_expert_loop(is_fork, task.expert_speed, task.success_radius, params.start, params.goal,
                              params.obstacle, params.arc, params.jump_tick, params.jump_angle,
                              params.jump_dist, params.cap, params.noise, obs, acts, lengths, success)
    else:
        _simulate_expert_numpy(is_fork, task.expert_speed, task.success_radius, params, obs, acts, lengths,
                               success)
    return obs, acts, lengths, success


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    observations: np.ndarray  # (L, OBS_DIM)
    states: np.ndarray  # (L, STATE_DIM)
    actions: np.ndarray  # (L, ACTION_DIM)
    instruction_id: int


@dataclass
class Dataset:
    episodes: list
    obs_dim: int = OBS_DIM
    state_dim: int = STATE_DIM
    action_dim: int = ACTION_DIM
    rate_hz: int = RATE_HZ

    def __len__(self):
        return len(self.episodes)

    @property
    def total_steps(self) -> int:
        return sum(len(e.actions) for e in self.episodes)


def generate_episodes(task: TaskSpec, episodes: int, seed: int, horizon: int = 30):
    """Expert dataset plus the drawn episode parameters (modes etc.)."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(seed)
    params = draw_episodes(task, episodes, rng, horizon)
    obs, acts, lengths, _ = simulate_expert(task, params)
    eps = [Episode(obs[i, :lengths[i]].copy(), obs[i, :lengths[i], :2].copy(), acts[i, :lengths[i]].copy(),
                   task.instruction_id) for i in range(episodes)]
    return Dataset(eps), params


def generate_dataset(task: TaskSpec, episodes: int, seed: int, path=None, horizon: int = 30) -> Dataset:
    """Generate expert demonstrations; write them to ``path`` when given."""
    ds, _ = generate_episodes(task, episodes, seed, horizon)
    if path is not None:
        from .storage import write_dataset
        write_dataset(path, ds)
    return ds


# ---------------------------------------------------------------------------
# vectorised environment for rollouts
# ---------------------------------------------------------------------------


class VecWorld:
    """``n`` independent episodes advanced in lock-step by the rollout runtime."""

    def __init__(self, task: TaskSpec, n: int, seed: int, horizon: int = 30,
                 params: EpisodeParams | None = None):
        self.task = task
        self.n = n
        self.params = params if params is not None else draw_episodes(task, n, np.random.default_rng(seed), horizon)
        self.reset()

    def reset(self):
        p = self.params
        self.tick = 0
        self.pos = p.start.copy()
        self.goal = p.goal.copy()
        self.jumped = np.zeros(self.n, dtype=bool)
        self.done = np.zeros(self.n, dtype=bool)
        self.success = np.zeros(self.n, dtype=bool)
        self.done_tick = np.full(self.n, -1, dtype=np.int64)
        self.path = [self.pos.copy()]
        self._jumps()

    @property
    def instruction_ids(self) -> np.ndarray:
        return np.full(self.n, self.task.instruction_id, dtype=np.int64)

    def observe(self):
        obs = np.concatenate([self.pos, self.goal, self.params.obstacle], axis=1)
        return obs, self.pos.copy()

    def _jumps(self):
        if self.task.kind != MOVING_TARGET:
            return
        p = self.params
        which = ~self.jumped & (self.tick >= p.jump_tick) & ~self.done
        _jump_lanes(self.pos, self.goal, p, self.jumped, which)

    def _finish_tick(self):
        self.tick += 1
        self._jumps()
        dist = np.sqrt(((self.pos - self.goal) ** 2).sum(axis=1))
        eligible = self.jumped if self.task.kind == MOVING_TARGET else np.ones(self.n, dtype=bool)
        hit = ~self.done & eligible & (dist <= self.task.success_radius)
        self.success |= hit
        ended = ~self.done & (hit | (self.tick >= self.params.cap))
        self.done_tick[ended] = self.tick
        self.done |= ended
        self.path.append(self.pos.copy())

    def step(self, actions: np.ndarray):
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n, ACTION_DIM)
        live = ~self.done
        if live.any():
            self.pos[live] = _advance_batch(self.pos[live], actions[live], self.params.obstacle[live])
        self._finish_tick()

    def hold(self):
        self._finish_tick()

    def expert(self) -> np.ndarray:
        return _expert_batch(self.task.kind == FORK_REACH, self.task.expert_speed, self.pos, self.goal,
                             self.params.arc)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    """One evaluated episode: executed per-tick actions plus outcome."""

    actions: np.ndarray  # (ticks, A), idle ticks hold zeros
    success: bool
    ticks: int
    chunk_ids: np.ndarray | None = None
    jump_tick: int = -1


@dataclass
class MetricsReport:
    success_rate: float
    throughput: float
    mean_boundary_discontinuity: float
    max_boundary_discontinuity: float
    max_jerk: float
    reactivity_latency: float
    episodes: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _heading_change_latency(actions: np.ndarray, jump_tick: int, threshold_deg: float = 30.0) -> float:
    if jump_tick < 0 or jump_tick >= len(actions):
        return float("nan")
    before = actions[:jump_tick]
    moving = np.nonzero(np.linalg.norm(before, axis=1) > 1e-6)[0]
    after = actions[jump_tick:]
    if len(moving) == 0:
        hits = np.nonzero(np.linalg.norm(after, axis=1) > 1e-6)[0]
        return float(hits[0]) if len(hits) else float("nan")
    ref = before[moving[-1]]
    ref = ref / np.linalg.norm(ref)
    cos_thr = math.cos(math.radians(threshold_deg))
    for k, a in enumerate(after):
        n = np.linalg.norm(a)
        if n > 1e-6 and float(a @ ref) / n < cos_thr:
            return float(k)
    return float("nan")


def lateral_offsets(chunks: np.ndarray, start: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Signed distance of each chunk's open-loop end point from the start-goal line.

    ``chunks`` is (n, H, 2) velocities executed from ``start`` (n, 2); positive
    offsets lie to the left of the direction of travel. On fork-reach the two
    modes land on opposite sides and the obstacle centre sits near zero.
    """
    end = start + chunks.sum(axis=1) * DT
    d = goal - start
    normal = np.column_stack([-d[:, 1], d[:, 0]]) / np.linalg.norm(d, axis=1, keepdims=True)
    return ((end - start) * normal).sum(axis=1)


def evaluate(records: list, task: TaskSpec | None = None, rate_hz: int = RATE_HZ) -> MetricsReport:
    """Aggregate episode records into a :class:`MetricsReport`.

    Throughput is successes per simulated minute of total rollout time.
    """
    from .runtime import boundary_discontinuities, max_jerk

    if not records:
        raise ValueError("no episodes to evaluate")
    succ = sum(bool(r.success) for r in records)
    minutes = sum(r.ticks for r in records) / rate_hz / 60.0
    jumps, disc = [], []
    jerk = 0.0
    for r in records:
        if r.chunk_ids is not None:
            disc.extend(boundary_discontinuities(r.actions, r.chunk_ids))
        jerk = max(jerk, max_jerk(r.actions))
        if r.jump_tick >= 0:
            jumps.append(_heading_change_latency(r.actions, r.jump_tick))
    jumps = [j for j in jumps if not math.isnan(j)]
    return MetricsReport(
        success_rate=succ / len(records),
        throughput=succ / minutes if minutes > 0 else 0.0,
        mean_boundary_discontinuity=float(np.mean(disc)) if disc else 0.0,
        max_boundary_discontinuity=float(np.max(disc)) if disc else 0.0,
        max_jerk=float(jerk),
        reactivity_latency=float(np.mean(jumps)) if jumps else float("nan"),
        episodes=len(records),
    )
