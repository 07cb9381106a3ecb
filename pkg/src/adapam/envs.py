"""Two desk-scale cooperative multi-agent tasks.

``coop_spread``
    Three agents cover three landmarks on the unit square.  State vector:
    agent positions (x0, y0, x1, y1, x2, y2) then landmark positions, all in
    [0, 1].  Reward: minus the summed distance from each landmark to its
    closest agent, minus 0.5 per agent pair closer than 0.1.

``grid_battle``
    Three controlled units fight three scripted enemies on an 8x8 grid.
    State vector: (x, y, hp, alive) for allies 0-2 then enemies 0-2, with x,
    y in [0, 7], hp in [0, 3], alive in {0, 1}.  Dead units keep their last
    cell in the state but no longer occupy it.

Both environments are pure: ``reset`` consumes the only randomness, and
``step``/``observe`` are deterministic functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError

ENV_NAMES = ("coop_spread", "grid_battle")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    n_agents: int
    obs_dim: int
    action_count: int
    state_dim: int
    horizon: int
    has_win_flag: bool


@dataclass(frozen=True)
class GlobalState:
    vector: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class Observation:
    vector: np.ndarray
    agent: int


@dataclass(frozen=True)
class StepResult:
    next_state: GlobalState
    reward: float
    done: bool
    win: bool | None = None


def _frozen(v):
    v = np.array(v, dtype=np.float64)
    v.flags.writeable = False
    return v


class CoopSpread:
    ACTIONS = ("stay", "+x", "-x", "+y", "-y")
    MOVES = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    STEP_SIZE = 0.05
    COLLISION_DIST = 0.1
    COLLISION_PENALTY = 0.5

    spec = EnvSpec("coop_spread", n_agents=3, obs_dim=12, action_count=5,
                   state_dim=12, horizon=25, has_win_flag=False)

    def reset(self, seed):
        rng = np.random.default_rng(int(seed))
        return GlobalState(_frozen(rng.uniform(0.0, 1.0, size=12)), 0)

    @staticmethod
    def agents(state):
        return state.vector[:6].reshape(3, 2)

    @staticmethod
    def landmarks(state):
        return state.vector[6:].reshape(3, 2)

    def alive(self, state):
        return [True, True, True]

    def observe(self, state, agent):
        if not 0 <= agent < 3:
            raise ArgumentError(f"agent index {agent} out of range")
        pos = self.agents(state)
        own = pos[agent]
        others = [pos[j] - own for j in range(3) if j != agent]
        vec = np.concatenate([2.0 * own - 1.0, (self.landmarks(state) - own).ravel(),
                              np.concatenate(others)])
        return Observation(_frozen(vec), agent)

    def reward_of(self, pos, lms):
        dists = np.linalg.norm(lms[:, None, :] - pos[None, :, :], axis=2)
        cover = float(np.sum(dists.min(axis=1)))
        collisions = 0
        for i in range(3):
            for j in range(i + 1, 3):
                if np.linalg.norm(pos[i] - pos[j]) < self.COLLISION_DIST:
                    collisions += 1
        return -cover - self.COLLISION_PENALTY * collisions

    def step(self, state, joint_action):
        acts = _check_joint(self.spec, joint_action)
        pos = self.agents(state) + self.STEP_SIZE * self.MOVES[acts]
        pos = np.clip(pos, 0.0, 1.0)
        lms = self.landmarks(state)
        reward = self.reward_of(pos, lms)
        t = state.t + 1
        nxt = GlobalState(_frozen(np.concatenate([pos.ravel(), lms.ravel()])), t)
        return StepResult(nxt, reward, t >= self.spec.horizon, None)

    def truncated(self, result):
        """True when an episode ended only because the horizon ran out."""
        return bool(result.done)

    def state_features(self, state):
        return 2.0 * state.vector - 1.0


class GridBattle:
    ACTIONS = ("stay", "up", "down", "left", "right", "attack_nearest")
    MOVES = {1: (0, 1), 2: (0, -1), 3: (-1, 0), 4: (1, 0)}
    SIZE = 8
    MAX_HP = 3
    WIN_BONUS = 10.0

    spec = EnvSpec("grid_battle", n_agents=3, obs_dim=23, action_count=6,
                   state_dim=24, horizon=40, has_win_flag=True)

    def reset(self, seed):
        rng = np.random.default_rng(int(seed))
        units = []
        for cols in ((0, 1), (6, 7)):
            cells = [(x, y) for x in cols for y in range(self.SIZE)]
            pick = rng.choice(len(cells), size=3, replace=False)
            for c in pick:
                x, y = cells[c]
                units.append((x, y, self.MAX_HP, 1))
        return GlobalState(_frozen(np.array(units, dtype=np.float64).ravel()), 0)

    @staticmethod
    def units(state):
        return state.vector.reshape(6, 4)

    def alive(self, state):
        return [bool(state.vector[4 * i + 3] > 0) for i in range(3)]

    def observe(self, state, agent):
        if not 0 <= agent < 3:
            raise ArgumentError(f"agent index {agent} out of range")
        u = self.units(state)
        x, y, hp = u[agent, 0], u[agent, 1], u[agent, 2]
        scale = self.SIZE - 1
        parts = [2.0 * x / scale - 1.0, 2.0 * y / scale - 1.0, hp / self.MAX_HP]
        for j in range(6):
            if j == agent:
                continue
            if u[j, 3] > 0:
                parts += [(u[j, 0] - x) / scale, (u[j, 1] - y) / scale, u[j, 2] / self.MAX_HP, 1.0]
            else:
                parts += [0.0, 0.0, 0.0, 0.0]
        return Observation(_frozen(parts), agent)

    @staticmethod
    def _cheb(a, b):
        return max(abs(a[0] - b[0]), abs(a[1] - b[1]))

    def _nearest(self, u, me, candidates):
        best, best_d = None, None
        for j in candidates:
            if u[j][3] <= 0:
                continue
            d = self._cheb(u[me], u[j])
            if best is None or d < best_d:
                best, best_d = j, d
        return best, best_d

    def _occupied(self, u, x, y):
        return any(v[3] > 0 and v[0] == x and v[1] == y for v in u)

    def _move(self, u, i, dx, dy):
        nx, ny = u[i][0] + dx, u[i][1] + dy
        if 0 <= nx < self.SIZE and 0 <= ny < self.SIZE and not self._occupied(u, nx, ny):
            u[i][0], u[i][1] = nx, ny

    def _hit(self, u, j):
        u[j][2] -= 1
        if u[j][2] <= 0:
            u[j][2] = 0
            u[j][3] = 0

    def step(self, state, joint_action):
        acts = _check_joint(self.spec, joint_action)
        u = [[int(v) for v in row] for row in self.units(state)]
        dealt = received = 0
        allies, enemies = range(3), range(3, 6)
        for i in allies:
            if u[i][3] <= 0:
                continue
            a = int(acts[i])
            if a in self.MOVES:
                self._move(u, i, *self.MOVES[a])
            elif a == 5:
                j, d = self._nearest(u, i, enemies)
                if j is not None and d <= 1:
                    self._hit(u, j)
                    dealt += 1
        for e in enemies:
            if u[e][3] <= 0:
                continue
            j, d = self._nearest(u, e, allies)
            if j is None:
                break
            if d <= 1:
                self._hit(u, j)
                received += 1
            else:
                dx, dy = u[j][0] - u[e][0], u[j][1] - u[e][1]
                if abs(dx) >= abs(dy):
                    self._move(u, e, int(np.sign(dx)), 0)
                else:
                    self._move(u, e, 0, int(np.sign(dy)))
        won = all(u[e][3] <= 0 for e in enemies)
        lost = all(u[i][3] <= 0 for i in allies)
        reward = float(dealt - received)
        if won:
            reward += self.WIN_BONUS
        elif lost:
            reward -= self.WIN_BONUS
        t = state.t + 1
        done = won or lost or t >= self.spec.horizon
        nxt = GlobalState(_frozen(np.array(u, dtype=np.float64).ravel()), t)
        return StepResult(nxt, reward, done, bool(won))

    def truncated(self, result):
        """True when an episode ended only because the horizon ran out."""
        return bool(result.done and not result.win and any(self.alive(result.next_state)))

    def state_features(self, state):
        u = self.units(state)
        scale = self.SIZE - 1
        out = np.empty_like(u)
        out[:, 0] = 2.0 * u[:, 0] / scale - 1.0
        out[:, 1] = 2.0 * u[:, 1] / scale - 1.0
        out[:, 2] = 2.0 * u[:, 2] / self.MAX_HP - 1.0
        out[:, 3] = 2.0 * u[:, 3] - 1.0
        return out.ravel()


def _check_joint(spec, joint_action):
    try:
        acts = [int(a) for a in joint_action]
    except (TypeError, ValueError):
        raise ArgumentError(f"malformed joint action {joint_action!r}") from None
    if len(acts) != spec.n_agents:
        raise ArgumentError(f"joint action has {len(acts)} entries, expected {spec.n_agents}")
    if any(a < 0 or a >= spec.action_count for a in acts):
        raise ArgumentError(f"action index out of range in {acts}")
    return np.array(acts, dtype=np.int64)


_ENVS = {"coop_spread": CoopSpread, "grid_battle": GridBattle}


def make_env(name):
    try:
        return _ENVS[name]()
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {ENV_NAMES}") from None


def reset(env_name, seed):
    return make_env(env_name).reset(seed)


def episode_seed(seed, episode):
    """Reset seed for episode ``episode`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1)[0])
