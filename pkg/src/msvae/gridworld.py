"""Single-room instruction-following gridworld: procedural task sampling,
template instruction grammar, deterministic dynamics, an oracle bot that
plans BFS-shortest paths in (position, facing) space, and success checking.

Worlds are immutable values; step() returns a new world. Observations are
flat one-hot grids that decode back to the exact world state.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

KINDS = ("ball", "box", "key")
COLORS = ("red", "green", "blue", "yellow", "purple", "grey")

# (dx, dy) indexed by facing: up, right, down, left
DIR_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))

DEFAULT_SIZE = 7

# weights over subgoal counts 1..4, tuned so rendered instructions average
# near 10 tokens and oracle trajectories land near the 9-12 step band
SUBGOAL_WEIGHTS = (0.55, 0.25, 0.12, 0.08)

CONNECTORS = ("then", "and_then", "after_you")
_CONNECTOR_TOKENS = {"then": ("then",), "and_then": ("and", "then"), "after_you": ("after", "you")}


class Action(IntEnum):
    left = 0
    right = 1
    forward = 2
    pickup = 3
    drop = 4
    done = 5


N_ACTIONS = len(Action)


class UnsolvableTask(ValueError):
    """Raised when no action sequence can satisfy a task."""


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    color: str

    def words(self) -> tuple[str, str]:
        return (self.color, self.kind)


@dataclass(frozen=True)
class Subgoal:
    verb: str  # "goto" | "pickup"
    spec: ObjectSpec


@dataclass(frozen=True)
class Task:
    subgoals: tuple[Subgoal, ...]
    connectors: tuple[str, ...]  # len(subgoals) - 1, from CONNECTORS


@dataclass(frozen=True)
class World:
    width: int
    height: int
    objects: tuple[tuple[tuple[int, int], ObjectSpec], ...]
    agent_pos: tuple[int, int]
    agent_dir: int
    carried: ObjectSpec | None = None

    def __post_init__(self):
        # canonical object order: equality and observation round-trips are
        # insensitive to placement history
        ordered = tuple(sorted(self.objects, key=lambda item: item[0]))
        object.__setattr__(self, "objects", ordered)

    def object_at(self, pos) -> ObjectSpec | None:
        for p, spec in self.objects:
            if p == pos:
                return spec
        return None

    def find_object(self, spec: ObjectSpec) -> tuple[int, int] | None:
        for p, s in self.objects:
            if s == spec:
                return p
        return None

    def in_bounds(self, pos) -> bool:
        return 0 <= pos[0] < self.width and 0 <= pos[1] < self.height

    def facing_cell(self) -> tuple[int, int]:
        dx, dy = DIR_VECTORS[self.agent_dir]
        return (self.agent_pos[0] + dx, self.agent_pos[1] + dy)


@dataclass(frozen=True)
class Trajectory:
    """Aligned observation/action sequences; observations[t] precedes actions[t]."""

    observations: np.ndarray  # (T, obs_dim)
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.observations) != len(self.actions):
            raise ValueError(f"trajectory lengths differ: {len(self.observations)} obs vs {len(self.actions)} actions")

    def __len__(self) -> int:
        return len(self.actions)


# ---------------------------------------------------------------------------
# dynamics


def step(world: World, action: int) -> tuple[World, bool]:
    """Deterministic, total transition; invalid actions are no-ops."""
    action = Action(action)
    if action == Action.left:
        return replace(world, agent_dir=(world.agent_dir - 1) % 4), False
    if action == Action.right:
        return replace(world, agent_dir=(world.agent_dir + 1) % 4), False
    if action == Action.forward:
        target = world.facing_cell()
        if world.in_bounds(target) and world.object_at(target) is None:
            return replace(world, agent_pos=target), False
        return world, False
    if action == Action.pickup:
        target = world.facing_cell()
        spec = world.object_at(target) if world.in_bounds(target) else None
        if spec is not None and world.carried is None:
            objects = tuple((p, s) for p, s in world.objects if p != target)
            return replace(world, objects=objects, carried=spec), False
        return world, False
    if action == Action.drop:
        target = world.facing_cell()
        if world.carried is not None and world.in_bounds(target) and world.object_at(target) is None:
            objects = world.objects + ((target, world.carried),)
            return replace(world, objects=objects, carried=None), False
        return world, False
    return world, True  # done


def step_cap(oracle_length: int) -> int:
    """Evaluation step budget: 4x the oracle, floor of 32."""
    return max(32, 4 * oracle_length)


# ---------------------------------------------------------------------------
# observations

OBS_CHANNELS = len(KINDS) + len(COLORS) + 1 + 4 + len(KINDS) + len(COLORS)  # 23


def obs_dim(width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE) -> int:
    return width * height * OBS_CHANNELS


def observe(world: World) -> np.ndarray:
    """Full-grid symbolic observation, flattened float64 one-hots."""
    nk, nc = len(KINDS), len(COLORS)
    grid = np.zeros((world.height, world.width, OBS_CHANNELS))
    for (x, y), spec in world.objects:
        grid[y, x, KINDS.index(spec.kind)] = 1.0
        grid[y, x, nk + COLORS.index(spec.color)] = 1.0
    ax, ay = world.agent_pos
    grid[ay, ax, nk + nc] = 1.0
    grid[ay, ax, nk + nc + 1 + world.agent_dir] = 1.0
    if world.carried is not None:
        base = nk + nc + 5
        grid[ay, ax, base + KINDS.index(world.carried.kind)] = 1.0
        grid[ay, ax, base + nk + COLORS.index(world.carried.color)] = 1.0
    return grid.reshape(-1)


def decode_observation(obs: np.ndarray, width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE) -> World:
    """Inverse of observe(); exact for any encoded world."""
    nk, nc = len(KINDS), len(COLORS)
    grid = np.asarray(obs).reshape(height, width, OBS_CHANNELS)
    agent_cells = np.argwhere(grid[:, :, nk + nc] == 1.0)
    if len(agent_cells) != 1:
        raise ValueError(f"observation holds {len(agent_cells)} agent cells, expected exactly 1")
    ay, ax = agent_cells[0]
    agent_dir = int(np.argmax(grid[ay, ax, nk + nc + 1 : nk + nc + 5]))
    objects = []
    for y in range(height):
        for x in range(width):
            if grid[y, x, :nk].any():
                kind = KINDS[int(np.argmax(grid[y, x, :nk]))]
                color = COLORS[int(np.argmax(grid[y, x, nk : nk + nc]))]
                objects.append(((x, y), ObjectSpec(kind, color)))
    carried = None
    base = nk + nc + 5
    if grid[ay, ax, base : base + nk].any():
        kind = KINDS[int(np.argmax(grid[ay, ax, base : base + nk]))]
        color = COLORS[int(np.argmax(grid[ay, ax, base + nk : base + nk + nc]))]
        carried = ObjectSpec(kind, color)
    return World(width, height, tuple(objects), (int(ax), int(ay)), agent_dir, carried)


# model-side egocentric view: the full grid re-indexed to the agent's frame
# (agent at center, facing up), so relative geometry transfers across worlds.
# Channels per ego cell: kind one-hot, color one-hot, out-of-bounds flag.
EGO_CHANNELS = len(KINDS) + len(COLORS) + 1


def ego_side(size: int = DEFAULT_SIZE) -> int:
    return 2 * size - 1


def ego_dim(width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE) -> int:
    return ego_side(width) * ego_side(height) * EGO_CHANNELS + len(KINDS) + len(COLORS)


def observe_ego(world: World) -> np.ndarray:
    """Egocentric re-indexing of the full grid; same information content as
    observe() minus absolute coordinates (carried object appended globally)."""
    nk, nc = len(KINDS), len(COLORS)
    sw, sh = ego_side(world.width), ego_side(world.height)
    grid = np.zeros((sh, sw, EGO_CHANNELS))
    grid[:, :, nk + nc] = 1.0  # everything out of bounds until filled
    ax, ay = world.agent_pos
    d = world.agent_dir
    cy, cx = sh // 2, sw // 2
    for y in range(world.height):
        for x in range(world.width):
            dx, dy = x - ax, y - ay
            # rotate world offsets into the agent frame (facing -> up)
            if d == 0:
                fwd, right = -dy, dx
            elif d == 1:
                fwd, right = dx, dy
            elif d == 2:
                fwd, right = dy, -dx
            else:
                fwd, right = -dx, -dy
            r, c = cy - fwd, cx + right
            grid[r, c, nk + nc] = 0.0
            spec = world.object_at((x, y))
            if spec is not None:
                grid[r, c, KINDS.index(spec.kind)] = 1.0
                grid[r, c, nk + COLORS.index(spec.color)] = 1.0
    carried = np.zeros(nk + nc)
    if world.carried is not None:
        carried[KINDS.index(world.carried.kind)] = 1.0
        carried[nk + COLORS.index(world.carried.color)] = 1.0
    return np.concatenate([grid.reshape(-1), carried])


# observation views available to models: name -> (encode, dim, cells, channels)
OBS_VIEWS = {
    "grid": (observe, obs_dim(), DEFAULT_SIZE * DEFAULT_SIZE, OBS_CHANNELS),
    "ego": (observe_ego, ego_dim(), ego_side() * ego_side(), EGO_CHANNELS),
}


# ---------------------------------------------------------------------------
# instruction grammar


def grammar_words() -> list[str]:
    words = {"go", "to", "the", "pick", "up", "then", "and", "after", "you"}
    words.update(COLORS)
    words.update(KINDS)
    return sorted(words)


def _surface(sg: Subgoal) -> list[str]:
    verb = ["go", "to"] if sg.verb == "goto" else ["pick", "up"]
    return verb + ["the", *sg.spec.words()]


def render_instruction(task: Task) -> list[str]:
    """Deterministic template rendering of a task as a word sequence.

    An "after you" connector may appear only at the final join; it moves the
    last-executed subgoal to the front of the surface form, so surface order
    reverses execution order for that pair. Success checking always honors
    execution order.
    """
    sgs = task.subgoals
    if len(task.connectors) != max(0, len(sgs) - 1):
        raise ValueError(f"task has {len(sgs)} subgoals but {len(task.connectors)} connectors")
    if "after_you" in task.connectors[:-1]:
        raise ValueError("'after you' is only valid at the final join")
    if not sgs:
        raise ValueError("task has no subgoals")
    if task.connectors and task.connectors[-1] == "after_you":
        head, body = sgs[-1], sgs[:-1]
        words = _surface(head) + ["after", "you"]
        for i, sg in enumerate(body):
            if i > 0:
                words += list(_CONNECTOR_TOKENS[task.connectors[i - 1]])
            words += _surface(sg)
        return words
    words = _surface(sgs[0])
    for sg, conn in zip(sgs[1:], task.connectors):
        words += list(_CONNECTOR_TOKENS[conn]) + _surface(sg)
    return words


# ---------------------------------------------------------------------------
# task sampling


def _place_candidate(rng: np.random.Generator, difficulty: str, width: int, height: int,
                     subgoal_weights) -> tuple[World, Task]:
    n_sub = int(rng.choice(4, p=subgoal_weights)) + 1
    n_distract = int(rng.integers(2, 5))
    all_specs = [ObjectSpec(k, c) for k in KINDS for c in COLORS]
    picked = rng.choice(len(all_specs), size=n_sub + n_distract, replace=False)
    specs = [all_specs[i] for i in picked]

    if difficulty == "goto_seq":
        verbs = ["goto"] * n_sub
    elif difficulty == "boss":
        verbs = ["goto" if rng.random() < 2 / 3 else "pickup" for _ in range(n_sub)]
    else:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    subgoals = tuple(Subgoal(v, s) for v, s in zip(verbs, specs[:n_sub]))

    connectors = []
    for i in range(n_sub - 1):
        pool = CONNECTORS if i == n_sub - 2 else CONNECTORS[:2]
        connectors.append(pool[int(rng.integers(len(pool)))])

    cells = [(x, y) for x in range(width) for y in range(height)]
    chosen = rng.choice(len(cells), size=len(specs) + 1, replace=False)
    objects = tuple((cells[c], spec) for c, spec in zip(chosen[:-1], specs))
    agent_pos = cells[chosen[-1]]
    world = World(width, height, objects, agent_pos, int(rng.integers(4)))
    return world, Task(subgoals, tuple(connectors))


def sample_task(rng, difficulty: str, *, width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE,
                subgoal_weights=SUBGOAL_WEIGHTS, max_tries: int = 100) -> tuple[World, Task]:
    """Sample a solvable (world, task); `rng` is a Generator or an int seed.

    Integer seeds use attempt-indexed substreams so a record can be rebuilt
    later without re-running solvability checks (see sample_task_record).
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    for attempt in range(max_tries):
        r = np.random.default_rng([seed, attempt]) if seed is not None else rng
        world, task = _place_candidate(r, difficulty, width, height, subgoal_weights)
        try:
            oracle_solve(world, task)
        except UnsolvableTask:
            continue
        return world, task
    raise UnsolvableTask(f"no solvable placement in {max_tries} tries (seed={seed})")


def sample_task_record(seed: int, difficulty: str, **kw) -> tuple[World, Task, int]:
    """Like sample_task but also returns the accepted attempt index."""
    max_tries = kw.pop("max_tries", 100)
    for attempt in range(max_tries):
        world, task = _place_candidate(np.random.default_rng([seed, attempt]), difficulty,
                                       kw.get("width", DEFAULT_SIZE), kw.get("height", DEFAULT_SIZE),
                                       kw.get("subgoal_weights", SUBGOAL_WEIGHTS))
        try:
            oracle_solve(world, task)
        except UnsolvableTask:
            continue
        return world, task, attempt
    raise UnsolvableTask(f"no solvable placement in {max_tries} tries (seed={seed})")


def rebuild_task(seed: int, tries: int, difficulty: str, *, width: int = DEFAULT_SIZE,
                 height: int = DEFAULT_SIZE, subgoal_weights=SUBGOAL_WEIGHTS) -> tuple[World, Task]:
    """Replay the accepted attempt of sample_task_record; no oracle calls."""
    rng = np.random.default_rng([seed, tries])
    return _place_candidate(rng, difficulty, width, height, subgoal_weights)


# ---------------------------------------------------------------------------
# success checking


def _satisfied(world: World, sg: Subgoal) -> bool:
    if sg.verb == "pickup":
        return world.carried == sg.spec
    pos = world.find_object(sg.spec)
    return pos is not None and world.facing_cell() == pos


def check_success(states: list[World], task: Task) -> bool:
    """True iff subgoals are satisfied in execution order over the episode.

    One subgoal may be consumed per state; the initial state counts.
    """
    idx = 0
    for w in states:
        if idx == len(task.subgoals):
            break
        if _satisfied(w, task.subgoals[idx]):
            idx += 1
    return idx == len(task.subgoals)


# ---------------------------------------------------------------------------
# oracle


def _bfs(world: World, goals: set[tuple[tuple[int, int], int]]) -> list[Action] | None:
    """Shortest left/right/forward path from the agent state to any goal
    (position, facing) state. Object cells block movement."""
    start = (world.agent_pos, world.agent_dir)
    if start in goals:
        return []
    blocked = {p for p, _ in world.objects}
    seen = {start}
    queue = deque([(start, [])])
    while queue:
        (pos, d), path = queue.popleft()
        for action in (Action.left, Action.right, Action.forward):
            if action == Action.left:
                nxt = (pos, (d - 1) % 4)
            elif action == Action.right:
                nxt = (pos, (d + 1) % 4)
            else:
                dx, dy = DIR_VECTORS[d]
                tgt = (pos[0] + dx, pos[1] + dy)
                if not (0 <= tgt[0] < world.width and 0 <= tgt[1] < world.height) or tgt in blocked:
                    continue
                nxt = (tgt, d)
            if nxt in seen:
                continue
            seen.add(nxt)
            new_path = path + [action]
            if nxt in goals:
                return new_path
            queue.append((nxt, new_path))
    return None


def _goal_states_facing(world: World, target: tuple[int, int]) -> set[tuple[tuple[int, int], int]]:
    goals = set()
    for d, (dx, dy) in enumerate(DIR_VECTORS):
        cell = (target[0] - dx, target[1] - dy)
        if world.in_bounds(cell) and world.object_at(cell) is None:
            goals.add((cell, d))
    return goals


def _apply(world: World, actions: list[Action]) -> World:
    for a in actions:
        world, _ = step(world, a)
    return world


def oracle_solve(world: World, task: Task) -> list[Action]:
    """Solve the task with per-subgoal BFS-shortest paths; ends with done."""
    actions: list[Action] = []
    w = world
    for sg in task.subgoals:
        if sg.verb == "pickup" and w.carried is not None:
            # free the hands on the nearest empty facing cell
            goals = set()
            for x in range(w.width):
                for y in range(w.height):
                    if w.object_at((x, y)) is None and (x, y) != w.agent_pos:
                        goals |= {((x - dx, y - dy), d) for d, (dx, dy) in enumerate(DIR_VECTORS)
                                  if w.in_bounds((x - dx, y - dy))}
            # a goal cell must be standable (agent may occupy its own cell)
            goals = {(c, d) for (c, d) in goals if w.object_at(c) is None}
            path = _bfs(w, goals)
            if path is None:
                raise UnsolvableTask("nowhere to drop the carried object")
            path.append(Action.drop)
            w = _apply(w, path)
            actions += path
        target = w.find_object(sg.spec)
        if target is None:
            raise UnsolvableTask(f"referenced object {sg.spec} not in world")
        path = _bfs(w, _goal_states_facing(w, target))
        if path is None:
            raise UnsolvableTask(f"object {sg.spec} unreachable")
        if sg.verb == "pickup":
            path.append(Action.pickup)
        w = _apply(w, path)
        actions += path
    actions.append(Action.done)
    return actions


# ---------------------------------------------------------------------------
# rollout helpers


def rollout(world: World, actions, view: str = "grid") -> tuple[list[World], Trajectory]:
    """Replay actions; returns all visited states and the trajectory with
    observations encoded in the named view."""
    encode, dim = OBS_VIEWS[view][0], OBS_VIEWS[view][1]
    states = [world]
    obs = []
    w = world
    for a in actions:
        obs.append(encode(w))
        w, _ = step(w, a)
        states.append(w)
    observations = np.stack(obs) if obs else np.zeros((0, dim))
    return states, Trajectory(observations, tuple(int(a) for a in actions))
