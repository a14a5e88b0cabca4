"""MiniRogue: a deterministic multi-level rooms-and-corridors grid dungeon.

Tasks come in two kinds: ``score`` and ``scout`` reward every step,
``depthN`` and ``oracle`` pay a single reward of 1 on the trigger and then
terminate.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

UNSEEN, WALL, FLOOR, ITEM, STAIRS, ORACLE, AGENT, AGENT_ON_STAIRS = range(8)
N_TILE_CODES = 8
GLYPHS = {UNSEEN: " ", WALL: "#", FLOOR: ".", ITEM: "$", STAIRS: ">", ORACLE: "O", AGENT: "@",
          AGENT_ON_STAIRS: "@"}

ACTIONS = ("up", "down", "left", "right", "descend", "wait")
N_ACTIONS = len(ACTIONS)
UP, DOWN, LEFT, RIGHT, DESCEND, WAIT = range(N_ACTIONS)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

ITEM_VALUE = 10
DESCEND_BONUS = 50
REVEAL_RADIUS = 2
MAX_LAYOUT_ATTEMPTS = 100
ROOM_COUNT = (5, 8)       # [low, high) rooms per level; fewer fit when space runs out
ROOM_HEIGHT = (2, 3)
ROOM_WIDTH = (2, 4)


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an episode that has already terminated."""


@dataclass(frozen=True)
class DungeonConfig:
    width: int = 12
    height: int = 12
    n_levels: int = 4
    n_items_per_level: int = 3
    horizon: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.width < 7 or self.height < 7:
            raise ValueError("width and height must be >= 7")
        if self.n_levels < 2:
            raise ValueError("n_levels must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    def with_seed(self, seed: int) -> "DungeonConfig":
        return DungeonConfig(self.width, self.height, self.n_levels,
                             self.n_items_per_level, self.horizon, int(seed))

    @property
    def max_score(self) -> int:
        return ITEM_VALUE * self.n_items_per_level * self.n_levels + DESCEND_BONUS * (self.n_levels - 1)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n: int = 0

    SPARSE = ("depth", "oracle")

    def __post_init__(self):
        if self.kind not in ("score", "scout", "depth", "oracle"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "depth" and self.n < 2:
            raise ValueError("depth task needs n >= 2")

    @classmethod
    def parse(cls, name: str) -> "TaskSpec":
        name = name.lower()
        if name.startswith("depth"):
            return cls("depth", int(name[5:]))
        return cls(name)

    @property
    def name(self) -> str:
        return f"depth{self.n}" if self.kind == "depth" else self.kind

    @property
    def sparse(self) -> bool:
        return self.kind in self.SPARSE

    @property
    def code(self) -> int:
        return {"score": 0, "scout": 1, "oracle": 2}.get(self.kind, 10 + self.n)

    @classmethod
    def from_code(cls, code: int) -> "TaskSpec":
        if code >= 10:
            return cls("depth", code - 10)
        return cls(("score", "scout", "oracle")[code])

    def validate(self, config: DungeonConfig) -> None:
        if self.kind == "depth" and self.n > config.n_levels:
            raise ValueError(f"depth{self.n} exceeds n_levels={config.n_levels}")


@dataclass
class Level:
    tiles: np.ndarray          # uint8 codes, never UNSEEN or an agent code
    start: tuple[int, int]
    stairs: tuple[int, int] | None
    rooms: list = field(default_factory=list)


@dataclass
class Dungeon:
    levels: list[Level]
    oracle_level: int          # 1-based depth drawn for the oracle
    oracle_pos: tuple[int, int]
    has_oracle: bool


@dataclass(frozen=True)
class Observation:
    tiles: np.ndarray   # (height, width) uint8
    status: np.ndarray  # [depth / n_levels, score / max_score, steps / horizon]

    def __eq__(self, other):
        return (isinstance(other, Observation) and np.array_equal(self.tiles, other.tiles)
                and np.array_equal(self.status, other.status))

    __hash__ = None


@dataclass
class GameState:
    config: DungeonConfig
    task: TaskSpec
    dungeon: Dungeon
    level_index: int
    agent_pos: tuple[int, int]
    revealed: np.ndarray
    tiles: np.ndarray          # current level with collected items removed
    score: int = 0
    steps_taken: int = 0
    done: bool = False

    @property
    def level(self) -> Level:
        return self.dungeon.levels[self.level_index - 1]


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    done_reason: str | None = None   # "horizon" or "trigger"


def walkable(tiles: np.ndarray) -> np.ndarray:
    return tiles != WALL


def bfs_distances(tiles: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Shortest 4-connected path lengths from ``start``; -1 where unreachable."""
    h, w = tiles.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    dist[start] = 0
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for dr, dc in _MOVES.values():
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and dist[rr, cc] < 0 and tiles[rr, cc] != WALL:
                dist[rr, cc] = d
                queue.append((rr, cc))
    return dist


def _carve_rooms(config: DungeonConfig, rng: np.random.Generator):
    h, w = config.height, config.width
    tiles = np.full((h, w), WALL, dtype=np.uint8)
    target = int(rng.integers(*ROOM_COUNT))
    rooms = []
    for _ in range(60):
        if len(rooms) == target:
            break
        rh, rw = int(rng.integers(*ROOM_HEIGHT)), int(rng.integers(*ROOM_WIDTH))
        r0 = int(rng.integers(1, h - rh))
        c0 = int(rng.integers(1, w - rw))
        # one-tile wall margin between rooms
        if any(r0 <= b[0] + b[2] and b[0] <= r0 + rh and
               c0 <= b[1] + b[3] and b[1] <= c0 + rw for b in rooms):
            continue
        rooms.append((r0, c0, rh, rw))
        tiles[r0:r0 + rh, c0:c0 + rw] = FLOOR
    for a, b in zip(rooms, rooms[1:]):
        ra, ca = a[0] + int(rng.integers(a[2])), a[1] + int(rng.integers(a[3]))
        rb, cb = b[0] + int(rng.integers(b[2])), b[1] + int(rng.integers(b[3]))
        if rng.random() < 0.5:
            tiles[ra, min(ca, cb):max(ca, cb) + 1] = FLOOR
            tiles[min(ra, rb):max(ra, rb) + 1, cb] = FLOOR
        else:
            tiles[min(ra, rb):max(ra, rb) + 1, ca] = FLOOR
            tiles[rb, min(ca, cb):max(ca, cb) + 1] = FLOOR
    return tiles, rooms


def _make_level(config: DungeonConfig, rng: np.random.Generator, final: bool) -> Level:
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        tiles, rooms = _carve_rooms(config, rng)
        if len(rooms) < 2:
            continue
        r0, c0, rh, rw = rooms[0]
        start = (r0 + int(rng.integers(rh)), c0 + int(rng.integers(rw)))
        dist = bfs_distances(tiles, start)
        floor = np.argwhere(tiles == FLOOR)
        if np.any(dist[tiles == FLOOR] < 0):
            continue
        stairs = None
        if not final:
            # staircase on the floor tile farthest from the arrival point
            far = floor[np.argmax(dist[floor[:, 0], floor[:, 1]])]
            stairs = (int(far[0]), int(far[1]))
            tiles[stairs] = STAIRS
        free = [tuple(map(int, p)) for p in floor if tuple(p) != start and tuple(p) != stairs]
        if len(free) < config.n_items_per_level + 1:
            continue
        for k in rng.choice(len(free), size=config.n_items_per_level, replace=False):
            tiles[free[k]] = ITEM
        return Level(tiles, start, stairs, rooms)
    raise RuntimeError(f"could not generate a valid level in {MAX_LAYOUT_ATTEMPTS} attempts")


def generate(config: DungeonConfig, with_oracle: bool = False) -> Dungeon:
    """Build every level of the dungeon deterministically from ``config.seed``.

    The oracle's depth and position are always drawn so that layouts do not
    depend on the task; the tile is only placed when ``with_oracle``.
    """
    rng = np.random.default_rng(config.seed)
    levels = [_make_level(config, rng, final=(i == config.n_levels - 1))
              for i in range(config.n_levels)]
    depths = [d for d in (2, 3) if d <= config.n_levels]
    oracle_level = int(depths[int(rng.integers(len(depths)))])
    lvl = levels[oracle_level - 1]
    free = np.argwhere(lvl.tiles == FLOOR)
    free = [tuple(map(int, p)) for p in free if tuple(p) != lvl.start]
    oracle_pos = free[int(rng.integers(len(free)))]
    if with_oracle:
        lvl.tiles[oracle_pos] = ORACLE
    return Dungeon(levels, oracle_level, oracle_pos, with_oracle)


def _reveal(state: GameState) -> int:
    r, c = state.agent_pos
    rad = REVEAL_RADIUS
    window = state.revealed[max(r - rad, 0):r + rad + 1, max(c - rad, 0):c + rad + 1]
    new = int(window.size - np.count_nonzero(window))
    window[...] = True
    return new


def observe(state: GameState) -> Observation:
    tiles = np.where(state.revealed, state.tiles, UNSEEN).astype(np.uint8)
    # the agent glyph hides the tile below it; keep "standing on stairs" visible
    tiles[state.agent_pos] = AGENT_ON_STAIRS if state.tiles[state.agent_pos] == STAIRS else AGENT
    cfg = state.config
    status = np.array([state.level_index / cfg.n_levels,
                       min(state.score / cfg.max_score, 1.0),
                       state.steps_taken / cfg.horizon])
    return Observation(tiles, status)


def _enter_level(state: GameState, depth: int) -> None:
    state.level_index = depth
    lvl = state.level
    state.tiles = lvl.tiles.copy()
    state.agent_pos = lvl.start
    state.revealed = np.zeros(state.tiles.shape, dtype=bool)


def reset(config: DungeonConfig, task: TaskSpec, dungeon: Dungeon | None = None):
    """Start an episode at depth 1. Returns (state, observation)."""
    task.validate(config)
    if dungeon is None:
        dungeon = generate(config, with_oracle=(task.kind == "oracle"))
    state = GameState(config, task, dungeon, 1, (0, 0), np.zeros(0, dtype=bool), np.zeros(0))
    _enter_level(state, 1)
    _reveal(state)
    return state, observe(state)


def _oracle_adjacent(state: GameState) -> bool:
    d = state.dungeon
    if not d.has_oracle or state.level_index != d.oracle_level:
        return False
    (r, c), (orow, ocol) = state.agent_pos, d.oracle_pos
    return abs(r - orow) + abs(c - ocol) <= 1


def step(state: GameState, action: int) -> StepResult:
    """Advance ``state`` in place by one action."""
    if state.done:
        raise EpisodeDoneError("episode already finished; call reset()")
    action = int(action)
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"invalid action {action}")
    old_score = state.score
    newly_revealed = 0
    if action in _MOVES:
        dr, dc = _MOVES[action]
        r, c = state.agent_pos[0] + dr, state.agent_pos[1] + dc
        h, w = state.tiles.shape
        if 0 <= r < h and 0 <= c < w and state.tiles[r, c] != WALL:
            state.agent_pos = (r, c)
            if state.tiles[r, c] == ITEM:
                state.tiles[r, c] = FLOOR
                state.score += ITEM_VALUE
            newly_revealed = _reveal(state)
    elif action == DESCEND and state.agent_pos == state.level.stairs:
        _enter_level(state, state.level_index + 1)
        state.score += DESCEND_BONUS
        newly_revealed = _reveal(state)
    state.steps_taken += 1

    task = state.task
    reward, reason = 0.0, None
    if task.kind == "score":
        reward = float(state.score - old_score)
    elif task.kind == "scout":
        reward = float(newly_revealed)
    elif task.kind == "depth":
        if state.level_index >= task.n:
            reward, reason = 1.0, "trigger"
    elif _oracle_adjacent(state):
        reward, reason = 1.0, "trigger"
    if reason is None and state.steps_taken >= state.config.horizon:
        reason = "horizon"
    state.done = reason is not None
    return StepResult(observe(state), reward, state.done, reason)


def render_ascii(state: GameState, reveal_all: bool = False) -> str:
    """One character per tile; unseen tiles are blanks unless ``reveal_all``."""
    tiles = state.tiles if reveal_all else np.where(state.revealed, state.tiles, UNSEEN)
    tiles = tiles.copy()
    tiles[state.agent_pos] = AGENT
    return "\n".join("".join(GLYPHS[int(t)] for t in row) for row in tiles)
