"""Grid-world engine for the commons harvest game.

Cells, trees, apple regrowth, grass death and rebirth, movement, zapping,
removal and respawn. All randomness goes through ``GridState.rng``.
"""
from __future__ import annotations

import copy
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from functools import lru_cache
from typing import Iterable, NamedTuple, Optional

import numpy as np

DEFAULT_START = datetime(2023, 11, 19, 0, 0, 0)
DEFAULT_REGROWTH = {0: 0.0, 1: 0.0025, 2: 0.005, 3: 0.025}


class SubstrateError(Exception):
    pass


class MapError(SubstrateError):
    pass


class UnknownEntity(SubstrateError):
    pass


class EntityRemoved(SubstrateError):
    pass


class Position(NamedTuple):
    row: int
    col: int

    def __str__(self) -> str:
        return f"[{self.row}, {self.col}]"


class CellKind(enum.IntEnum):
    WALL = 0
    EMPTY = 1
    APPLE = 2
    GRASS = 3
    BARE = 4


MAP_CHARS = {"W": CellKind.WALL, ".": CellKind.EMPTY, "A": CellKind.APPLE,
             "G": CellKind.GRASS, "S": CellKind.EMPTY}
RENDER_CHARS = {CellKind.WALL: "W", CellKind.EMPTY: ".", CellKind.APPLE: "A",
                CellKind.GRASS: "G", CellKind.BARE: "_"}


class Orientation(enum.Enum):
    N = "North"
    E = "East"
    S = "South"
    W = "West"

    @property
    def delta(self) -> tuple[int, int]:
        return _DELTAS[self]

    def turned(self, quarter_turns: int) -> "Orientation":
        order = list(Orientation)
        return order[(order.index(self) + quarter_turns) % 4]

    @classmethod
    def facing(cls, drow: int, dcol: int) -> "Orientation":
        for o, d in _DELTAS.items():
            if d == (drow, dcol):
                return o
        raise ValueError(f"not a unit direction: {(drow, dcol)}")


_DELTAS = {Orientation.N: (-1, 0), Orientation.E: (0, 1),
           Orientation.S: (1, 0), Orientation.W: (0, -1)}


class Move(enum.Enum):
    FORWARD = "Forward"
    BACK = "Back"
    STEP_LEFT = "StepLeft"
    STEP_RIGHT = "StepRight"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    NOOP = "Noop"


# quarter turns (clockwise) from the facing direction to the direction of travel
_TRANSLATIONS = {Move.FORWARD: 0, Move.STEP_RIGHT: 1, Move.BACK: 2, Move.STEP_LEFT: 3}


class EntityKind(enum.Enum):
    LLM_AGENT = "LlmAgent"
    BOT = "Bot"


class Terminal(enum.Enum):
    MAX_ROUNDS = "MaxRounds"
    APPLES_EXHAUSTED = "ApplesExhausted"


@dataclass(frozen=True)
class Cell:
    kind: CellKind
    tree_id: Optional[int] = None


@dataclass(frozen=True)
class Tree:
    id: int
    member_tiles: frozenset

    @property
    def anchor(self) -> Position:
        return min(self.member_tiles)


@dataclass
class EntityState:
    id: str
    kind: EntityKind
    position: Optional[Position]
    orientation: Orientation = Orientation.N
    cumulative_reward: float = 0.0
    removed_until: Optional[int] = None
    # count of scheduled moves consumed; removed_until is expressed in this clock
    moves: int = 0
    attacked_by: Optional[str] = None

    @property
    def active(self) -> bool:
        return self.removed_until is None


@dataclass(frozen=True)
class WorldEvent:
    kind: str
    step: int
    time: datetime
    entity: Optional[str] = None
    position: Optional[Position] = None
    orientation: Optional[str] = None
    tree_id: Optional[int] = None
    target: Optional[str] = None
    tiles: tuple = ()

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.entity is not None:
            out["entity"] = self.entity
        if self.position is not None:
            out["position"] = list(self.position)
        if self.orientation is not None:
            out["orientation"] = self.orientation
        if self.tree_id is not None:
            out["tree_id"] = self.tree_id
        if self.target is not None:
            out["target"] = self.target
        if self.tiles:
            out["tiles"] = [list(t) for t in self.tiles]
        return out

    @classmethod
    def from_dict(cls, data: dict, step: int, time: datetime) -> "WorldEvent":
        pos = data.get("position")
        return cls(
            kind=data["kind"],
            step=step,
            time=time,
            entity=data.get("entity"),
            position=Position(*pos) if pos is not None else None,
            orientation=data.get("orientation"),
            tree_id=data.get("tree_id"),
            target=data.get("target"),
            tiles=tuple(Position(*t) for t in data.get("tiles", ())),
        )


@dataclass
class WorldConfig:
    regrowth_probability: dict = field(default_factory=lambda: dict(DEFAULT_REGROWTH))
    removal_steps: int = 5
    max_rounds: int = 100
    beam_length: int = 3
    beam_width: int = 1
    window_height: int = 11
    window_width: int = 11
    spawn_tiles: frozenset = frozenset()

    def __post_init__(self):
        self.regrowth_probability = {int(k): float(v) for k, v in self.regrowth_probability.items()}
        self.spawn_tiles = frozenset(Position(*p) for p in self.spawn_tiles)
        table = self.regrowth_probability
        if any(not 0.0 <= p <= 1.0 for p in table.values()):
            raise ValueError("regrowth probabilities must lie in [0, 1]")
        if table.get(0, 0.0) != 0.0:
            raise ValueError("regrowth_probability[0] must be 0")
        table.setdefault(0, 0.0)
        if self.removal_steps < 1:
            raise ValueError("removal_steps must be >= 1")
        if self.beam_length < 1 or self.beam_width < 1:
            raise ValueError("beam dimensions must be positive")

    def growth_probability(self, k: int) -> float:
        """Probability for ``k`` nearby apples; counts above the table saturate."""
        table = self.regrowth_probability
        return table[min(k, max(table))]

    def to_dict(self) -> dict:
        return {
            "regrowth_probability": {str(k): v for k, v in sorted(self.regrowth_probability.items())},
            "removal_steps": self.removal_steps,
            "max_rounds": self.max_rounds,
            "beam_length": self.beam_length,
            "beam_width": self.beam_width,
            "window_height": self.window_height,
            "window_width": self.window_width,
            "spawn_tiles": sorted(list(p) for p in self.spawn_tiles),
        }


@dataclass
class GridState:
    kinds: np.ndarray
    tree_of: np.ndarray
    trees: list
    config: WorldConfig
    spawn_tiles: tuple
    entities: dict = field(default_factory=dict)
    step: int = 0
    round: int = 0
    clock: datetime = DEFAULT_START
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.kinds.shape

    @property
    def height(self) -> int:
        return self.kinds.shape[0]

    @property
    def width(self) -> int:
        return self.kinds.shape[1]

    def in_bounds(self, p) -> bool:
        return 0 <= p[0] < self.height and 0 <= p[1] < self.width

    def kind(self, p) -> CellKind:
        return CellKind(int(self.kinds[p[0], p[1]]))

    def cell(self, p) -> Cell:
        kind = self.kind(p)
        if kind in (CellKind.APPLE, CellKind.GRASS):
            return Cell(kind, int(self.tree_of[p[0], p[1]]))
        return Cell(kind)

    def tree_id_at(self, p) -> Optional[int]:
        t = int(self.tree_of[p[0], p[1]])
        return None if t < 0 else t

    def apple_count(self) -> int:
        return int(np.count_nonzero(self.kinds == CellKind.APPLE))

    def tree_apples(self, tree_id: int) -> int:
        return int(np.count_nonzero((self.kinds == CellKind.APPLE) & (self.tree_of == tree_id)))

    def entity(self, entity_id: str) -> EntityState:
        try:
            return self.entities[entity_id]
        except KeyError:
            raise UnknownEntity(entity_id) from None

    def occupant(self, p) -> Optional[str]:
        for e in self.entities.values():
            if e.position == p:
                return e.id
        return None

    def occupied(self) -> set:
        return {e.position for e in self.entities.values() if e.position is not None}

    def copy(self) -> "GridState":
        return copy.deepcopy(self)

    def state_hash(self) -> str:
        """Digest of the observable world: cells, entities and round (RNG excluded)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.kinds, dtype=np.int8).tobytes())
        ents = [
            [e.id, e.kind.value, list(e.position) if e.position else None, e.orientation.value,
             e.cumulative_reward, e.removed_until is not None]
            for e in self.entities.values()
        ]
        h.update(json.dumps([self.round, ents], separators=(",", ":")).encode())
        return h.hexdigest()

    def render(self) -> str:
        rows = [[RENDER_CHARS[CellKind(int(v))] for v in row] for row in self.kinds]
        for i, e in enumerate(self.entities.values()):
            if e.position is not None:
                rows[e.position.row][e.position.col] = str(i % 10)
        return "\n".join("".join(r) for r in rows)


def _split_map(ascii_map: str) -> list[str]:
    text = ascii_map.strip("\n")
    lines = text.split("\n") if "\n" in text else text.split("/")
    return [ln.rstrip("\r") for ln in lines if ln.strip()]


def load_map(ascii_map: str, config: Optional[WorldConfig] = None, *, seed: int = 0,
             start: datetime = DEFAULT_START, require_spawn: bool = True) -> GridState:
    """Parse an ASCII map (W wall, A apple, G grass, . empty, S spawn).

    Rows may be separated by newlines or ``/``. Trees are the 8-connected
    components of apple and grass tiles, numbered in row-major order of
    their top-left tile.
    """
    config = config or WorldConfig()
    lines = _split_map(ascii_map)
    if not lines:
        raise MapError("empty map")
    width = len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise MapError("map is not rectangular")
    kinds = np.empty((len(lines), width), dtype=np.int8)
    spawns = []
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch not in MAP_CHARS:
                raise MapError(f"unknown map character {ch!r} at [{r}, {c}]")
            kinds[r, c] = MAP_CHARS[ch]
            if ch == "S":
                spawns.append(Position(r, c))
    if config.spawn_tiles:
        spawns = sorted(config.spawn_tiles)
    if require_spawn and not spawns:
        raise MapError("map has no spawn tiles")
    tree_of, trees = _label_trees(kinds)
    return GridState(kinds=kinds, tree_of=tree_of, trees=trees, config=config,
                     spawn_tiles=tuple(sorted(spawns)), clock=start,
                     rng=np.random.default_rng(seed))


def _label_trees(kinds: np.ndarray):
    h, w = kinds.shape
    tree_of = np.full((h, w), -1, dtype=np.int32)
    fertile = (kinds == CellKind.APPLE) | (kinds == CellKind.GRASS)
    trees = []
    for r in range(h):
        for c in range(w):
            if not fertile[r, c] or tree_of[r, c] >= 0:
                continue
            tid = len(trees)
            stack = [(r, c)]
            tree_of[r, c] = tid
            members = []
            while stack:
                pr, pc = stack.pop()
                members.append(Position(pr, pc))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = pr + dr, pc + dc
                        if 0 <= nr < h and 0 <= nc < w and fertile[nr, nc] and tree_of[nr, nc] < 0:
                            tree_of[nr, nc] = tid
                            stack.append((nr, nc))
            trees.append(Tree(tid, frozenset(members)))
    return tree_of, trees


@lru_cache(maxsize=None)
def l2_offsets(radius: float) -> tuple:
    """Offsets (drow, dcol) != (0, 0) with Euclidean length <= radius, row-major."""
    r = int(math.floor(radius))
    return tuple((dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1)
                 if (dr or dc) and dr * dr + dc * dc <= radius * radius)


def neighbors_l2(p, radius: float, shape: tuple[int, int]) -> set:
    h, w = shape
    return {Position(p[0] + dr, p[1] + dc) for dr, dc in l2_offsets(radius)
            if 0 <= p[0] + dr < h and 0 <= p[1] + dc < w}


@lru_cache(maxsize=None)
def _disk_kernel(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    kernel = np.zeros((2 * r + 1, 2 * r + 1), dtype=np.int32)
    for dr, dc in l2_offsets(radius):
        kernel[r + dr, r + dc] = 1
    return kernel


def nearby_apple_counts(kinds: np.ndarray, radius: float = 2) -> np.ndarray:
    """Apples within L2 ``radius`` of every tile, the tile itself excluded."""
    h, w = kinds.shape
    r = int(math.floor(radius))
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=np.int32)
    padded[r:r + h, r:r + w] = kinds == CellKind.APPLE
    windows = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
    return np.einsum("ijkl,kl->ij", windows, _disk_kernel(radius))


def regrowth_step(state: GridState) -> list[WorldEvent]:
    """One synchronous regrowth update; counts are read before any change."""
    counts = nearby_apple_counts(state.kinds)
    grass = np.argwhere(state.kinds == CellKind.GRASS)
    fertile = int(np.count_nonzero(counts[state.kinds == CellKind.GRASS]))
    draws = iter(state.rng.random(fertile))
    occupied = state.occupied()
    events = []
    grown = []
    for r, c in grass:
        p = Position(int(r), int(c))
        k = int(counts[r, c])
        tid = int(state.tree_of[r, c])
        if k == 0:
            state.kinds[r, c] = CellKind.BARE
            events.append(WorldEvent("GrassDisappeared", state.step, state.clock, position=p, tree_id=tid))
            continue
        u = next(draws)
        if u < state.config.growth_probability(k) and p not in occupied:
            state.kinds[r, c] = CellKind.APPLE
            grown.append(p)
            events.append(WorldEvent("AppleGrew", state.step, state.clock, position=p, tree_id=tid))
    reborn = set()
    for q in grown:
        for n in neighbors_l2(q, 2, state.shape):
            if state.kinds[n] == CellKind.BARE:
                reborn.add(n)
    for p in sorted(reborn):
        state.kinds[p] = CellKind.GRASS
        events.append(WorldEvent("GrassGrew", state.step, state.clock, position=p,
                                 tree_id=int(state.tree_of[p])))
    return events


def _active(state: GridState, entity_id: str) -> EntityState:
    ent = state.entity(entity_id)
    if not ent.active:
        raise EntityRemoved(entity_id)
    return ent


def move_entity(state: GridState, entity_id: str, move: Move) -> list[WorldEvent]:
    ent = _active(state, entity_id)
    ent.moves += 1
    state.step += 1
    if move is Move.NOOP:
        return [WorldEvent("Noop", state.step, state.clock, entity=ent.id, position=ent.position,
                           orientation=ent.orientation.value)]
    if move in (Move.TURN_LEFT, Move.TURN_RIGHT):
        ent.orientation = ent.orientation.turned(-1 if move is Move.TURN_LEFT else 1)
        return [WorldEvent("Moved", state.step, state.clock, entity=ent.id, position=ent.position,
                           orientation=ent.orientation.value)]
    dr, dc = ent.orientation.turned(_TRANSLATIONS[move]).delta
    dest = Position(ent.position.row + dr, ent.position.col + dc)
    if (not state.in_bounds(dest) or state.kind(dest) == CellKind.WALL
            or state.occupant(dest) is not None):
        return [WorldEvent("MoveBlocked", state.step, state.clock, entity=ent.id,
                           position=ent.position, orientation=ent.orientation.value)]
    ent.position = dest
    events = [WorldEvent("Moved", state.step, state.clock, entity=ent.id, position=dest,
                         orientation=ent.orientation.value)]
    if state.kind(dest) == CellKind.APPLE:
        state.kinds[dest] = CellKind.GRASS
        ent.cumulative_reward += 1.0
        events.append(WorldEvent("AppleTaken", state.step, state.clock, entity=ent.id,
                                 position=dest, tree_id=int(state.tree_of[dest])))
    return events


def beam_tiles(state: GridState, origin, orientation: Orientation) -> list:
    """Tiles swept by a beam fired from ``origin``, ordered by distance then lane."""
    cfg = state.config
    fr, fc = orientation.delta
    rr, rc = orientation.turned(1).delta
    half = (cfg.beam_width - 1) // 2
    lanes = range(-half, cfg.beam_width - half)
    tiles = []
    blocked = set()
    for dist in range(1, cfg.beam_length + 1):
        for lat in sorted(lanes, key=lambda x: (abs(x), x)):
            if lat in blocked:
                continue
            p = Position(origin[0] + fr * dist + rr * lat, origin[1] + fc * dist + rc * lat)
            if not state.in_bounds(p) or state.kind(p) == CellKind.WALL:
                blocked.add(lat)
                continue
            tiles.append(p)
    return tiles


def fire_zap(state: GridState, entity_id: str) -> list[WorldEvent]:
    ent = _active(state, entity_id)
    ent.moves += 1
    state.step += 1
    tiles = beam_tiles(state, ent.position, ent.orientation)
    events = [WorldEvent("AttackAttempted", state.step, state.clock, entity=ent.id,
                         position=ent.position, orientation=ent.orientation.value,
                         tiles=tuple(tiles))]
    by_tile = {e.position: e for e in state.entities.values() if e.active and e.id != ent.id}
    for p in tiles:
        target = by_tile.get(p)
        if target is None:
            continue
        target.position = None
        target.removed_until = target.moves + state.config.removal_steps
        target.attacked_by = ent.id
        events.append(WorldEvent("AttackHit", state.step, state.clock, entity=ent.id,
                                 position=p, target=target.id))
        break
    return events


def skip_move(state: GridState, entity_id: str) -> list[WorldEvent]:
    """Consume a scheduled move of a removed entity."""
    ent = state.entity(entity_id)
    if ent.active:
        raise SubstrateError(f"{entity_id} is active; nothing to skip")
    ent.moves += 1
    return [WorldEvent("MoveSkipped", state.step, state.clock, entity=ent.id)]


def spawn_entity(state: GridState, entity_id: str, kind: EntityKind,
                 position: Optional[Position] = None,
                 orientation: Orientation = Orientation.N) -> list[WorldEvent]:
    """Add a new entity, on ``position`` or on a random free spawn tile."""
    if entity_id in state.entities:
        raise SubstrateError(f"duplicate entity {entity_id}")
    if position is None:
        free = [p for p in state.spawn_tiles if p not in state.occupied()]
        if not free:
            raise SubstrateError("no free spawn tile for initial placement")
        position = free[int(state.rng.integers(len(free)))]
    position = Position(*position)
    if state.kind(position) == CellKind.WALL or position in state.occupied():
        raise SubstrateError(f"cannot place {entity_id} at {position}")
    state.entities[entity_id] = EntityState(entity_id, kind, position, orientation)
    return [WorldEvent("Spawned", state.step, state.clock, entity=entity_id, position=position,
                       orientation=orientation.value)]


def respawn_tick(state: GridState) -> list[WorldEvent]:
    events = []
    for ent in state.entities.values():
        if ent.active or ent.moves < ent.removed_until:
            continue
        occupied = state.occupied()
        free = [p for p in state.spawn_tiles if p not in occupied]
        if not free:
            events.append(WorldEvent("RespawnDeferred", state.step, state.clock, entity=ent.id))
            continue
        ent.position = free[int(state.rng.integers(len(free)))]
        ent.orientation = Orientation.N
        ent.removed_until = None
        ent.attacked_by = None
        events.append(WorldEvent("Respawned", state.step, state.clock, entity=ent.id,
                                 position=ent.position, orientation=ent.orientation.value))
    return events


def is_terminal(state: GridState) -> Optional[Terminal]:
    if state.apple_count() == 0:
        return Terminal.APPLES_EXHAUSTED
    if state.round >= state.config.max_rounds:
        return Terminal.MAX_ROUNDS
    return None


def total_reward(entities: Iterable[EntityState]) -> float:
    return sum(e.cumulative_reward for e in entities)
