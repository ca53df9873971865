"""Agent memories: long-term associative store, short-term table, spatial map."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional

import numpy as np

from .substrate import CellKind, Move, Orientation, Position

Embedder = Callable[[str], np.ndarray]

DEFAULT_POIGNANCY = 10.0


class NoPath(Exception):
    pass


@dataclass(frozen=True)
class MemoryRecord:
    id: int
    kind: str
    text: str
    embedding: np.ndarray = field(repr=False, compare=False)
    created_at: datetime
    poignancy: float = DEFAULT_POIGNANCY

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "text": self.text,
                "created_at": self.created_at.isoformat(sep=" "), "poignancy": self.poignancy}


@dataclass(frozen=True)
class RetrievalWeights:
    w_sim: float = 1.0
    w_rec: float = 1.0
    w_poi: float = 1.0

    def __post_init__(self):
        if min(self.w_sim, self.w_rec, self.w_poi) < 0:
            raise ValueError("retrieval weights must be non-negative")
        if self.w_sim + self.w_rec + self.w_poi <= 0:
            raise ValueError("retrieval weights must not all be zero")


def hours_between(earlier: datetime, later: datetime) -> float:
    return (later - earlier).total_seconds() / 3600.0


def score(record: MemoryRecord, query_embedding: np.ndarray, now: datetime,
          weights: RetrievalWeights = RetrievalWeights(), recency: Optional[float] = None) -> float:
    """Weighted mean of rescaled cosine, recency and poignancy, each in [0, 1].

    ``recency`` overrides the default ``exp(-hours)`` decay; the literal
    growth mode precomputes it per query.
    """
    sim = (float(np.dot(record.embedding, query_embedding)) + 1.0) / 2.0
    sim = min(max(sim, 0.0), 1.0)
    if recency is None:
        recency = math.exp(-max(hours_between(record.created_at, now), 0.0))
    poignancy = record.poignancy / DEFAULT_POIGNANCY
    total = weights.w_sim + weights.w_rec + weights.w_poi
    return (weights.w_sim * sim + weights.w_rec * recency + weights.w_poi * poignancy) / total


class LongTermMemory:
    """Flat in-memory vector store with exhaustive scoring."""

    def __init__(self, embedder: Embedder, weights: RetrievalWeights = RetrievalWeights(),
                 growing_recency: bool = False):
        self.embedder = embedder
        self.weights = weights
        self.growing_recency = growing_recency
        self.records: list[MemoryRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def store(self, text: str, kind: str, now: datetime,
              poignancy: float = DEFAULT_POIGNANCY) -> MemoryRecord:
        if not text or not text.strip():
            raise ValueError("cannot store an empty memory")
        record = MemoryRecord(len(self.records), kind, text, self.embedder(text), now, poignancy)
        self.records.append(record)
        return record

    def _recencies(self, now: datetime) -> Optional[list[float]]:
        if not self.growing_recency:
            return None
        # exp(h) grows with age; min-max normalise so the component stays in [0, 1]
        raw = [math.exp(min(hours_between(r.created_at, now), 700.0)) for r in self.records]
        lo, hi = min(raw), max(raw)
        if hi == lo:
            return [1.0] * len(raw)
        return [(v - lo) / (hi - lo) for v in raw]

    def scored(self, query_embedding: np.ndarray, now: datetime,
               weights: Optional[RetrievalWeights] = None) -> list[tuple[float, MemoryRecord]]:
        weights = weights or self.weights
        recencies = self._recencies(now)
        return [
            (score(r, query_embedding, now, weights, None if recencies is None else recencies[i]), r)
            for i, r in enumerate(self.records)
        ]

    def retrieve(self, query: str, k: int, now: datetime,
                 weights: Optional[RetrievalWeights] = None) -> list[MemoryRecord]:
        """Top ``k`` records by score; ties go to the more recent record."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.records:
            return []
        ranked = self.scored(self.embedder(query), now, weights)
        ranked.sort(key=lambda pair: (-pair[0], -pair[1].id))
        return [r for _, r in ranked[:k]]

    def recent(self, kind: str, n: int) -> list[MemoryRecord]:
        return [r for r in self.records if r.kind == kind][-n:]

    def dump(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


SHORT_TERM_KEYS = ("name", "personality", "world_context", "current_plan", "goals",
                   "action_queue", "last_observations")


class ShortTermMemory(dict):
    """Always-available key/value facts about the agent."""

    def __init__(self, **values):
        unknown = set(values) - set(SHORT_TERM_KEYS)
        if unknown:
            raise KeyError(f"unknown short-term keys {sorted(unknown)}")
        super().__init__({k: None for k in SHORT_TERM_KEYS})
        self["action_queue"] = []
        self.update(values)


@dataclass
class SpatialMemory:
    height: int
    width: int
    position: Optional[Position] = None
    orientation: Orientation = Orientation.N
    known_tiles: dict = field(default_factory=dict)
    known_trees: dict = field(default_factory=dict)

    def observe(self, tiles: dict, trees=()) -> None:
        self.known_tiles.update(tiles)
        for summary in trees:
            self.known_trees[summary.tree_id] = summary

    def update_pose(self, position: Optional[Position], orientation: Orientation) -> None:
        self.position = position
        self.orientation = orientation

    def passable(self, p) -> bool:
        return (0 <= p[0] < self.height and 0 <= p[1] < self.width
                and self.known_tiles.get(p) != CellKind.WALL)

    def explored_fraction(self) -> float:
        return len(self.known_tiles) / float(self.height * self.width)

    def bfs_distances(self, start: Position) -> dict:
        dist = {start: 0}
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for o in Orientation:
                dr, dc = o.delta
                nxt = Position(cur.row + dr, cur.col + dc)
                if nxt not in dist and self.passable(nxt):
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
        return dist

    def tile_path(self, start: Position, goal: Position) -> list[Position]:
        """Shortest 4-neighbour tile sequence excluding ``start``."""
        start, goal = Position(*start), Position(*goal)
        if start == goal:
            return []
        if not self.passable(goal):
            raise NoPath(f"{goal} is not reachable")
        parent = {start: None}
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            if cur == goal:
                break
            # N, E, S, W expansion order keeps paths deterministic
            for o in Orientation:
                dr, dc = o.delta
                nxt = Position(cur.row + dr, cur.col + dc)
                if nxt not in parent and self.passable(nxt):
                    parent[nxt] = cur
                    queue.append(nxt)
        if goal not in parent:
            raise NoPath(f"{goal} is not reachable from {start}")
        tiles = []
        node = goal
        while node != start:
            tiles.append(node)
            node = parent[node]
        return tiles[::-1]


def turns_between(current: Orientation, wanted: Orientation) -> list[Move]:
    order = list(Orientation)
    diff = (order.index(wanted) - order.index(current)) % 4
    return {0: [], 1: [Move.TURN_RIGHT], 2: [Move.TURN_RIGHT, Move.TURN_RIGHT],
            3: [Move.TURN_LEFT]}[diff]


def moves_for_tiles(start: Position, orientation: Orientation, tiles: list) -> list[Move]:
    moves = []
    cur = start
    for nxt in tiles:
        wanted = Orientation.facing(nxt[0] - cur[0], nxt[1] - cur[1])
        moves.extend(turns_between(orientation, wanted))
        moves.append(Move.FORWARD)
        orientation = wanted
        cur = nxt
    return moves


def path(spatial: SpatialMemory, start, goal) -> list[Move]:
    """Turn/Forward primitives from ``start`` (facing the current orientation) to ``goal``."""
    tiles = spatial.tile_path(Position(*start), Position(*goal))
    return moves_for_tiles(Position(*start), spatial.orientation, tiles)
