"""Append-only episode log (one JSON object per line) and replay verification."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from .substrate import (CellKind, EntityKind, EntityState, GridState, Orientation, Position,
                        WorldConfig, load_map)
from .textifier import TIME_FORMAT

FORMAT_VERSION = 1
WORLD_EVENT_KINDS = frozenset({
    "Spawned", "Moved", "MoveBlocked", "Noop", "AppleTaken", "AppleGrew", "GrassDisappeared",
    "GrassGrew", "AttackAttempted", "AttackHit", "MoveSkipped", "Respawned", "RespawnDeferred",
})


class LogError(Exception):
    pass


class ReplayError(LogError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class EpisodeLog:
    """Ordered records ``{t, step, round, kind, payload}``; the first is the header."""

    def __init__(self, records: Optional[list] = None):
        self.records: list[dict] = list(records or [])
        self._digest = hashlib.sha256()
        for r in self.records:
            self._digest.update((dumps(r) + "\n").encode())

    def append(self, kind: str, payload: dict, *, t: datetime, step: int, round: int) -> dict:
        record = {"t": t.strftime(TIME_FORMAT), "step": step, "round": round,
                  "kind": kind, "payload": payload}
        self.records.append(record)
        self._digest.update((dumps(record) + "\n").encode())
        return record

    def digest(self) -> str:
        return self._digest.hexdigest()

    @property
    def header(self) -> dict:
        if not self.records or self.records[0]["kind"] != "Header":
            raise LogError("log has no header")
        return self.records[0]["payload"]

    @property
    def end(self) -> Optional[dict]:
        if self.records and self.records[-1]["kind"] == "EpisodeEnd":
            return self.records[-1]
        return None

    def of_kind(self, *kinds: str) -> Iterator[dict]:
        return (r for r in self.records if r["kind"] in kinds)

    def world_events(self) -> Iterator[dict]:
        return (r for r in self.records if r["kind"] in WORLD_EVENT_KINDS)

    def text(self) -> str:
        return "".join(dumps(r) + "\n" for r in self.records)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.text(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "EpisodeLog":
        records = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise LogError(f"{path}:{n}: not a JSON record ({exc})") from None
        return cls(records)


def initial_state(header: dict) -> GridState:
    scenario = header["scenario"]
    config = WorldConfig(**scenario["world"])
    start = datetime.strptime(scenario["clock_start"], TIME_FORMAT)
    return load_map(scenario["map"], config, seed=header["seed"], start=start)


def roster_kinds(header: dict) -> dict:
    return {e["id"]: EntityKind(e["kind"]) for e in header["roster"]}


def _pos(payload) -> Position:
    return Position(*payload["position"])


class Replayer:
    """Folds world events over the initial state, checking each for consistency."""

    def __init__(self, header: dict, on_round: Optional[Callable[[GridState, dict], None]] = None):
        self.state = initial_state(header)
        self.kinds = roster_kinds(header)
        self.increment = timedelta(hours=header["scenario"]["clock_increment_hours"])
        self.on_round = on_round

    def fail(self, record: dict, why: str):
        raise ReplayError(f"step {record['step']} {record['kind']}: {why}")

    def _active(self, record: dict, name: str) -> EntityState:
        ent = self.state.entities.get(name)
        if ent is None:
            self.fail(record, f"unknown entity {name}")
        if not ent.active:
            self.fail(record, f"{name} is out of the game")
        return ent

    def apply(self, record: dict) -> None:
        kind, p = record["kind"], record["payload"]
        st = self.state
        st.step = record["step"]
        if kind == "Spawned":
            if p["entity"] in st.entities:
                self.fail(record, "duplicate spawn")
            pos = _pos(p)
            if st.kind(pos) == CellKind.WALL or pos in st.occupied():
                self.fail(record, "spawn on a blocked tile")
            st.entities[p["entity"]] = EntityState(p["entity"], self.kinds[p["entity"]], pos,
                                                   Orientation(p["orientation"]))
        elif kind == "Moved":
            ent = self._active(record, p["entity"])
            pos = _pos(p)
            if abs(pos.row - ent.position.row) + abs(pos.col - ent.position.col) > 1:
                self.fail(record, "move is not to an adjacent tile")
            if pos != ent.position and (st.kind(pos) == CellKind.WALL or pos in st.occupied()):
                self.fail(record, "move into a blocked tile")
            facing = Orientation(p["orientation"])
            if pos != ent.position and facing != ent.orientation:
                self.fail(record, "a step must keep the orientation")
            if pos == ent.position and facing not in (ent.orientation.turned(1),
                                                      ent.orientation.turned(-1)):
                self.fail(record, "a turn must be a quarter turn")
            ent.position = pos
            ent.orientation = facing
        elif kind in ("MoveBlocked", "Noop"):
            ent = self._active(record, p["entity"])
            if _pos(p) != ent.position:
                self.fail(record, "position disagrees with the replayed state")
            if "orientation" in p and Orientation(p["orientation"]) != ent.orientation:
                self.fail(record, "orientation disagrees with the replayed state")
        elif kind == "AppleTaken":
            ent = self._active(record, p["entity"])
            pos = _pos(p)
            if ent.position != pos or st.kind(pos) != CellKind.APPLE:
                self.fail(record, "no apple under the entity")
            st.kinds[pos] = CellKind.GRASS
            ent.cumulative_reward += 1.0
        elif kind in ("AppleGrew", "GrassDisappeared", "GrassGrew"):
            before, after = {"AppleGrew": (CellKind.GRASS, CellKind.APPLE),
                             "GrassDisappeared": (CellKind.GRASS, CellKind.BARE),
                             "GrassGrew": (CellKind.BARE, CellKind.GRASS)}[kind]
            pos = _pos(p)
            if st.kind(pos) != before:
                self.fail(record, f"expected {before.name} at {list(pos)}")
            st.kinds[pos] = after
        elif kind == "AttackAttempted":
            ent = self._active(record, p["entity"])
            if _pos(p) != ent.position or Orientation(p["orientation"]) != ent.orientation:
                self.fail(record, "shooter pose disagrees")
        elif kind == "AttackHit":
            self._active(record, p["entity"])
            target = self._active(record, p["target"])
            if target.position != _pos(p):
                self.fail(record, "target position disagrees")
            target.position = None
            target.removed_until = 0
        elif kind == "MoveSkipped":
            ent = st.entities.get(p["entity"])
            if ent is None or ent.active:
                self.fail(record, "skipped move of an active entity")
        elif kind == "Respawned":
            ent = st.entities.get(p["entity"])
            pos = _pos(p)
            if ent is None or ent.active:
                self.fail(record, "respawn of an active entity")
            if pos not in st.spawn_tiles or pos in st.occupied():
                self.fail(record, "respawn outside a free spawn tile")
            ent.position = pos
            ent.orientation = Orientation(p["orientation"])
            ent.removed_until = None
        elif kind == "RoundCompleted":
            st.round += 1
            st.clock += self.increment
            expected = p.get("state_hash")
            if expected is not None and expected != st.state_hash():
                self.fail(record, f"state hash mismatch after round {st.round}")
            if self.on_round:
                self.on_round(st, record)


@dataclass
class Verification:
    ok: bool
    message: str
    state: Optional[GridState] = None
    rounds: list = field(default_factory=list)


def replay(log: EpisodeLog, on_round=None) -> GridState:
    rep = Replayer(log.header, on_round)
    for record in log.records[1:]:
        rep.apply(record)
    return rep.state


def verify(log: EpisodeLog, on_round=None) -> Verification:
    """Check completeness, content digest and the refolded state hash."""
    try:
        header = log.header
    except LogError as exc:
        return Verification(False, str(exc))
    if header.get("format") != FORMAT_VERSION:
        return Verification(False, f"unsupported log format {header.get('format')!r}")
    end = log.end
    if end is None:
        return Verification(False, "log is truncated: no EpisodeEnd record")
    body = EpisodeLog(log.records[:-1])
    if body.digest() != end["payload"].get("digest"):
        return Verification(False, "content digest mismatch: log was modified")
    try:
        state = replay(EpisodeLog(log.records[:-1]), on_round)
    except (ReplayError, KeyError, ValueError, TypeError) as exc:
        return Verification(False, f"replay failed: {exc}")
    if state.state_hash() != end["payload"]["state_hash"]:
        return Verification(False, "final state hash mismatch", state)
    return Verification(True, f"verified {state.round} rounds, final hash {state.state_hash()[:16]}",
                        state)
