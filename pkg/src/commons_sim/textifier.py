"""Natural-language rendering of grid state and world events."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from typing import Iterable, Optional

from .substrate import CellKind, GridState, Orientation, Position, WorldEvent

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"

TEMPLATES: dict[str, str] = json.loads(
    resources.files("commons_sim").joinpath("data/observation_templates.json").read_text()
)

_FIELD_PATTERNS = {
    "x": r"(?P<x>-?\d+)",
    "y": r"(?P<y>-?\d+)",
    "tree_id": r"(?P<tree_id>\d+)",
    "agent_name": r"(?P<agent_name>\S+)",
    "apples_number": r"(?P<apples_number>\d+)",
    "grass_number": r"(?P<grass_number>\d+)",
}


def _compile(template: str) -> re.Pattern:
    parts = re.split(r"\{(\w+)\}", template)
    rx = "".join(re.escape(p) if i % 2 == 0 else _FIELD_PATTERNS[p] for i, p in enumerate(parts))
    return re.compile(rx)


_PARSERS = {tid: _compile(t) for tid, t in TEMPLATES.items()}
_FIELDS = {tid: re.findall(r"\{(\w+)\}", t) for tid, t in TEMPLATES.items()}


class TemplateError(ValueError):
    pass


def format_time(t: datetime) -> str:
    return t.strftime(TIME_FORMAT)


def describe(kind: str, **args) -> str:
    """Fill one observation template; positions may be given as ``position``."""
    if kind not in TEMPLATES:
        raise TemplateError(f"unknown template {kind!r}")
    if "position" in args:
        pos = args.pop("position")
        args.setdefault("x", pos[0])
        args.setdefault("y", pos[1])
    missing = [f for f in _FIELDS[kind] if f not in args]
    if missing:
        raise TemplateError(f"template {kind!r} missing {missing}")
    return TEMPLATES[kind].format(**args)


def parse_line(text: str) -> tuple[str, dict]:
    """Inverse of :func:`describe`; integer fields are returned as ints."""
    matches = [(tid, m) for tid, rx in _PARSERS.items() if (m := rx.fullmatch(text))]
    if len(matches) != 1:
        raise TemplateError(f"line matches {len(matches)} templates: {text!r}")
    tid, m = matches[0]
    args = {k: (v if k == "agent_name" else int(v)) for k, v in m.groupdict().items()}
    return tid, args


@dataclass(frozen=True)
class ObservationLine:
    text: str
    subject_position: Optional[Position]
    kind: str


@dataclass(frozen=True)
class TreeSummary:
    tree_id: int
    anchor: Position
    apples: int
    grass: int

    def describe(self) -> str:
        return describe("tree", tree_id=self.tree_id, position=self.anchor,
                        apples_number=self.apples, grass_number=self.grass)


def window_bounds(state: GridState, center: Position) -> tuple[range, range]:
    cfg = state.config
    top = center.row - cfg.window_height // 2
    left = center.col - cfg.window_width // 2
    rows = range(max(top, 0), min(top + cfg.window_height, state.height))
    cols = range(max(left, 0), min(left + cfg.window_width, state.width))
    return rows, cols


def in_window(state: GridState, center: Position, p) -> bool:
    rows, cols = window_bounds(state, center)
    return p[0] in rows and p[1] in cols


def visible_window(state: GridState, agent_id: str) -> list:
    """Objects inside the agent's window as ``(object, Position)`` pairs.

    Objects are ``("agent", name)``, ``("apple", tree_id)``, ``("grass", tree_id)``
    and ``TreeSummary`` values (counted over the window only). A removed agent
    gets a single ``("out_of_game", attacker)`` marker with no position.
    """
    ent = state.entity(agent_id)
    if not ent.active:
        return [(("out_of_game", ent.attacked_by), None)]
    rows, cols = window_bounds(state, ent.position)
    others = {e.position: e.id for e in state.entities.values()
              if e.active and e.id != agent_id}
    found = []
    trees: dict[int, list[int]] = {}
    kinds = state.kinds[rows.start:rows.stop, cols.start:cols.stop].tolist()
    tree_of = state.tree_of[rows.start:rows.stop, cols.start:cols.stop].tolist()
    apple, grass = int(CellKind.APPLE), int(CellKind.GRASS)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            p = Position(r, c)
            if p in others:
                found.append((("agent", others[p]), p))
            kind = kinds[i][j]
            if kind == apple:
                tid = tree_of[i][j]
                found.append((("apple", tid), p))
                trees.setdefault(tid, [0, 0])[0] += 1
            elif kind == grass:
                tid = tree_of[i][j]
                found.append((("grass", tid), p))
                trees.setdefault(tid, [0, 0])[1] += 1
    for tid in sorted(trees):
        anchor = state.trees[tid].anchor
        found.append((TreeSummary(tid, anchor, *trees[tid]), anchor))
    return found


def observation_lines(state: GridState, agent_id: str) -> list[ObservationLine]:
    """Per-tile observation lines of the agent's window, in row-major order."""
    lines = []
    for obj, pos in visible_window(state, agent_id):
        if isinstance(obj, TreeSummary):
            continue
        kind, value = obj
        if kind == "out_of_game":
            continue
        if kind == "agent":
            text = describe("other_agent", agent_name=value, position=pos)
            kind = "other_agent"
        else:
            text = describe(kind, tree_id=value, position=pos)
        lines.append(ObservationLine(text, pos, kind))
    return lines


def tree_summaries(state: GridState, agent_id: str) -> list[TreeSummary]:
    return [obj for obj, _ in visible_window(state, agent_id) if isinstance(obj, TreeSummary)]


def _event_lines(ev: WorldEvent) -> list[tuple[str, Position]]:
    if ev.kind == "AppleTaken":
        return [(describe("apple_taken", agent_name=ev.entity, position=ev.position), ev.position)]
    if ev.kind == "AppleGrew":
        return [(describe("apple_grew", position=ev.position), ev.position)]
    if ev.kind == "GrassDisappeared":
        return [(describe("grass_disappeared", position=ev.position), ev.position)]
    if ev.kind == "GrassGrew":
        return [(describe("grass_grew", position=ev.position), ev.position)]
    if ev.kind == "AttackHit":
        return [(describe("someone_attacked", position=ev.position), ev.position)]
    if ev.kind == "AttackAttempted":
        return [(describe("ray_beam", position=t), t) for t in ev.tiles]
    return []


def diff_events(events: Iterable[WorldEvent], agent_id: str, state: GridState) -> list[str]:
    """Timestamped change lines for events visible to the agent.

    Visibility is judged against the agent's position in ``state``, so callers
    pass events as they happen to capture the window at each event's time.
    """
    ent = state.entity(agent_id)
    if not ent.active:
        return []
    out = []
    for ev in sorted(events, key=lambda e: e.time):
        if ev.kind == "AttackHit" and ev.target == agent_id:
            continue
        for text, pos in _event_lines(ev):
            if in_window(state, ent.position, pos):
                out.append(f"{text} At {format_time(ev.time)}")
    return out


@dataclass
class ObservationReport:
    last_action: str
    event_lines: list
    now: datetime
    reward: float
    position: Optional[Position]
    orientation: Orientation
    current_lines: list = field(default_factory=list)
    out_of_game_line: Optional[str] = None

    @property
    def removed(self) -> bool:
        return self.out_of_game_line is not None

    def render(self) -> str:
        if self.removed:
            return self.out_of_game_line
        parts = [
            f'I took the action "{self.last_action}" in my last turn. ',
            "Since then, the following changes in the environment have been observed: ",
            *self.event_lines,
            f"Now it's {format_time(self.now)} and the reward obtained by me is {float(self.reward)}. "
            f"I am  at the position ({self.position.row}, {self.position.col}) "
            f"looking to the {self.orientation.value}. ",
            "I can currently observe the following:",
            *(line.text for line in self.current_lines),
        ]
        return "\n".join(parts)


def compose_report(state: GridState, agent_id: str, last_action: Optional[str],
                   event_lines: list, current_lines: Optional[list] = None) -> ObservationReport:
    """Assemble an agent's turn report; current lines default to its full window."""
    ent = state.entity(agent_id)
    report = ObservationReport(
        last_action=last_action or "none",
        event_lines=list(event_lines),
        now=state.clock,
        reward=ent.cumulative_reward,
        position=ent.position,
        orientation=ent.orientation,
    )
    if not ent.active:
        if ent.attacked_by:
            report.out_of_game_line = describe("was_attacked", agent_name=ent.attacked_by)
        else:
            report.out_of_game_line = describe("out_of_game")
        return report
    report.current_lines = (list(current_lines) if current_lines is not None
                            else observation_lines(state, agent_id))
    return report
