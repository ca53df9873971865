"""Perceive, react, plan, reflect and act for language-model driven agents."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from typing import Callable, Optional, Union

from .llm import ProviderError
from .memory import LongTermMemory, MemoryRecord, ShortTermMemory, SpatialMemory
from .substrate import Position
from .textifier import ObservationLine, ObservationReport, format_time

log = logging.getLogger(__name__)

PROMPT_IDS = ("react", "plan", "reflect_questions", "reflect_insights", "act")


def _load_prompt(name: str) -> str:
    return resources.files("commons_sim").joinpath(f"data/prompts/{name}.txt").read_text()


PROMPTS: dict[str, str] = {name: _load_prompt(name) for name in PROMPT_IDS}
WORLD_CONTEXT = resources.files("commons_sim").joinpath("data/world_context.txt").read_text()

VALID_ACTIONS_TEXT = "\n".join([
    "- immobilize player (player_name) at (x, y): fire a ray beam at the player standing at (x, y).",
    "- go to position (x, y): walk to the given position.",
    "- stay put: stay at the current position for one turn.",
    "- explore (x, y): walk towards (x, y) until it comes into view.",
])


class PromptError(ValueError):
    pass


class ParseFailure(ValueError):
    pass


class NoMatch(ValueError):
    pass


_PLACEHOLDER = re.compile(r"<input(\d+)>")


def placeholders(body: str) -> set[int]:
    return {int(n) for n in _PLACEHOLDER.findall(body)}


def render_template(body: str, bindings: dict) -> str:
    """Replace every ``<inputN>`` with ``bindings[N]``."""
    missing = sorted(placeholders(body) - set(bindings))
    if missing:
        raise PromptError(f"unbound template inputs: {missing}")
    return _PLACEHOLDER.sub(lambda m: str(bindings[int(m.group(1))]), body)


_FENCE = re.compile(r"```json[ \t]*\n?(.*?)(?:```|''')", re.S | re.I)


def _strip_comments(block: str) -> str:
    # drop `\\ comment` tails that sit outside string literals
    out_lines = []
    for line in block.splitlines():
        in_str = escaped = False
        cut = len(line)
        for i, ch in enumerate(line):
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif line.startswith("\\\\", i):
                cut = i
                break
        out_lines.append(line[:cut].rstrip())
    return "\n".join(out_lines)


def parse_fenced_json(text: str) -> dict:
    """Parse the first ```json block, closed by ``` or '''."""
    m = _FENCE.search(text)
    if not m:
        raise ParseFailure("no ```json block found")
    block = _strip_comments(m.group(1))
    block = re.sub(r",(\s*[}\]])", r"\1", block)
    try:
        data = json.loads(block)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseFailure("JSON block is not an object")
    return data


@dataclass(frozen=True)
class Immobilize:
    player: str
    at: Position

    def __str__(self) -> str:
        return f"immobilize player {self.player} at ({self.at[0]}, {self.at[1]})"


@dataclass(frozen=True)
class GoTo:
    at: Position

    def __str__(self) -> str:
        return f"go to position ({self.at[0]}, {self.at[1]})"


@dataclass(frozen=True)
class StayPut:
    def __str__(self) -> str:
        return "stay put"


@dataclass(frozen=True)
class Explore:
    at: Position

    def __str__(self) -> str:
        return f"explore ({self.at[0]}, {self.at[1]})"


HighLevelAction = Union[Immobilize, GoTo, StayPut, Explore]

_XY = r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)"
_GRAMMARS = [
    (re.compile(r"immobilize\s+player\s+\(?\s*([^\s()]+?)\s*\)?\s+at\s*" + _XY, re.I),
     lambda m: Immobilize(m.group(1), Position(int(m.group(2)), int(m.group(3))))),
    (re.compile(r"go\s+to(?:\s+position)?\s*" + _XY, re.I),
     lambda m: GoTo(Position(int(m.group(1)), int(m.group(2))))),
    (re.compile(r"stay\s+put", re.I), lambda m: StayPut()),
    (re.compile(r"explore\s*" + _XY, re.I),
     lambda m: Explore(Position(int(m.group(1)), int(m.group(2))))),
]


def parse_action(text: str) -> HighLevelAction:
    if not isinstance(text, str):
        raise NoMatch(f"not text: {text!r}")
    cleaned = text.strip().strip("`'\"").strip().rstrip(".").strip()
    for rx, build in _GRAMMARS:
        m = rx.fullmatch(cleaned)
        if m:
            return build(m)
    raise NoMatch(f"not a valid action: {text!r}")


def _distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def sort_by_proximity(lines: list, position, bandwidth: int = 10) -> list:
    """Nearest ``bandwidth`` lines; ties keep row-major order."""
    def key(line: ObservationLine):
        p = line.subject_position
        if p is None:
            return (math.inf, math.inf, math.inf)
        return (_distance(p, position), p[0], p[1])

    return sorted(lines, key=key)[:bandwidth]


@dataclass
class AgentProfile:
    name: str
    personality: str = ""
    world_context: str = WORLD_CONTEXT
    knowledge: list = field(default_factory=list)

    @property
    def bio(self) -> str:
        return "\n".join(part for part in [self.personality, *self.knowledge] if part)


@dataclass
class Plan:
    goals: str
    plan: str
    created_at: datetime


@dataclass
class CognitionConfig:
    attention_bandwidth: int = 10
    reflection_threshold: int = 30
    retrieval_k: int = 10
    retries: int = 3
    recent_reflections: int = 10
    previous_actions: int = 5
    questions: int = 3


LlmCall = Callable[[str, str], str]
Trace = Callable[[str, dict], None]


def _none_if_empty(lines) -> str:
    return "\n".join(lines) if lines else "None"


class GenerativeAgent:
    """One agent's cognitive loop over its three memories."""

    def __init__(self, profile: AgentProfile, llm: LlmCall, memory: LongTermMemory,
                 spatial: SpatialMemory, entity_names=(), config: Optional[CognitionConfig] = None,
                 trace: Optional[Trace] = None):
        self.profile = profile
        self.llm = llm
        self.memory = memory
        self.spatial = spatial
        self.entity_names = set(entity_names)
        self.config = config or CognitionConfig()
        self.trace = trace or (lambda kind, payload: None)
        self.short_term = ShortTermMemory(name=profile.name, personality=profile.bio,
                                          world_context=profile.world_context)
        self.plan: Optional[Plan] = None
        self.reflection_buffer: list[str] = []
        self.pending_reflections: list[list[str]] = []
        self.reflections_done = 0
        self.previous_actions: list[str] = []
        self.now: Optional[datetime] = None
        self.kept: list[ObservationLine] = []
        self.changes: list[str] = []

    @property
    def name(self) -> str:
        return self.profile.name

    # -- provider plumbing -------------------------------------------------

    def _ask(self, module: str, prompt: str, parse: Callable[[str], object]):
        """Query with up to ``retries`` attempts; ``None`` when all fail."""
        if placeholders(prompt):
            raise PromptError(f"{module} prompt has unreplaced placeholders")
        self.trace("Prompt", {"agent": self.name, "module": module, "text": prompt})
        for attempt in range(self.config.retries):
            try:
                raw = self.llm(module, prompt)
            except ProviderError as exc:
                log.warning("%s %s provider error: %s", self.name, module, exc)
                self.trace("ProviderError", {"agent": self.name, "module": module, "error": str(exc)})
                continue
            self.trace("Response", {"agent": self.name, "module": module, "text": raw})
            try:
                return parse(raw)
            except (ParseFailure, NoMatch, ValueError) as exc:
                log.info("%s %s attempt %d unusable: %s", self.name, module, attempt + 1, exc)
        log.warning("%s %s gave up after %d attempts", self.name, module, self.config.retries)
        self.trace("RetryExhausted", {"agent": self.name, "module": module,
                                      "attempts": self.config.retries})
        return None

    def _common(self) -> dict:
        return {1: self.name, 2: self.profile.world_context}

    def _observations(self, lines=None) -> str:
        lines = self.kept if lines is None else lines
        return _none_if_empty([ln.text for ln in lines])

    def _reflections_text(self) -> str:
        recent = self.memory.recent("reflection", self.config.recent_reflections)
        return _none_if_empty([r.text for r in recent])

    # -- modules -----------------------------------------------------------

    def perceive(self, report: ObservationReport) -> list[ObservationLine]:
        """Sort and truncate current observations, then store the report."""
        self.now = report.now
        self.changes = list(report.event_lines)
        if report.removed:
            self.kept = []
        else:
            self.kept = sort_by_proximity(report.current_lines, report.position,
                                          self.config.attention_bandwidth)
        trimmed = ObservationReport(report.last_action, report.event_lines, report.now,
                                    report.reward, report.position, report.orientation,
                                    self.kept, report.out_of_game_line)
        self.memory.store(trimmed.render(), "observation", report.now)
        self.short_term["last_observations"] = [ln.text for ln in self.kept]
        for line in self.kept:
            self.reflection_buffer.append(line.text)
            if len(self.reflection_buffer) == self.config.reflection_threshold:
                self.pending_reflections.append(self.reflection_buffer)
                self.reflection_buffer = []
        return self.kept

    def react_prompt(self, lines=None, changes=None) -> str:
        bindings = self._common()
        bindings.update({
            3: self._observations(lines),
            4: self.plan.plan if self.plan else "None",
            5: _none_if_empty([str(a) for a in self.short_term["action_queue"]]),
            6: self.profile.bio,
            7: format_time(self.now),
            8: _none_if_empty(self.changes if changes is None else changes),
        })
        return render_template(PROMPTS["react"], bindings)

    def should_react(self, lines=None, changes=None) -> tuple[str, bool]:
        def parse(raw):
            data = parse_fenced_json(raw)
            if not isinstance(data.get("Answer"), bool):
                raise ParseFailure("Answer must be a boolean")
            return str(data.get("Reasoning", "")), data["Answer"]

        result = self._ask("react", self.react_prompt(lines, changes), parse)
        return result if result is not None else ("", False)

    def make_plan(self, reason: str = "") -> Optional[Plan]:
        bindings = self._common()
        bindings.update({
            3: self._observations(),
            4: self.plan.plan if self.plan else "None",
            5: self._reflections_text(),
            6: reason or "There is no plan yet.",
            7: self.profile.bio,
            8: _none_if_empty(self.changes),
        })

        def parse(raw):
            data = parse_fenced_json(raw)
            if not data.get("Plan"):
                raise ParseFailure("missing Plan")
            return Plan(str(data.get("Goals", "")), str(data["Plan"]), self.now)

        plan = self._ask("plan", render_template(PROMPTS["plan"], bindings), parse)
        if plan is None:
            return self.plan
        self.plan = plan
        self.short_term["current_plan"] = plan.plan
        self.short_term["goals"] = plan.goals
        self.memory.store(plan.plan, "plan", self.now)
        return plan

    def reflect(self) -> list[MemoryRecord]:
        """Run every sealed batch of observations through both reflection stages."""
        stored = []
        while self.pending_reflections:
            batch = self.pending_reflections.pop(0)
            self.reflections_done += 1
            stored.extend(self._reflect_batch(batch))
        return stored

    def _reflect_batch(self, batch: list[str]) -> list[MemoryRecord]:
        bio = self.profile.bio
        q_bindings = {**self._common(), 3: "\n".join(batch), 4: bio}

        def parse_questions(raw):
            data = parse_fenced_json(raw)
            questions = []
            for i in range(1, self.config.questions + 1):
                item = data.get(f"Question_{i}")
                text = item.get("Question") if isinstance(item, dict) else item
                if isinstance(text, str) and text.strip():
                    questions.append(text.strip())
            if not questions:
                raise ParseFailure("no questions")
            return questions

        questions = self._ask("reflect_questions",
                              render_template(PROMPTS["reflect_questions"], q_bindings),
                              parse_questions)
        if questions is None:
            return []
        groups = []
        for i, q in enumerate(questions, 1):
            found = self.memory.retrieve(q, self.config.retrieval_k, self.now)
            statements = "\n".join("- " + r.text.replace("\n", " ") for r in found)
            groups.append(f"Group of memories {i} ({q}):\n{statements}")
        i_bindings = {**self._common(), 3: "\n\n".join(groups), 4: bio}

        def parse_insights(raw):
            data = parse_fenced_json(raw)
            keys = sorted((k for k in data if re.fullmatch(r"Insight_\d+", k)),
                          key=lambda k: int(k.split("_")[1]))
            insights = []
            for k in keys:
                item = data[k]
                text = item.get("Insight") if isinstance(item, dict) else item
                if isinstance(text, str) and text.strip():
                    insights.append(text.strip())
            return insights

        insights = self._ask("reflect_insights",
                             render_template(PROMPTS["reflect_insights"], i_bindings),
                             parse_insights) or []
        return [self.memory.store(text, "reflection", self.now) for text in insights]

    def act_prompt(self) -> str:
        trees = [s.describe() for _, s in sorted(self.spatial.known_trees.items())]
        pos = self.spatial.position
        bindings = self._common()
        bindings.update({
            3: self.plan.plan if self.plan else "None",
            4: self._reflections_text(),
            5: self._observations(),
            6: f"({pos[0]}, {pos[1]})" if pos is not None else "(unknown)",
            7: "1",
            8: VALID_ACTIONS_TEXT,
            9: self.plan.goals if self.plan else "None",
            10: self.profile.bio,
            11: "Known trees:\n" + _none_if_empty(trees),
            12: f"{100.0 * self.spatial.explored_fraction():.1f}% of the map",
            13: "Previous actions: " + (
                "; ".join(self.previous_actions[-self.config.previous_actions:]) or "None"),
            14: _none_if_empty(self.changes),
        })
        # the act prompt text hardcodes an example agent name
        body = PROMPTS["act"].replace("Laura", self.name)
        return render_template(body, bindings)

    def validate(self, action: HighLevelAction) -> HighLevelAction:
        at = getattr(action, "at", None)
        if at is not None and not (0 <= at[0] < self.spatial.height and 0 <= at[1] < self.spatial.width):
            raise NoMatch(f"position {tuple(at)} is out of bounds")
        if isinstance(action, Immobilize):
            if action.player not in self.entity_names or action.player == self.name:
                raise NoMatch(f"unknown player {action.player!r}")
        return action

    def decide_action(self) -> HighLevelAction:
        def parse(raw):
            data = parse_fenced_json(raw)
            return self.validate(parse_action(data.get("Answer")))

        action = self._ask("act", self.act_prompt(), parse)
        if action is None:
            self.trace("Fallback", {"agent": self.name, "module": "act", "action": "stay put"})
            action = StayPut()
        self.short_term["action_queue"] = [action]
        self.previous_actions.append(str(action))
        return action

    def turn(self, report: ObservationReport) -> Optional[HighLevelAction]:
        """Full pipeline for one turn; ``None`` when the agent is out of the game."""
        self.perceive(report)
        if report.removed:
            return None
        reason, change = self.should_react()
        if change or self.plan is None:
            self.make_plan(reason)
        if self.pending_reflections:
            self.reflect()
        return self.decide_action()

    def action_completed(self) -> None:
        self.short_term["action_queue"] = []

    def interrupted(self) -> None:
        self.short_term["action_queue"] = []
