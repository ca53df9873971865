"""Episode orchestration: turns, action execution, bots, clock and termination."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Callable, Optional, Union

from . import substrate as sb
from .cognition import (AgentProfile, CognitionConfig, Explore, GenerativeAgent, GoTo,
                        HighLevelAction, Immobilize, StayPut, sort_by_proximity)
from .episode_log import FORMAT_VERSION, EpisodeLog
from .llm import HashEmbedder, Router
from .memory import LongTermMemory, NoPath, SpatialMemory, moves_for_tiles, turns_between
from .scenarios import ScenarioConfig
from .substrate import EntityKind, GridState, Move, Orientation, Position, Terminal, WorldEvent
from .textifier import (compose_report, diff_events, in_window, tree_summaries,
                        window_bounds)

log = logging.getLogger(__name__)

ZAP = "Zap"
_KINDS = {int(k): k for k in sb.CellKind}
_BOT_WALK = (Move.FORWARD, Move.BACK, Move.STEP_LEFT, Move.STEP_RIGHT, Move.TURN_LEFT, Move.TURN_RIGHT)
_RELATIVE = {0: Move.FORWARD, 1: Move.STEP_RIGHT, 2: Move.BACK, 3: Move.STEP_LEFT}


def schedule_tick(focal_moves: int, bots) -> list[str]:
    """Bots due after the ``focal_moves``-th focal primitive move."""
    if focal_moves > 0 and focal_moves % 2 == 0:
        return list(bots)
    return []


class Scheduler:
    """Bots move once for every two focal primitive moves."""

    def __init__(self, bots=()):
        self.bots = list(bots)
        self.focal_moves = 0
        self.bot_moves = {b: 0 for b in self.bots}

    def tick(self) -> list[str]:
        self.focal_moves += 1
        due = schedule_tick(self.focal_moves, self.bots)
        for b in due:
            self.bot_moves[b] += 1
        return due


def _relative_move(orientation: Orientation, direction: Orientation) -> Move:
    order = list(Orientation)
    return _RELATIVE[(order.index(direction) - order.index(orientation)) % 4]


def bot_choice(state: GridState, bot_id: str, p_attack: float = 0.5) -> Union[Move, str]:
    """Greedy bot: chase the nearest visible apple, else zap or wander."""
    bot = state.entity(bot_id)
    rows, cols = window_bounds(state, bot.position)
    apples = {Position(r, c) for r in rows for c in cols if state.kinds[r, c] == sb.CellKind.APPLE}
    if apples:
        blocked = state.occupied() - {bot.position}
        first = {bot.position: None}
        frontier = [bot.position]
        while frontier:
            reached = sorted(p for p in frontier if p in apples)
            if reached:
                return _relative_move(bot.orientation, first[reached[0]])
            nxt = []
            for cur in frontier:
                for o in Orientation:
                    dr, dc = o.delta
                    q = Position(cur.row + dr, cur.col + dc)
                    if (q in first or not state.in_bounds(q) or state.kind(q) == sb.CellKind.WALL
                            or q in blocked):
                        continue
                    first[q] = first[cur] or o
                    nxt.append(q)
            frontier = nxt
    if state.rng.random() < p_attack:
        return ZAP
    return _BOT_WALK[int(state.rng.integers(len(_BOT_WALK)))]


def bot_step(state: GridState, bot_id: str, p_attack: float = 0.5) -> list[WorldEvent]:
    bot = state.entity(bot_id)
    if not bot.active:
        return sb.skip_move(state, bot_id)
    choice = bot_choice(state, bot_id, p_attack)
    if choice == ZAP:
        return sb.fire_zap(state, bot_id)
    return sb.move_entity(state, bot_id, choice)


def firing_positions(state: GridState, target: Position) -> list[tuple[Position, Orientation]]:
    """Tiles and facings whose beam covers ``target``."""
    reach = state.config.beam_length + state.config.beam_width
    out = []
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            p = Position(target.row + dr, target.col + dc)
            if not state.in_bounds(p) or state.kind(p) == sb.CellKind.WALL:
                continue
            for o in Orientation:
                if target in sb.beam_tiles(state, p, o):
                    out.append((p, o))
    return out


@dataclass
class ActionOutcome:
    moves: list = field(default_factory=list)
    status: str = "completed"


class Episode:
    """One simulation of a scenario with a given completion router and embedder."""

    def __init__(self, scenario: ScenarioConfig, llm: Router, embedder=None,
                 seed: Optional[int] = None, log_prompts: bool = True,
                 provider_label: str = ""):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.llm = llm
        self.embedder = embedder or HashEmbedder()
        self.log_prompts = log_prompts
        self.state = sb.load_map(scenario.map, scenario.world_config(), seed=self.seed,
                                 start=scenario.clock_start)
        self.increment = timedelta(hours=scenario.clock_increment_hours)
        self.log = EpisodeLog()
        self.scheduler = Scheduler(scenario.bots)
        self.focal = scenario.agent_names
        self.pending: dict[str, list[str]] = {n: [] for n in self.focal}
        self.last_action: dict[str, Optional[str]] = {n: None for n in self.focal}
        self.terminal: Optional[Terminal] = None
        roster = ([{"id": n, "kind": EntityKind.LLM_AGENT.value} for n in self.focal]
                  + [{"id": b, "kind": EntityKind.BOT.value} for b in scenario.bots])
        self._record("Header", {
            "format": FORMAT_VERSION,
            "scenario": scenario.to_dict(),
            "seed": self.seed,
            "roster": roster,
            "provider": provider_label,
            "models": dict(llm.models),
        })
        for entry in roster:
            self._events(sb.spawn_entity(self.state, entry["id"], EntityKind(entry["kind"])))
        names = [e["id"] for e in roster]
        cog = CognitionConfig(**scenario.cognition)
        self.agents: dict[str, GenerativeAgent] = {}
        for spec in scenario.agents:
            profile = AgentProfile(spec.name, spec.personality, knowledge=list(scenario.knowledge))
            agent = GenerativeAgent(
                profile, llm, LongTermMemory(self.embedder),
                SpatialMemory(self.state.height, self.state.width), entity_names=names,
                config=cog, trace=self._trace)
            self.agents[spec.name] = agent
            self._observe(spec.name)

    # -- logging -----------------------------------------------------------

    def _record(self, kind: str, payload: dict) -> None:
        st = self.state
        self.log.append(kind, payload, t=st.clock, step=st.step, round=st.round)

    def _trace(self, kind: str, payload: dict) -> None:
        if not self.log_prompts and kind in ("Prompt", "Response"):
            return
        self._record(kind, payload)

    def _events(self, events: list[WorldEvent]) -> None:
        for ev in events:
            payload = ev.to_dict()
            kind = payload.pop("kind")
            self.log.append(kind, payload, t=ev.time, step=ev.step, round=self.state.round)
        for name in self.focal:
            if name in self.state.entities:
                self.pending[name].extend(diff_events(events, name, self.state))

    # -- perception helpers -------------------------------------------------

    def _observe(self, name: str) -> None:
        ent = self.state.entity(name)
        spatial = self.agents[name].spatial
        spatial.update_pose(ent.position, ent.orientation)
        if not ent.active:
            return
        rows, cols = window_bounds(self.state, ent.position)
        block = self.state.kinds[rows.start:rows.stop, cols.start:cols.stop].tolist()
        spatial.observe({Position(r, c): _KINDS[block[i][j]]
                         for i, r in enumerate(rows) for j, c in enumerate(cols)},
                        tree_summaries(self.state, name))

    # -- world stepping -----------------------------------------------------

    def tick(self, name: str, move: Union[Move, str, None]) -> list[WorldEvent]:
        """One focal primitive move followed by due bots, regrowth and respawn."""
        st = self.state
        if move is None:
            events = sb.skip_move(st, name)
        elif move == ZAP:
            events = sb.fire_zap(st, name)
        else:
            events = sb.move_entity(st, name, move)
        for bot in self.scheduler.tick():
            events += bot_step(st, bot, self.scenario.bot_attack_probability)
        events += sb.regrowth_step(st)
        events += sb.respawn_tick(st)
        self._events(events)
        for ev in events:
            if ev.kind == "AttackHit" and ev.target in self.agents:
                self.agents[ev.target].interrupted()
        if st.entity(name).active:
            self._observe(name)
        if st.apple_count() == 0:
            self.terminal = Terminal.APPLES_EXHAUSTED
        return events

    def _run_moves(self, name: str, moves: list, outcome: ActionOutcome,
                   stop: Optional[Callable[[], bool]] = None) -> bool:
        """Perform primitives with one retry on blocking; False when the action must end."""
        queue = deque(moves)
        blocked = 0
        seen = len(self.pending[name])
        while queue:
            if stop is not None and stop():
                return True
            move = queue[0]
            events = self.tick(name, move)
            outcome.moves.append(move.value if isinstance(move, Move) else move)
            if not self.state.entity(name).active:
                outcome.status = "removed"
                return False
            if self.terminal is not None:
                outcome.status = "terminal"
                return False
            if any(e.kind == "MoveBlocked" and e.entity == name for e in events):
                blocked += 1
                if blocked >= 2:
                    outcome.status = "blocked"
                    return False
                continue
            blocked = 0
            queue.popleft()
            if self.scenario.react_during_actions and queue and len(self.pending[name]) > seen:
                seen = len(self.pending[name])
                if self._reacts_mid_action(name):
                    outcome.status = "interrupted"
                    return False
        return True

    def _reacts_mid_action(self, name: str) -> bool:
        agent = self.agents[name]
        report = compose_report(self.state, name, self.last_action[name], self.pending[name])
        kept = sort_by_proximity(report.current_lines, report.position,
                                 agent.config.attention_bandwidth)
        agent.now = self.state.clock
        _, change = agent.should_react(kept, self.pending[name])
        return change

    def execute(self, action: HighLevelAction, name: str) -> ActionOutcome:
        outcome = ActionOutcome()
        ent = self.state.entity(name)
        spatial = self.agents[name].spatial
        try:
            if isinstance(action, StayPut):
                self._run_moves(name, [Move.NOOP], outcome)
            elif isinstance(action, GoTo):
                tiles = spatial.tile_path(ent.position, action.at)
                self._follow(name, tiles, outcome)
            elif isinstance(action, Explore):
                target = Position(*action.at)
                tiles = spatial.tile_path(ent.position, target)
                self._follow(name, tiles, outcome,
                             stop=lambda: in_window(self.state, self.state.entity(name).position, target))
            elif isinstance(action, Immobilize):
                self._immobilize(name, action, outcome)
        except NoPath as exc:
            log.info("%s: %s aborted: %s", name, action, exc)
            outcome.status = "no_path"
        if not outcome.moves and self.terminal is None and self.state.entity(name).active:
            # every turn advances the world by at least one tick
            self._run_moves(name, [Move.NOOP], outcome)
        return outcome

    def _follow(self, name: str, tiles: list, outcome: ActionOutcome, stop=None) -> bool:
        for tile in tiles:
            ent = self.state.entity(name)
            if stop is not None and stop():
                return True
            moves = moves_for_tiles(ent.position, ent.orientation, [tile])
            if not self._run_moves(name, moves, outcome, stop):
                return False
        return True

    def _immobilize(self, name: str, action: Immobilize, outcome: ActionOutcome) -> None:
        ent = self.state.entity(name)
        spatial = self.agents[name].spatial
        dist = spatial.bfs_distances(ent.position)
        options = [(dist[p], p, list(Orientation).index(o), o)
                   for p, o in firing_positions(self.state, Position(*action.at)) if p in dist]
        if not options:
            raise NoPath(f"no firing position for {tuple(action.at)}")
        _, spot, _, facing = min(options)
        tiles = spatial.tile_path(ent.position, spot)
        if not self._follow(name, tiles, outcome):
            return
        ent = self.state.entity(name)
        if ent.position != spot:
            outcome.status = "blocked"
            return
        self._run_moves(name, turns_between(ent.orientation, facing) + [ZAP], outcome)

    # -- turns and rounds ---------------------------------------------------

    def run_turn(self, name: str) -> None:
        agent = self.agents[name]
        self._observe(name)
        report = compose_report(self.state, name, self.last_action[name], self.pending[name])
        self.pending[name] = []
        action = agent.turn(report)
        if action is None:
            self.tick(name, None)
            return
        self._record("Decision", {"agent": name, "action": str(action)})
        outcome = self.execute(action, name)
        agent.action_completed()
        self.last_action[name] = str(action)
        self._record("ActionCompleted", {"agent": name, "action": str(action),
                                         "status": outcome.status, "moves": outcome.moves})

    def _snapshot(self) -> dict:
        st = self.state
        return {
            "rewards": {e.id: e.cumulative_reward for e in st.entities.values()},
            "apples": st.apple_count(),
            "state_hash": st.state_hash(),
            "focal_moves": self.scheduler.focal_moves,
            "bot_moves": dict(self.scheduler.bot_moves),
        }

    def run(self) -> EpisodeLog:
        st = self.state
        self.terminal = sb.is_terminal(st)
        while self.terminal is None:
            for name in self.focal:
                self.run_turn(name)
                if self.terminal is not None:
                    break
            if self.terminal is not None:
                break
            st.round += 1
            st.clock += self.increment
            self._record("RoundCompleted", self._snapshot())
            self.terminal = sb.is_terminal(st)
        for name, agent in self.agents.items():
            self._record("MemoryDump", {"agent": name, "records": agent.memory.dump()})
        snapshot = self._snapshot()
        snapshot.update({"reason": self.terminal.value, "rounds": st.round,
                         "digest": self.log.digest()})
        self._record("EpisodeEnd", snapshot)
        return self.log


def run_episode(scenario: ScenarioConfig, llm: Router, embedder=None, seed: Optional[int] = None,
                **kwargs) -> EpisodeLog:
    return Episode(scenario, llm, embedder, seed, **kwargs).run()
