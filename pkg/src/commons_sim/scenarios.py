"""Scenario configuration and the shipped scenario library."""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import yaml

from .substrate import DEFAULT_START, WorldConfig
from .textifier import TIME_FORMAT

DATA = resources.files("commons_sim").joinpath("data")


class ScenarioError(ValueError):
    pass


def _data_text(*parts: str) -> str:
    node = DATA
    for p in parts:
        node = node.joinpath(p)
    if not node.is_file():
        raise ScenarioError(f"missing data file {'/'.join(parts)}")
    lines = [ln for ln in node.read_text().splitlines() if not ln.startswith("#")]
    return "\n".join(lines).strip()


def map_text(map_id: str) -> str:
    return _data_text("maps", f"{map_id}.txt")


def personality_text(key: Optional[str], name: str) -> str:
    if not key or key == "none":
        return ""
    return _data_text("personalities", f"{key}.txt").replace("{name}", name)


def knowledge_text(key: str) -> str:
    return _data_text("knowledge", f"{key}.txt")


def available_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in DATA.joinpath("scenarios").iterdir() if p.name.endswith(".yaml"))


@dataclass
class AgentSpec:
    name: str
    personality_key: str = "none"
    personality: str = ""


@dataclass
class ScenarioConfig:
    id: str
    map_id: str
    map: str
    agents: list
    bots: list = field(default_factory=list)
    knowledge_keys: list = field(default_factory=list)
    knowledge: list = field(default_factory=list)
    seed: int = 0
    max_rounds: int = 100
    clock_start: datetime = DEFAULT_START
    clock_increment_hours: float = 1.0
    bot_attack_probability: float = 0.5
    world: dict = field(default_factory=dict)
    cognition: dict = field(default_factory=dict)
    react_during_actions: bool = True

    def __post_init__(self):
        if not self.agents:
            raise ScenarioError("a scenario needs at least one focal agent")
        names = [a.name for a in self.agents] + list(self.bots)
        if len(set(names)) != len(names):
            raise ScenarioError(f"entity names must be unique: {names}")
        if not 0.0 <= self.bot_attack_probability <= 1.0:
            raise ScenarioError("bot_attack_probability must lie in [0, 1]")
        if self.max_rounds < 1:
            raise ScenarioError("max_rounds must be >= 1")

    @property
    def agent_names(self) -> list[str]:
        return [a.name for a in self.agents]

    def world_config(self) -> WorldConfig:
        return WorldConfig(max_rounds=self.max_rounds, **self.world)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "map_id": self.map_id,
            "map": self.map,
            "agents": [{"name": a.name, "personality_key": a.personality_key,
                        "personality": a.personality} for a in self.agents],
            "bots": list(self.bots),
            "knowledge_keys": list(self.knowledge_keys),
            "knowledge": list(self.knowledge),
            "seed": self.seed,
            "max_rounds": self.max_rounds,
            "clock_start": self.clock_start.strftime(TIME_FORMAT),
            "clock_increment_hours": self.clock_increment_hours,
            "bot_attack_probability": self.bot_attack_probability,
            "world": self.world_config().to_dict(),
            "cognition": dict(self.cognition),
            "react_during_actions": self.react_during_actions,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        """Build from either a scenario file or a resolved (logged) config."""
        try:
            sid = data["id"]
            map_id = data.get("map_id", data.get("map", "default"))
            if "map_id" in data:
                map_str = data["map"]
            else:
                map_str = map_text(map_id)
            agents = []
            for a in data["agents"]:
                key = a.get("personality_key", a.get("personality", "none")) or "none"
                text = a["personality"] if "personality_key" in a else personality_text(key, a["name"])
                agents.append(AgentSpec(a["name"], key, text))
            keys = list(data.get("knowledge_keys", data.get("knowledge", [])))
            knowledge = (list(data["knowledge"]) if "knowledge_keys" in data
                         else [knowledge_text(k) for k in keys])
            start = data.get("clock_start", DEFAULT_START)
            if isinstance(start, str):
                start = datetime.strptime(start, TIME_FORMAT)
            world = dict(data.get("world", {}))
            world.pop("max_rounds", None)
            return cls(
                id=sid, map_id=map_id, map=map_str, agents=agents,
                bots=list(data.get("bots", [])), knowledge_keys=keys, knowledge=knowledge,
                seed=int(data.get("seed", 0)), max_rounds=int(data.get("max_rounds", 100)),
                clock_start=start,
                clock_increment_hours=float(data.get("clock_increment_hours", 1.0)),
                bot_attack_probability=float(data.get("bot_attack_probability", 0.5)),
                world=world, cognition=dict(data.get("cognition", {})),
                react_during_actions=bool(data.get("react_during_actions", True)),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario is missing field {exc}") from None


def load_scenario(ref: Union[str, Path], **overrides) -> ScenarioConfig:
    """Load a shipped scenario by id, or a scenario file by path."""
    path = Path(ref)
    if path.suffix in (".yaml", ".yml") and path.exists():
        data = yaml.safe_load(path.read_text())
    else:
        node = DATA.joinpath("scenarios").joinpath(f"{ref}.yaml")
        if not node.is_file():
            raise ScenarioError(f"unknown scenario {ref!r}; known: {', '.join(available_scenarios())}")
        data = yaml.safe_load(node.read_text())
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig.from_dict(data)
