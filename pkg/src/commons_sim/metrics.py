"""Cooperation metrics computed purely from episode logs."""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from .episode_log import WORLD_EVENT_KINDS, EpisodeLog

FOCAL = "focal"
BOTS = "bots"


class MetricsError(ValueError):
    pass


@dataclass
class MetricSeries:
    name: str
    x: list
    y: list
    population: str

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise MetricsError("x and y differ in length")
        if any(b <= a for a, b in zip(self.x, self.x[1:])):
            raise MetricsError("x must be strictly increasing")

    @property
    def final(self) -> float:
        return self.y[-1]


def roster(log: EpisodeLog) -> dict[str, str]:
    return {e["id"]: e["kind"] for e in log.header["roster"]}


def members(log: EpisodeLog, population: Union[str, Iterable[str]]) -> list[str]:
    kinds = roster(log)
    if population == FOCAL:
        out = [n for n, k in kinds.items() if k == "LlmAgent"]
    elif population == BOTS:
        out = [n for n, k in kinds.items() if k == "Bot"]
    elif isinstance(population, str):
        out = [population] if population in kinds else []
    else:
        out = [n for n in population if n in kinds]
    return out


def population_of(log: EpisodeLog, name: str) -> str:
    return FOCAL if roster(log).get(name) == "LlmAgent" else BOTS


def _initial_apples(log: EpisodeLog) -> dict:
    """Apple tile -> tree id, from the logged map."""
    text = log.header["scenario"]["map"].replace("/", "\n")
    rows = [ln.strip() for ln in text.split("\n") if ln.strip()]
    fertile = {(r, c) for r, line in enumerate(rows) for c, ch in enumerate(line) if ch in "AG"}
    tree_of: dict = {}
    next_id = 0
    for start in sorted(fertile):
        if start in tree_of:
            continue
        stack = [start]
        tree_of[start] = next_id
        while stack:
            r, c = stack.pop()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    q = (r + dr, c + dc)
                    if q in fertile and q not in tree_of:
                        tree_of[q] = next_id
                        stack.append(q)
        next_id += 1
    apples = {(r, c) for r, line in enumerate(rows) for c, ch in enumerate(line) if ch == "A"}
    return {p: tree_of[p] for p in apples}


def _round_points(log: EpisodeLog):
    """Yield ``(x, record_index)`` at each round boundary, plus a trailing partial round."""
    last_x, last_i = 0, 0
    for i, r in enumerate(log.records):
        if r["kind"] == "RoundCompleted":
            last_x, last_i = r["round"], i
            yield last_x, i
    if any(r["kind"] in WORLD_EVENT_KINDS for r in log.records[last_i + 1:]):
        yield last_x + 1, len(log.records) - 1


def per_capita_reward(log: EpisodeLog, population: Union[str, Iterable[str]] = FOCAL) -> MetricSeries:
    names = members(log, population)
    if not names:
        raise MetricsError(f"empty population {population!r}")
    wanted = set(names)
    total = 0.0
    xs, ys = [0], [0.0]
    boundaries = dict((i, x) for x, i in _round_points(log))
    for i, r in enumerate(log.records):
        if r["kind"] == "AppleTaken" and r["payload"]["entity"] in wanted:
            total += 1.0
        if i in boundaries:
            xs.append(boundaries[i])
            ys.append(total / len(names))
    label = population if isinstance(population, str) else ",".join(names)
    return MetricSeries("per_capita_reward", xs, ys, label)


def per_capita_reward_live(log: EpisodeLog, population=FOCAL) -> MetricSeries:
    """Same series read from the round snapshots the simulator logged."""
    names = members(log, population)
    if not names:
        raise MetricsError(f"empty population {population!r}")
    xs, ys = [0], [0.0]
    for x, i in _round_points(log):
        rewards = log.records[i]["payload"].get("rewards")
        if rewards is None:
            rewards = log.end["payload"]["rewards"]
        xs.append(x)
        ys.append(sum(rewards[n] for n in names) / len(names))
    label = population if isinstance(population, str) else ",".join(names)
    return MetricSeries("per_capita_reward", xs, ys, label)


def apples_available(log: EpisodeLog) -> MetricSeries:
    count = len(_initial_apples(log))
    xs, ys = [0], [float(count)]
    boundaries = dict((i, x) for x, i in _round_points(log))
    for i, r in enumerate(log.records):
        if r["kind"] == "AppleTaken":
            count -= 1
        elif r["kind"] == "AppleGrew":
            count += 1
        if i in boundaries:
            xs.append(boundaries[i])
            ys.append(float(count))
    return MetricSeries("apples_available", xs, ys, "all")


def attack_stats(log: EpisodeLog) -> dict:
    """Attempted and effective attacks per sub-population and per entity."""
    out = {FOCAL: {"attempted": 0, "effective": 0}, BOTS: {"attempted": 0, "effective": 0}}
    per_entity = {n: {"attempted": 0, "effective": 0} for n in roster(log)}
    for r in log.of_kind("AttackAttempted", "AttackHit"):
        who = r["payload"]["entity"]
        field = "attempted" if r["kind"] == "AttackAttempted" else "effective"
        out[population_of(log, who)][field] += 1
        per_entity[who][field] += 1
    out["per_entity"] = per_entity
    return out


def took_last_apple(log: EpisodeLog) -> dict:
    apples = _initial_apples(log)
    out = {FOCAL: 0, BOTS: 0}
    per_entity = {n: 0 for n in roster(log)}
    for r in log.world_events():
        p = r["payload"]
        if r["kind"] == "AppleGrew":
            apples[tuple(p["position"])] = p["tree_id"]
        elif r["kind"] == "AppleTaken":
            tree = apples.pop(tuple(p["position"]))
            if tree not in apples.values():
                out[population_of(log, p["entity"])] += 1
                per_entity[p["entity"]] += 1
    out["per_entity"] = per_entity
    return out


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _in_window(header: dict, center, p) -> bool:
    world = header["scenario"]["world"]
    h, w = world["window_height"], world["window_width"]
    top, left = center[0] - h // 2, center[1] - w // 2
    return top <= p[0] < top + h and left <= p[1] < left + w


def last_apple_approach(log: EpisodeLog, agent: str, visible_only: bool = False) -> Optional[float]:
    """Fraction of the agent's moves that closed in on a tree's last apple.

    Counted over moves (rotations excluded) that start with the agent's nearest
    apple being the sole apple of its tree. ``None`` when that never happens.
    """
    apples = _initial_apples(log)
    position: dict = {}
    num = den = 0
    for r in log.world_events():
        kind, p = r["kind"], r["payload"]
        who = p.get("entity")
        if kind == "AppleGrew":
            apples[tuple(p["position"])] = p["tree_id"]
            continue
        if kind == "AppleTaken":
            apples.pop(tuple(p["position"]), None)
            continue
        if kind == "AttackHit":
            position.pop(p["target"], None)
            continue
        if kind in ("Spawned", "Respawned"):
            position[who] = tuple(p["position"])
            continue
        if who != agent or kind not in ("Moved", "MoveBlocked", "Noop", "AttackAttempted"):
            continue
        prev = position.get(agent)
        new = tuple(p["position"])
        position[agent] = new
        if prev is None or (kind == "Moved" and new == prev) or not apples:
            continue
        nearest = min(apples, key=lambda a: (_dist(a, prev), a))
        tree = apples[nearest]
        if sum(1 for t in apples.values() if t == tree) != 1:
            continue
        if visible_only and not _in_window(log.header, prev, nearest):
            continue
        den += 1
        if _dist(new, nearest) < _dist(prev, nearest):
            num += 1
    return num / den if den else None


def attack_target_share(log: EpisodeLog, attackers, target: str) -> Optional[float]:
    hits = on_target = 0
    wanted = set(members(log, attackers))
    for r in log.of_kind("AttackHit"):
        if r["payload"]["entity"] in wanted:
            hits += 1
            on_target += r["payload"]["target"] == target
    return on_target / hits if hits else None


def target_share_aggregates(logs: list, attackers, target: str) -> dict:
    """Both readings of an average share: mean of per-episode shares and pooled hits."""
    shares = [s for s in (attack_target_share(lg, attackers, target) for lg in logs) if s is not None]
    hits = on_target = 0
    for lg in logs:
        wanted = set(members(lg, attackers))
        for r in lg.of_kind("AttackHit"):
            if r["payload"]["entity"] in wanted:
                hits += 1
                on_target += r["payload"]["target"] == target
    return {"mean_of_episodes": statistics.fmean(shares) if shares else None,
            "pooled": on_target / hits if hits else None}


# -- export ------------------------------------------------------------------

def episode_summary(log: EpisodeLog) -> dict:
    focal = members(log, FOCAL)
    bots = members(log, BOTS)
    attacks = attack_stats(log)
    last = took_last_apple(log)
    summary = {
        "scenario": log.header["scenario"]["id"],
        "seed": log.header["seed"],
        "rounds": log.end["payload"]["rounds"] if log.end else None,
        "reason": log.end["payload"]["reason"] if log.end else None,
        "per_capita_reward_focal": per_capita_reward(log, FOCAL).final,
        "per_capita_reward_bots": per_capita_reward(log, BOTS).final if bots else None,
        "attacks_attempted_focal": attacks[FOCAL]["attempted"],
        "attacks_effective_focal": attacks[FOCAL]["effective"],
        "attacks_attempted_bots": attacks[BOTS]["attempted"],
        "attacks_effective_bots": attacks[BOTS]["effective"],
        "took_last_apple_focal": last[FOCAL],
        "took_last_apple_bots": last[BOTS],
        "last_apple_approach": {a: last_apple_approach(log, a) for a in focal},
        "last_apple_approach_visible": {a: last_apple_approach(log, a, True) for a in focal},
        "attack_target_share_focal": {t: attack_target_share(log, FOCAL, t)
                                      for t in roster(log)},
    }
    return summary


def _write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "value", "population"])
        for r in rows:
            w.writerow(["" if v is None else v for v in r])


def export_episode(log: EpisodeLog, out_dir) -> list[Path]:
    """One CSV per metric; undefined ratios are left empty."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    final_round = log.end["payload"]["rounds"] if log.end else 0
    pops = [FOCAL] + ([BOTS] if members(log, BOTS) else []) + list(roster(log))
    written = []

    def emit(name, rows):
        path = out / f"{name}.csv"
        _write_csv(path, rows)
        written.append(path)

    rows = []
    for pop in pops:
        s = per_capita_reward(log, pop)
        rows += [(x, y, pop) for x, y in zip(s.x, s.y)]
    emit("per_capita_reward", rows)
    s = apples_available(log)
    emit("apples_available", [(x, y, s.population) for x, y in zip(s.x, s.y)])
    attacks = attack_stats(log)
    emit("attacks_attempted", [(final_round, attacks[p]["attempted"], p) for p in (FOCAL, BOTS)])
    emit("attacks_effective", [(final_round, attacks[p]["effective"], p) for p in (FOCAL, BOTS)])
    last = took_last_apple(log)
    emit("took_last_apple", [(final_round, last[p], p) for p in (FOCAL, BOTS)])
    focal = members(log, FOCAL)
    emit("last_apple_approach", [(final_round, last_apple_approach(log, a), a) for a in focal])
    emit("last_apple_approach_visible",
         [(final_round, last_apple_approach(log, a, True), a) for a in focal])
    emit("attack_target_share",
         [(final_round, attack_target_share(log, FOCAL, t), f"{FOCAL}->{t}") for t in roster(log)])
    return written


def mean_sd(values: list) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "sd": None, "n": 0, "text": "n/a"}
    mean = statistics.fmean(vals)
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return {"mean": mean, "sd": sd, "n": len(vals), "text": f"{mean:.2f} ({sd:.2f})"}


def batch_summary(logs: list) -> dict:
    scenarios = {lg.header["scenario"]["id"] for lg in logs}
    if len(scenarios) != 1:
        raise MetricsError(f"logs mix scenarios: {sorted(scenarios)}")
    episodes = [episode_summary(lg) for lg in logs]
    scalar_keys = [k for k, v in episodes[0].items()
                   if isinstance(v, (int, float)) and k not in ("seed", "rounds")]
    summary = {"scenario": scenarios.pop(), "episodes": len(logs),
               "seeds": [e["seed"] for e in episodes], "metrics": {}}
    for key in ["rounds", *scalar_keys]:
        summary["metrics"][key] = mean_sd([e[key] for e in episodes])
    per_agent = {}
    for key in ("last_apple_approach", "last_apple_approach_visible"):
        values = [v for e in episodes for v in e[key].values()]
        per_agent[key] = mean_sd(values)
    summary["metrics"].update(per_agent)
    targets = sorted({t for lg in logs for t in roster(lg)})
    summary["attack_target_share_focal"] = {t: target_share_aggregates(logs, FOCAL, t) for t in targets}
    return summary


def _padded_mean(series: list) -> tuple[list, list]:
    length = max(len(s.y) for s in series)
    ys = [s.y + [s.y[-1]] * (length - len(s.y)) for s in series]
    return list(range(length)), [statistics.fmean(col) for col in zip(*ys)]


def write_charts(logs: list, out_dir) -> list[Path]:
    """SVG line charts of per-capita reward and available apples (mean over logs)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    written = []
    plots = {"per_capita_reward": [(FOCAL, [per_capita_reward(lg, FOCAL) for lg in logs])],
             "apples_available": [("all", [apples_available(lg) for lg in logs])]}
    if all(members(lg, BOTS) for lg in logs):
        plots["per_capita_reward"].append((BOTS, [per_capita_reward(lg, BOTS) for lg in logs]))
    plt.rcParams["svg.hashsalt"] = "commons-sim"
    for name, lines in plots.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, series in lines:
            x, y = _padded_mean(series)
            ax.plot(x, y, label=label)
        ax.set_xlabel("round")
        ax.set_ylabel(name.replace("_", " "))
        ax.legend()
        path = out / f"{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path
