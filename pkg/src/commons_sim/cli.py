"""Command line entry point: run batches, replay logs, export metrics."""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import __version__
from . import metrics as M
from .episode_log import EpisodeLog, LogError, verify
from .llm import (HashEmbedder, HeuristicProvider, HttpChatProvider, HttpEmbedder, ProviderConfig,
                  Router, ScriptedProvider)
from .scenarios import DATA, ScenarioError, available_scenarios, load_scenario
from .runtime import run_episode

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3, 4

ENDPOINT_ENV = "COMMONS_SIM_ENDPOINT"
EMBED_ENDPOINT_ENV = "COMMONS_SIM_EMBED_ENDPOINT"
TOKEN_ENV = "OPENAI_API_KEY"

log = logging.getLogger("commons_sim")


class ConfigError(Exception):
    pass


@dataclass
class ExperimentSpec:
    scenario: str
    repetitions: int = 10
    base_seed: int = 0
    provider: str = "heuristic"
    embedder: str = "hash"
    out: str = "runs"
    jobs: int = 1
    max_rounds: Optional[int] = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("--reps must be >= 1")
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.repetitions)]


def resolve_script(ref: str) -> Path:
    """A script path, or the name of a shipped script."""
    path = Path(ref)
    if path.is_file():
        return path
    for name in (ref, f"{ref}.yaml"):
        node = DATA.joinpath("scripts").joinpath(name)
        if node.is_file():
            return Path(str(node))
    raise ConfigError(f"scripted provider file not found: {ref}")


def make_router(provider: str) -> Router:
    """Build the completion router for a ``--provider`` value.

    Raises ConfigError for anything that would fail before the first prompt.
    """
    kind, _, arg = provider.partition(":")
    if kind == "scripted":
        if not arg:
            raise ConfigError("use --provider scripted:<file>")
        path = resolve_script(arg)
        try:
            return Router(ScriptedProvider.from_file(path))
        except (ValueError, OSError) as exc:
            raise ConfigError(f"bad script {path}: {exc}") from None
    if kind in ("heuristic", "hash-embed"):
        try:
            p_attack = float(arg) if arg else 0.1
        except ValueError:
            raise ConfigError(f"bad attack probability {arg!r}") from None
        if not 0.0 <= p_attack <= 1.0:
            raise ConfigError("attack probability must lie in [0, 1]")
        return Router(HeuristicProvider(p_attack=p_attack))
    if kind == "live":
        if not os.environ.get(TOKEN_ENV):
            raise ConfigError(f"--provider live needs the {TOKEN_ENV} environment variable")
        config = ProviderConfig(endpoint=os.environ.get(ENDPOINT_ENV, ProviderConfig.endpoint),
                                token_env=TOKEN_ENV)
        return Router(HttpChatProvider(config), models=config.models,
                      temperature=config.temperature, max_tokens=config.max_tokens)
    raise ConfigError(f"unknown provider {provider!r} (live, scripted:<file>, heuristic[:p], hash-embed)")


def make_embedder(kind: str):
    if kind == "hash":
        return HashEmbedder()
    if kind == "live":
        if not os.environ.get(TOKEN_ENV):
            raise ConfigError(f"--embedder live needs the {TOKEN_ENV} environment variable")
        endpoint = os.environ.get(EMBED_ENDPOINT_ENV, "https://api.openai.com/v1/embeddings")
        return HttpEmbedder(endpoint, "text-embedding-ada-002", TOKEN_ENV)
    raise ConfigError(f"unknown embedder {kind!r} (hash, live)")


def _run_one(spec: ExperimentSpec, seed: int) -> tuple[Path, dict]:
    scenario = load_scenario(spec.scenario, max_rounds=spec.max_rounds)
    router = make_router(spec.provider)
    if isinstance(router.provider, HeuristicProvider):
        router.provider = HeuristicProvider(seed=seed, p_attack=router.provider.p_attack,
                                            bounds=router.provider.bounds)
    episode_log = run_episode(scenario, router, make_embedder(spec.embedder), seed=seed,
                              provider_label=spec.provider)
    out = Path(spec.out)
    path = episode_log.write(out / f"{scenario.id}_{seed}.log")
    summary = M.episode_summary(episode_log)
    M.write_json(out / f"{scenario.id}_{seed}.summary.json", summary)
    return path, summary


def cmd_run(args) -> int:
    try:
        spec = ExperimentSpec(args.scenario, args.reps, args.seed, args.provider, args.embedder,
                              args.out, args.jobs, args.max_rounds)
        scenario = load_scenario(spec.scenario, max_rounds=spec.max_rounds)
        make_router(spec.provider)
        make_embedder(spec.embedder)
    except (ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    try:
        if spec.jobs == 1:
            results = [_run_one(spec, s) for s in spec.seeds]
        else:
            with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
                results = list(pool.map(_run_one, [spec] * len(spec.seeds), spec.seeds))
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.exception("episode failed")
        print(f"error: episode failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path, summary in results:
        print(f"{path}  rounds={summary['rounds']} reason={summary['reason']} "
              f"reward_focal={summary['per_capita_reward_focal']:.2f}")
    logs = [EpisodeLog.read(p) for p, _ in results]
    M.write_json(out / f"{scenario.id}.batch.json", M.batch_summary(logs))
    print(f"{len(results)} episode(s) in {time.monotonic() - started:.1f}s -> {out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.log)
    if not path.is_file():
        print(f"error: no such log {path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        episode_log = EpisodeLog.read(path)
    except LogError as exc:
        print(f"corrupt: {exc}", file=sys.stderr)
        return EXIT_VERIFY

    def show(state, record):
        if args.quiet:
            return
        print(f"-- round {state.round} ({state.clock:%Y-%m-%d %H:%M:%S})")
        print(state.render())

    result = verify(episode_log, on_round=None if args.quiet else show)
    if not result.ok:
        print(f"FAILED: {result.message}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"OK: {result.message}")
    return EXIT_OK


def expand(patterns: list[str]) -> list[str]:
    paths = []
    for pattern in patterns:
        matches = sorted(glob.glob(pattern)) if glob.has_magic(pattern) else [pattern]
        paths.extend(p for p in matches if Path(p).is_file())
    return sorted(set(paths))


def cmd_metrics(args) -> int:
    paths = expand(args.logs)
    if not paths:
        print(f"error: no logs match {' '.join(args.logs)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        logs = [EpisodeLog.read(p) for p in paths]
        scenarios = {lg.header["scenario"]["id"] for lg in logs}
    except (LogError, KeyError) as exc:
        print(f"corrupt: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    if len(scenarios) != 1:
        print(f"error: logs mix scenarios {sorted(scenarios)}; pass one scenario at a time",
              file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(logs) == 1:
        M.export_episode(logs[0], out)
        M.write_json(out / "summary.json", M.episode_summary(logs[0]))
    else:
        for p, lg in zip(paths, logs):
            M.export_episode(lg, out / Path(p).stem)
        summary = M.batch_summary(logs)
        M.write_json(out / "batch_summary.json", summary)
        for key, value in summary["metrics"].items():
            print(f"{key:32s} {value['text']}")
    M.write_charts(logs, out)
    print(f"metrics for {len(logs)} log(s) -> {out}")
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for sid in available_scenarios():
        sc = load_scenario(sid)
        agents = ", ".join(f"{a.name}:{a.personality_key}" for a in sc.agents)
        bots = f" bots={','.join(sc.bots)}" if sc.bots else ""
        print(f"{sid:24s} map={sc.map_id} agents=[{agents}]{bots}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commons-sim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a batch of episodes")
    run.add_argument("--scenario", required=True)
    run.add_argument("--reps", type=int, default=10)
    run.add_argument("--seed", type=int, default=0, help="base seed; episode i uses seed+i")
    run.add_argument("--provider", default="heuristic",
                     help="live | scripted:<file> | heuristic[:p_attack] | hash-embed")
    run.add_argument("--embedder", default="hash", choices=["hash", "live"])
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--max-rounds", type=int, default=None)
    run.add_argument("--out", default="runs")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("replay", help="re-fold a log and verify its state hash")
    rep.add_argument("log")
    rep.add_argument("-q", "--quiet", action="store_true", help="skip the per-round rendering")
    rep.set_defaults(func=cmd_replay)

    met = sub.add_parser("metrics", help="export metric CSVs, charts and summaries")
    met.add_argument("logs", nargs="+", help="log files or glob patterns")
    met.add_argument("--out", default="metrics")
    met.set_defaults(func=cmd_metrics)

    sc = sub.add_parser("scenarios", help="list shipped scenarios")
    sc.set_defaults(func=cmd_scenarios)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
