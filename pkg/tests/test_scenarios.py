import pytest

from commons_sim import scenarios as sc
from commons_sim import substrate as sb


@pytest.mark.parametrize("sid", sc.available_scenarios())
def test_every_shipped_scenario_loads(sid):
    config = sc.load_scenario(sid)
    state = sb.load_map(config.map, config.world_config())
    assert state.spawn_tiles
    assert len(state.spawn_tiles) >= len(config.agents) + len(config.bots)
    assert config.max_rounds == 100
    assert sc.ScenarioConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()


def test_ten_scenarios():
    assert len(sc.available_scenarios()) == 10


def test_without_personality_has_empty_bios():
    config = sc.load_scenario("without_personality")
    assert all(a.personality == "" for a in config.agents)


def test_agents_vs_bots_roster():
    config = sc.load_scenario("agents_vs_bots")
    assert len(config.agents) == 2 and config.bots == ["bot_1", "bot_2"]


def test_informed_selfish_knowledge():
    config = sc.load_scenario("informed_selfish")
    assert config.knowledge and all("Pedro" in k for k in config.knowledge)


def test_personality_names_substituted():
    config = sc.load_scenario("all_coop")
    for a in config.agents:
        assert a.name in a.personality or a.personality


def test_overrides_and_validation():
    assert sc.load_scenario("all_coop", max_rounds=7, seed=3).max_rounds == 7
    with pytest.raises(sc.ScenarioError):
        sc.ScenarioConfig(id="x", map_id="m", map="S", agents=[])
    with pytest.raises(sc.ScenarioError):
        sc.ScenarioConfig(id="x", map_id="m", map="S", agents=[sc.AgentSpec("a"), sc.AgentSpec("a")])
    with pytest.raises(sc.ScenarioError):
        sc.load_scenario("all_coop", map="atlantis")


def test_scenario_file_path(tmp_path):
    f = tmp_path / "mine.yaml"
    f.write_text("id: mine\nmap: one_tree\nagents:\n  - {name: Ana, personality: cooperative}\n")
    config = sc.load_scenario(f)
    assert config.id == "mine" and config.agents[0].name == "Ana"
