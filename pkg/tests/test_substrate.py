import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from commons_sim import substrate as sb
from commons_sim.scenarios import map_text
from commons_sim.substrate import CellKind, EntityKind, Move, Orientation, Position

from conftest import grid

maps = st.integers(3, 9).flatmap(lambda h: st.integers(3, 9).flatmap(
    lambda w: st.lists(st.lists(st.sampled_from("..AGW"), min_size=w, max_size=w),
                       min_size=h, max_size=h)))


def as_text(rows):
    return "\n".join("".join(r) for r in rows)


# -- map loading ----------------------------------------------------------------

def test_three_by_three_single_tree():
    state = grid("WWW/WAW/WWW")
    assert len(state.trees) == 1
    assert state.apple_count() == 1
    assert state.cell((1, 1)) == sb.Cell(CellKind.APPLE, 0)


def test_default_map_shape_and_trees():
    state = sb.load_map(map_text("default"))
    assert state.shape == (18, 24)
    assert len(state.trees) == 6
    assert state.apple_count() == map_text("default").count("A")


def test_separated_patches_get_row_major_ids():
    state = grid("A...G/A...A/.....")
    assert len(state.trees) == 2
    assert state.tree_id_at((0, 0)) == 0 and state.tree_id_at((1, 0)) == 0
    assert state.tree_id_at((0, 4)) == 1 and state.tree_id_at((1, 4)) == 1


def test_diagonal_tiles_share_a_tree():
    state = grid("A../.G./..A")
    assert len(state.trees) == 1


@pytest.mark.parametrize("bad", ["WW/W", "WWX/WAW", ""])
def test_bad_maps_rejected(bad):
    with pytest.raises(sb.MapError):
        grid(bad)


def test_spawn_tiles_required_by_default():
    with pytest.raises(sb.MapError):
        sb.load_map("WWW/WAW/WWW")


@settings(max_examples=60, deadline=None)
@given(maps)
def test_tree_labels_match_scipy_components(rows):
    state = grid(as_text(rows))
    fertile = np.isin(np.array(rows), ["A", "G"])
    labels, count = ndimage.label(fertile, structure=np.ones((3, 3)))
    assert len(state.trees) == count
    # same partition, and ids ordered by each component's first tile in row-major order
    seen = {}
    for r, c in zip(*np.nonzero(fertile)):
        seen.setdefault(labels[r, c], len(seen))
        assert state.tree_of[r, c] == seen[labels[r, c]]


# -- neighbourhoods and regrowth -----------------------------------------------

def test_l2_stencil_sizes():
    assert len(sb.l2_offsets(2)) == 12
    assert sb.neighbors_l2((5, 5), 0, (10, 10)) == set()
    assert len(sb.neighbors_l2((5, 5), 2, (10, 10))) == 12
    assert len(sb.neighbors_l2((0, 0), 2, (10, 10))) == 5


@settings(max_examples=60, deadline=None)
@given(maps)
def test_nearby_counts_match_brute_force(rows):
    state = grid(as_text(rows))
    counts = sb.nearby_apple_counts(state.kinds)
    h, w = state.shape
    for r in range(h):
        for c in range(w):
            expect = sum(1 for rr in range(h) for cc in range(w)
                         if (rr, cc) != (r, c) and math.hypot(rr - r, cc - c) <= 2
                         and rows[rr][cc] == "A")
            assert counts[r, c] == expect


def test_grass_without_apples_disappears():
    state = grid("G....../.......")
    events = sb.regrowth_step(state)
    assert [e.kind for e in events] == ["GrassDisappeared"]
    assert state.kind((0, 0)) == CellKind.BARE


def test_bare_ground_reborn_near_new_apple():
    state = grid("GGA/...", regrowth_probability={1: 1.0, 2: 1.0, 3: 1.0})
    state.kinds[0, 0] = CellKind.BARE
    events = sb.regrowth_step(state)
    kinds = [e.kind for e in events]
    assert "AppleGrew" in kinds and "GrassGrew" in kinds
    assert state.kind((0, 1)) == CellKind.APPLE
    assert state.kind((0, 0)) == CellKind.GRASS


def test_apple_never_grows_under_an_entity():
    state = grid("GA/..", regrowth_probability={1: 1.0})
    sb.spawn_entity(state, "a", EntityKind.LLM_AGENT, Position(0, 0))
    for _ in range(20):
        assert not [e for e in sb.regrowth_step(state) if e.kind == "AppleGrew"]


def test_growth_probability_saturates():
    cfg = sb.WorldConfig()
    assert cfg.growth_probability(0) == 0.0
    assert cfg.growth_probability(3) == cfg.growth_probability(11) == 0.025


@pytest.mark.parametrize("table", [{0: 0.1}, {1: 1.5}, {1: -0.1}])
def test_bad_regrowth_tables_rejected(table):
    with pytest.raises(ValueError):
        sb.WorldConfig(regrowth_probability=table)


@settings(max_examples=40, deadline=None)
@given(maps, st.integers(0, 2 ** 32 - 1))
def test_no_barren_grass_after_regrowth(rows, seed):
    state = sb.load_map(as_text(rows), seed=seed, require_spawn=False)
    sb.regrowth_step(state)
    counts = sb.nearby_apple_counts(state.kinds)
    assert not np.any((state.kinds == CellKind.GRASS) & (counts == 0))


# -- movement ---------------------------------------------------------------------

def _agent(text, pos, orientation=Orientation.N, **cfg):
    state = grid(text, **cfg)
    sb.spawn_entity(state, "a", EntityKind.LLM_AGENT, Position(*pos), orientation)
    return state


def test_step_onto_apple():
    state = _agent("A/./.", (1, 0))
    events = sb.move_entity(state, "a", Move.FORWARD)
    assert [e.kind for e in events] == ["Moved", "AppleTaken"]
    assert state.entity("a").cumulative_reward == 1.0
    assert state.kind((0, 0)) == CellKind.GRASS


def test_step_into_wall_is_blocked():
    state = _agent("W/./.", (1, 0))
    events = sb.move_entity(state, "a", Move.FORWARD)
    assert [e.kind for e in events] == ["MoveBlocked"]
    assert state.entity("a").position == (1, 0)


def test_occupied_destination_blocks():
    state = _agent("..", (0, 0), Orientation.E)
    sb.spawn_entity(state, "b", EntityKind.BOT, Position(0, 1))
    assert sb.move_entity(state, "a", Move.FORWARD)[0].kind == "MoveBlocked"


@pytest.mark.parametrize("orientation,move,dest", [
    (Orientation.N, Move.FORWARD, (1, 2)), (Orientation.N, Move.BACK, (3, 2)),
    (Orientation.N, Move.STEP_LEFT, (2, 1)), (Orientation.N, Move.STEP_RIGHT, (2, 3)),
    (Orientation.E, Move.FORWARD, (2, 3)), (Orientation.E, Move.STEP_LEFT, (1, 2)),
    (Orientation.S, Move.FORWARD, (3, 2)), (Orientation.S, Move.STEP_RIGHT, (2, 1)),
    (Orientation.W, Move.FORWARD, (2, 1)), (Orientation.W, Move.BACK, (2, 3)),
])
def test_relative_translations(orientation, move, dest):
    state = _agent("...../...../...../...../.....", (2, 2), orientation)
    sb.move_entity(state, "a", move)
    assert state.entity("a").position == dest
    assert state.entity("a").orientation == orientation


def test_turns():
    state = _agent("...", (0, 1))
    sb.move_entity(state, "a", Move.TURN_LEFT)
    assert state.entity("a").orientation == Orientation.W
    sb.move_entity(state, "a", Move.TURN_RIGHT)
    sb.move_entity(state, "a", Move.TURN_RIGHT)
    assert state.entity("a").orientation == Orientation.E
    assert state.entity("a").position == (0, 1)


def test_unknown_and_removed_entities():
    state = _agent("...", (0, 1))
    with pytest.raises(sb.UnknownEntity):
        sb.move_entity(state, "ghost", Move.NOOP)
    state.entity("a").position = None
    state.entity("a").removed_until = 3
    with pytest.raises(sb.EntityRemoved):
        sb.move_entity(state, "a", Move.NOOP)


# -- zapping and respawn -------------------------------------------------------------

def test_zap_hits_nearest_target_only():
    state = _agent(".\n.\n.\n.\n.", (4, 0))
    sb.spawn_entity(state, "near", EntityKind.BOT, Position(3, 0))
    sb.spawn_entity(state, "far", EntityKind.BOT, Position(2, 0))
    events = sb.fire_zap(state, "a")
    assert [e.kind for e in events] == ["AttackAttempted", "AttackHit"]
    assert events[1].target == "near"
    assert not state.entity("near").active and state.entity("far").active
    assert state.entity("near").attacked_by == "a"


def test_empty_beam_only_attempts():
    state = _agent(".\n.\n.\n.", (3, 0))
    events = sb.fire_zap(state, "a")
    assert [e.kind for e in events] == ["AttackAttempted"]
    assert list(events[0].tiles) == [(2, 0), (1, 0), (0, 0)]


def test_beam_stops_at_walls():
    state = _agent(".\nW\n.\n.", (3, 0))
    sb.spawn_entity(state, "hidden", EntityKind.BOT, Position(0, 0))
    assert [e.kind for e in sb.fire_zap(state, "a")] == ["AttackAttempted"]


def test_wide_beam_covers_side_lanes():
    state = _agent("...\n...\n...", (2, 1), beam_width=3, beam_length=2)
    assert set(sb.beam_tiles(state, (2, 1), Orientation.N)) == {
        (1, 0), (1, 1), (1, 2), (0, 0), (0, 1), (0, 2)}


def test_respawn_after_removal_steps():
    state = sb.load_map("S.S\n...\nS..", seed=4)
    sb.spawn_entity(state, "a", EntityKind.LLM_AGENT, Position(1, 1), Orientation.S)
    sb.spawn_entity(state, "b", EntityKind.BOT, Position(2, 1))
    sb.fire_zap(state, "a")
    assert sb.respawn_tick(state) == []
    skipped = 0
    while not state.entity("b").active:
        sb.skip_move(state, "b")
        skipped += 1
        events = sb.respawn_tick(state)
        assert bool(events) == (skipped == 5)
    assert skipped == 5
    b = state.entity("b")
    assert b.position in state.spawn_tiles and b.orientation == Orientation.N


def test_respawn_choice_follows_seeded_rng():
    picks = []
    for _ in range(2):
        state = sb.load_map("S.S\n...\nS.S", seed=11)
        sb.spawn_entity(state, "x", EntityKind.BOT, Position(1, 1))
        ent = state.entity("x")
        ent.position, ent.removed_until = None, 0
        picks.append(sb.respawn_tick(state)[0].position)
    oracle = np.random.default_rng(11)
    free = sorted([Position(0, 0), Position(0, 2), Position(2, 0), Position(2, 2)])
    assert picks[0] == picks[1] == free[int(oracle.integers(len(free)))]


def test_respawn_deferred_when_spawns_full():
    state = sb.load_map("S..", seed=0)
    sb.spawn_entity(state, "blocker", EntityKind.BOT, Position(0, 0))
    sb.spawn_entity(state, "x", EntityKind.BOT, Position(0, 2))
    ent = state.entity("x")
    ent.position, ent.removed_until = None, 0
    assert [e.kind for e in sb.respawn_tick(state)] == ["RespawnDeferred"]
    assert sb.respawn_tick(grid("...")) == []


def test_skip_move_requires_removed_entity():
    state = _agent("...", (0, 0))
    with pytest.raises(sb.SubstrateError):
        sb.skip_move(state, "a")


# -- termination and bookkeeping -------------------------------------------------

def test_terminal_conditions():
    state = grid("A..")
    state.round = 100
    assert sb.is_terminal(state) is sb.Terminal.MAX_ROUNDS
    state.round = 50
    assert sb.is_terminal(state) is None
    state.kinds[0, 0] = CellKind.GRASS
    state.round = 40
    assert sb.is_terminal(state) is sb.Terminal.APPLES_EXHAUSTED


def test_state_hash_tracks_content_not_rng():
    a = sb.load_map(map_text("default"), seed=1)
    b = sb.load_map(map_text("default"), seed=2)
    assert a.state_hash() == b.state_hash()
    b.kinds[2, 5] = CellKind.GRASS
    assert a.state_hash() != b.state_hash()


def test_world_event_round_trip():
    state = _agent(".\n.\n.", (2, 0))
    sb.spawn_entity(state, "b", EntityKind.BOT, Position(1, 0))
    for ev in sb.fire_zap(state, "a"):
        again = sb.WorldEvent.from_dict(ev.to_dict(), ev.step, ev.time)
        assert again == ev


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.lists(st.sampled_from(list(Move) + ["zap"]), max_size=60))
def test_reward_conservation_and_determinism(seed, moves):
    def play():
        state = sb.load_map(map_text("one_tree"), seed=seed)
        sb.spawn_entity(state, "a", EntityKind.LLM_AGENT)
        sb.spawn_entity(state, "b", EntityKind.BOT)
        log = []
        for i, m in enumerate(moves):
            who = "a" if i % 2 == 0 else "b"
            if not state.entity(who).active:
                log += sb.skip_move(state, who)
            elif m == "zap":
                log += sb.fire_zap(state, who)
            else:
                log += sb.move_entity(state, who, m)
            log += sb.regrowth_step(state)
            log += sb.respawn_tick(state)
            occupied = [e.position for e in state.entities.values() if e.active]
            assert len(occupied) == len(set(occupied))
            assert all(state.kind(p) != CellKind.WALL for p in occupied)
        return state, log

    state, log = play()
    taken = sum(1 for e in log if e.kind == "AppleTaken")
    assert sb.total_reward(state.entities.values()) == taken
    again, log2 = play()
    assert [e.to_dict() for e in log] == [e.to_dict() for e in log2]
    assert state.state_hash() == again.state_hash()
