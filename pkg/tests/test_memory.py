import math
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from commons_sim.llm import HashEmbedder
from commons_sim.memory import (LongTermMemory, MemoryRecord, NoPath, RetrievalWeights,
                                ShortTermMemory, SpatialMemory, moves_for_tiles, path, score)
from commons_sim.substrate import CellKind, Move, Orientation, Position

from conftest import START


def test_store_assigns_increasing_ids():
    mem = LongTermMemory(HashEmbedder())
    a = mem.store("Observed an apple at position [1, 2].", "observation", START)
    b = mem.store("A plan", "plan", START)
    assert (a.id, b.id) == (0, 1)
    with pytest.raises(ValueError):
        mem.store("   ", "observation", START)


def test_own_text_has_full_similarity():
    emb = HashEmbedder()
    mem = LongTermMemory(emb)
    rec = mem.store("apples near tree 3", "observation", START)
    assert float(np.dot(rec.embedding, emb("apples near tree 3"))) == pytest.approx(1.0)
    assert score(rec, emb("apples near tree 3"), START) == pytest.approx(1.0)


def test_degenerate_weights_rank_by_cosine():
    rng = np.random.default_rng(3)
    vecs = {f"t{i}": v / np.linalg.norm(v) for i, v in enumerate(rng.normal(size=(30, 8)))}
    mem = LongTermMemory(vecs.__getitem__)
    for i in range(30):
        mem.store(f"t{i}", "observation", START + timedelta(hours=i))
    vecs["q"] = vecs["t4"]
    got = mem.retrieve("q", 30, START + timedelta(hours=40), RetrievalWeights(1, 0, 0))
    cos = [float(np.dot(vecs[f"t{i}"], vecs["q"])) for i in range(30)]
    assert [r.id for r in got] == sorted(range(30), key=lambda i: -cos[i])


def test_retrieve_edges():
    mem = LongTermMemory(HashEmbedder())
    assert mem.retrieve("anything", 3, START) == []
    for i in range(3):
        mem.store(f"memory number {i}", "observation", START)
    assert len(mem.retrieve("memory", 10, START)) == 3
    with pytest.raises(ValueError):
        mem.retrieve("memory", 0, START)


def test_identical_query_ranks_first():
    mem = LongTermMemory(HashEmbedder())
    for text in ["the grass disappeared", "Pedro took an apple", "a ray beam was observed"]:
        mem.store(text, "observation", START)
    assert mem.retrieve("Pedro took an apple", 1, START)[0].text == "Pedro took an apple"


def test_ties_go_to_newer_record():
    vec = np.array([1.0, 0.0])
    mem = LongTermMemory(lambda text: vec)
    for _ in range(4):
        mem.store("same", "observation", START)
    assert [r.id for r in mem.retrieve("same", 4, START)] == [3, 2, 1, 0]


@settings(max_examples=50)
@given(st.floats(0, 200), st.floats(0, 200), st.floats(0.01, 5), st.floats(0, 5))
def test_older_never_outranks_newer(h_old, h_new, w_rec, w_other):
    if h_old < h_new:
        h_old, h_new = h_new, h_old
    vec = np.array([0.0, 1.0])
    now = START + timedelta(hours=400)
    old = MemoryRecord(0, "observation", "x", vec, now - timedelta(hours=h_old))
    new = MemoryRecord(1, "observation", "x", vec, now - timedelta(hours=h_new))
    w = RetrievalWeights(w_other, w_rec, w_other)
    assert score(old, vec, now, w) <= score(new, vec, now, w)


def test_score_components_bounded():
    vec = np.array([1.0, 0.0])
    rec = MemoryRecord(0, "observation", "x", -vec, START, poignancy=10)
    assert score(rec, vec, START + timedelta(hours=1)) == pytest.approx((0 + math.exp(-1) + 1) / 3)


def test_literal_recency_favours_old_records():
    vec = np.array([1.0, 0.0])
    mem = LongTermMemory(lambda text: vec, growing_recency=True)
    mem.store("old", "observation", START)
    mem.store("new", "observation", START + timedelta(hours=5))
    top = mem.retrieve("q", 1, START + timedelta(hours=6), RetrievalWeights(0, 1, 0))
    assert top[0].text == "old"


@pytest.mark.parametrize("weights", [(-1, 1, 1), (0, 0, 0)])
def test_bad_weights(weights):
    with pytest.raises(ValueError):
        RetrievalWeights(*weights)


def test_short_term_keys():
    stm = ShortTermMemory(name="Laura")
    assert set(stm) == {"name", "personality", "world_context", "current_plan", "goals",
                        "action_queue", "last_observations"}
    assert stm["action_queue"] == []
    with pytest.raises(KeyError):
        ShortTermMemory(mood="happy")


# -- spatial memory -----------------------------------------------------------------

def known(text):
    rows = text.split("/")
    sm = SpatialMemory(len(rows), len(rows[0]))
    sm.observe({Position(r, c): CellKind.WALL if ch == "W" else CellKind.EMPTY
                for r, line in enumerate(rows) for c, ch in enumerate(line)})
    return sm


def walk(start, orientation, moves):
    pos, o = Position(*start), orientation
    tiles = [pos]
    for m in moves:
        if m is Move.TURN_LEFT:
            o = o.turned(-1)
        elif m is Move.TURN_RIGHT:
            o = o.turned(1)
        else:
            assert m is Move.FORWARD
            dr, dc = o.delta
            pos = Position(pos.row + dr, pos.col + dc)
            tiles.append(pos)
    return tiles


def grid_distances(rows, start):
    """Plain BFS over a list-of-strings grid, used as the path oracle."""
    h, w = len(rows), len(rows[0])
    dist = {start: 0}
    frontier = [start]
    while frontier:
        nxt = []
        for r, c in frontier:
            for q in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= q[0] < h and 0 <= q[1] < w and rows[q[0]][q[1]] != "W" and q not in dist:
                    dist[q] = dist[(r, c)] + 1
                    nxt.append(q)
        frontier = nxt
    return dist


def test_path_trivial_cases():
    sm = known("..../..../....")
    sm.update_pose(Position(0, 0), Orientation.E)
    assert path(sm, (0, 0), (0, 0)) == []
    assert path(sm, (0, 0), (0, 3)) == [Move.FORWARD] * 3


def test_path_around_wall_matches_bfs_distance():
    sm = known("...../.WWW./...../.....")
    sm.update_pose(Position(3, 2), Orientation.N)
    moves = path(sm, (3, 2), (0, 2))
    tiles = walk((3, 2), Orientation.N, moves)
    assert tiles[-1] == (0, 2)
    assert len(tiles) - 1 == grid_distances("...../.WWW./...../.....".split("/"), (3, 2))[(0, 2)] == 7
    assert all(sm.known_tiles[t] != CellKind.WALL for t in tiles)


def test_known_unreachable_goal():
    sm = known("..W../..W../..W..")
    with pytest.raises(NoPath):
        sm.tile_path(Position(0, 0), Position(0, 4))
    with pytest.raises(NoPath):
        sm.tile_path(Position(0, 0), Position(1, 2))


def test_unknown_tiles_are_traversable():
    sm = SpatialMemory(3, 3)
    assert sm.tile_path(Position(0, 0), Position(2, 2))
    assert sm.explored_fraction() == 0.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.sampled_from("..W"), min_size=6, max_size=6), min_size=5, max_size=5),
       st.sampled_from(list(Orientation)))
def test_paths_are_valid_and_shortest(rows, orientation):
    rows[0][0] = "."
    sm = known("/".join("".join(r) for r in rows))
    sm.update_pose(Position(0, 0), orientation)
    dist = grid_distances(rows, (0, 0))
    assert dist == sm.bfs_distances(Position(0, 0))
    for r in range(5):
        for c in range(6):
            goal = Position(r, c)
            if (r, c) not in dist:
                with pytest.raises(NoPath):
                    path(sm, (0, 0), goal)
                continue
            tiles = walk((0, 0), orientation, path(sm, (0, 0), goal))
            assert tiles[-1] == goal and len(tiles) - 1 == dist[goal]
            assert all(sm.passable(t) for t in tiles)


def test_moves_for_tiles_turns_first():
    assert moves_for_tiles(Position(1, 1), Orientation.N, [Position(2, 1)]) == \
        [Move.TURN_RIGHT, Move.TURN_RIGHT, Move.FORWARD]
    assert moves_for_tiles(Position(1, 1), Orientation.N, [Position(1, 0)]) == \
        [Move.TURN_LEFT, Move.FORWARD]
