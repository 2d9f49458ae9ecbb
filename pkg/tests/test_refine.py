import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundsig import geometry as geo
from groundsig.geometry import HBB, GridMask
from groundsig.refine import MAX_POINTS, box_region, make_prompt

from oracles import refine_membership


def test_grid_inside_box_gives_positives_only():
    cells = np.zeros((8, 8), dtype=np.uint8)
    cells[2:4, 2:5] = 1
    p = make_prompt(GridMask(8, cells), HBB(0.1, 0.1, 0.9, 0.9), (64, 64), rng_seed=0)
    assert len(p.positive_points) == MAX_POINTS and p.negative_points == ()
    assert not p.fallback_box_only


def test_empty_grid_falls_back_to_box():
    box = HBB(0.1, 0.2, 0.5, 0.6)
    p = make_prompt(GridMask(8, np.zeros(64)), box, (100, 50))
    assert p.fallback_box_only and p.positive_points == () and p.negative_points == ()
    assert p.box == pytest.approx((10, 10, 50, 30))


def test_fewer_points_when_region_is_small():
    cells = np.zeros((4, 4), dtype=np.uint8)
    cells[0, 0] = 1
    p = make_prompt(GridMask(4, cells), HBB(0.5, 0.5, 1, 1), (4, 4))
    assert p.positive_points == () and p.negative_points == ((0, 0),)


def test_deterministic_and_json_shape():
    g = GridMask(8, np.random.default_rng(0).random((8, 8)) < 0.5)
    box = HBB(0.2, 0.2, 0.7, 0.7)
    a = make_prompt(g, box, (80, 60), rng_seed=42)
    assert a == make_prompt(g, box, (80, 60), rng_seed=42)
    obj = a.to_json("img.png")
    assert obj["point_labels"] == [1] * len(a.positive_points) + [0] * len(a.negative_points)
    assert len(obj["point_coords"]) == len(obj["point_labels"])
    assert obj["image"] == "img.png"


def test_box_region_inclusive_edges():
    r = box_region(HBB(0.25, 0.25, 0.75, 0.75), 4, 4)
    assert r.sum() == 4 and r[1:3, 1:3].all()


@settings(max_examples=150)
@given(
    st.integers(2, 16).flatmap(lambda n: st.tuples(
        st.just(n), st.lists(st.booleans(), min_size=n * n, max_size=n * n))),
    st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
    st.integers(8, 90), st.integers(8, 90), st.integers(0, 2**32 - 1),
)
def test_points_satisfy_region_predicates(grid_spec, corners, w, h, seed):
    n, bits = grid_spec
    grid = GridMask(n, np.array(bits, dtype=np.uint8))
    x1, x2 = sorted(corners[:2])
    y1, y2 = sorted(corners[2:])
    box = HBB(x1, y1, x2, y2)
    p = make_prompt(grid, box, (w, h), rng_seed=seed)
    in_mask, in_box = refine_membership(grid.cells, box.as_tuple(), w, h)
    assert len(p.positive_points) <= MAX_POINTS and len(p.negative_points) <= MAX_POINTS
    assert len(set(p.positive_points)) == len(p.positive_points)
    for x, y in p.positive_points:
        assert in_mask(x, y) and in_box(x, y)
    for x, y in p.negative_points:
        assert in_mask(x, y) and not in_box(x, y)
    coarse = geo.upsample(grid, w, h).bits.astype(bool)
    inside = box_region(box, w, h)
    assert p.fallback_box_only == (not (coarse & inside).any() and not (coarse & ~inside).any())
