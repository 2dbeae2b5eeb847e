import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from rainstorm.gridio import GridField, GridGeometry
from rainstorm.ident import (IdentParams, Region, almost_connected_label, connected_regions,
                             group_by_gap, identify_field, identify_segments, min_distance_km)

from oracles import brute_groups, brute_min_distance, flood_fill_regions

G12 = GridGeometry(nx=60, ny=40, dx_km=12.0, dy_km=12.0)


def _as_sets(regions):
    return {frozenset(map(tuple, r.cells.tolist())) for r in regions}


def _region(cells, value=1.0):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    return Region(cells, np.full(len(cells), value))


def _block(x0, y0, w, h):
    return [(x, y) for y in range(y0, y0 + h) for x in range(x0, x0 + w)]


def _field_from(cells_values, shape=(40, 60)):
    vals = np.zeros(shape)
    for cells, v in cells_values:
        for x, y in cells:
            vals[y, x] = v
    return vals


# ---------------------------------------------------------------- stage 1

def test_empty_slice():
    assert connected_regions(np.zeros((5, 5)), np.ones((5, 5), bool)) == []


def test_diagonal_neighbours_depend_on_connectivity():
    vals = np.zeros((5, 5))
    vals[1, 1] = vals[2, 2] = 1.0
    mask = np.ones((5, 5), bool)
    eight = connected_regions(vals, mask, IdentParams(connectivity=8))
    four = connected_regions(vals, mask, IdentParams(connectivity=4))
    assert len(eight) == 1 and len(four) == 2
    assert _as_sets(eight) == flood_fill_regions(vals > 0.1, 8)
    assert _as_sets(four) == flood_fill_regions(vals > 0.1, 4)


def test_threshold_is_strict_and_mask_respected():
    vals = np.array([[0.1, 0.11, 0.0, 5.0]])
    mask = np.array([[True, True, True, False]])
    regions = connected_regions(vals, mask)
    assert _as_sets(regions) == {frozenset({(1, 0)})}
    assert regions[0].values.tolist() == [0.11]


@pytest.mark.parametrize("connectivity", [4, 8])
def test_random_blobs_match_flood_fill(connectivity):
    rng = np.random.default_rng(7)
    for _ in range(20):
        vals = np.zeros((50, 50))
        for _ in range(20):
            cx, cy = rng.integers(0, 50, 2)
            r = rng.uniform(1, 5)
            yy, xx = np.mgrid[0:50, 0:50]
            vals[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = rng.uniform(0.2, 3)
        vals *= rng.random((50, 50)) > 0.15
        regions = connected_regions(vals, np.ones((50, 50), bool),
                                    IdentParams(connectivity=connectivity))
        assert _as_sets(regions) == flood_fill_regions(vals > 0.1, connectivity)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))), st.sampled_from([4, 8]))
def test_regions_partition_wet_cells(wet, connectivity):
    vals = wet.astype(float)
    regions = connected_regions(vals, np.ones(wet.shape, bool), IdentParams(connectivity=connectivity))
    cells = [tuple(c) for r in regions for c in r.cells.tolist()]
    assert len(cells) == len(set(cells)) == int(wet.sum())
    assert _as_sets(regions) == flood_fill_regions(wet.tolist(), connectivity)


# ---------------------------------------------------------------- distances and stage 2

def test_min_distance_against_brute_force():
    rng = np.random.default_rng(3)
    g = GridGeometry(nx=30, ny=30, dx_km=10.0, dy_km=7.0)
    for _ in range(30):
        a = rng.integers(0, 30, (rng.integers(1, 40), 2))
        b = rng.integers(0, 30, (rng.integers(1, 40), 2))
        # min_distance_km works on boundary cells, so feed it full blocks too
        assert min_distance_km(a, b, g) == pytest.approx(
            brute_min_distance(a.tolist(), b.tolist(), 10.0, 7.0))


def test_group_by_gap_against_union_find():
    rng = np.random.default_rng(11)
    g = GridGeometry(nx=40, ny=40, dx_km=12.0, dy_km=12.0)
    for _ in range(20):
        sets = []
        for _ in range(rng.integers(2, 9)):
            x0, y0 = rng.integers(0, 35, 2)
            w, h = rng.integers(1, 5, 2)
            sets.append(_block(x0, y0, w, h))
        labels = group_by_gap([np.array(s) for s in sets], 48.0, g)
        got = {}
        for i, lab in enumerate(labels):
            got.setdefault(lab, []).append(i)
        assert sorted(got.values()) == brute_groups(sets, 48.0, 12.0, 12.0)


def test_radius_zero_keeps_regions_apart():
    regs = [_region([(0, 0)]), _region([(2, 0)]), _region([(4, 4)])]
    assert len(almost_connected_label(regs, 0.0, G12)) == 3


def test_merge_distance_is_inclusive():
    # 2 cells apart = 24 km <= 2 * 12 merges; 4 cells apart = 48 km does not
    near = [_region([(0, 0)]), _region([(2, 0)])]
    far = [_region([(0, 0)]), _region([(4, 0)])]
    assert len(almost_connected_label(near, 12.0, G12)) == 1
    assert len(almost_connected_label(far, 12.0, G12)) == 2


def test_transitive_chain_merges():
    regs = [_region([(0, 0)]), _region([(3, 0)]), _region([(6, 0)])]
    segs = almost_connected_label(regs, 18.0, G12)   # 36 km links, A-C is 72 km
    assert len(segs) == 1 and segs[0].n_cells == 3


# ---------------------------------------------------------------- four stages

def test_single_large_blob_equals_stage_one():
    vals = _field_from([(_block(5, 5, 12, 10), 2.0)])
    segs = identify_segments(vals, np.ones(vals.shape, bool), G12)
    assert len(segs) == 1
    assert _as_sets(segs[0].regions) == _as_sets(connected_regions(vals, np.ones(vals.shape, bool)))


def test_chaining_bridge_cell():
    # two 10x10 blobs (100 cells, 14400 km2) 60 km apart edge to edge, one wet cell between
    a, b = _block(5, 10, 10, 10), _block(20, 10, 10, 10)
    bridge = [(17, 14)]                  # 36 km from a, 36 km from b
    vals = _field_from([(a, 2.0), (b, 3.0), (bridge, 1.0)])
    mask = np.ones(vals.shape, bool)
    naive = almost_connected_label(connected_regions(vals, mask), 24.0, G12)
    segs = identify_segments(vals, mask, G12)
    assert len(naive) == 1
    assert len(segs) == 2
    # equal distance: the bridge joins the blob with more precipitation (b)
    owner = [s for s in segs if (17, 14) in set(map(tuple, s.cells.tolist()))][0]
    assert owner.n_cells == 101 and (20, 10) in set(map(tuple, owner.cells.tolist()))


def test_bridge_joins_nearer_blob():
    a, b = _block(5, 10, 10, 10), _block(20, 10, 10, 10)
    vals = _field_from([(a, 2.0), (b, 3.0), ([(16, 14)], 1.0)])
    segs = identify_segments(vals, np.ones(vals.shape, bool), G12)
    owner = [s for s in segs if (16, 14) in set(map(tuple, s.cells.tolist()))][0]
    assert (5, 10) in set(map(tuple, owner.cells.tolist()))


def test_only_small_regions_equal_naive_labeling():
    rng = np.random.default_rng(5)
    vals = (rng.random((40, 60)) > 0.93) * 1.0
    mask = np.ones(vals.shape, bool)
    regions = connected_regions(vals, mask)
    assert max(len(r) for r in regions) < IdentParams().min_cells(G12)
    segs = identify_segments(vals, mask, G12)
    naive = almost_connected_label(regions, 24.0, G12)
    assert [sorted(map(tuple, s.cells.tolist())) for s in segs] == \
        [sorted(map(tuple, s.cells.tolist())) for s in naive]


def test_isolated_small_region_becomes_own_segment():
    vals = _field_from([(_block(5, 5, 10, 10), 2.0), ([(40, 30)], 1.0)])
    segs = identify_segments(vals, np.ones(vals.shape, bool), G12)
    assert sorted(s.n_cells for s in segs) == [1, 100]


def test_large_threshold_from_area():
    assert IdentParams().min_cells(G12) == 7       # ceil(1000 / 144)
    assert IdentParams().min_cells(GridGeometry(nx=1, ny=1, dx_km=10, dy_km=10)) == 10
    assert IdentParams(large_region_min_cells=3).min_cells(G12) == 3


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(float, (20, 24), elements=st.sampled_from([0.0, 0.0, 0.5, 2.0])))
def test_segments_partition_stage_one_cells(vals):
    g = GridGeometry(nx=24, ny=20, dx_km=12, dy_km=12)
    mask = np.ones(vals.shape, bool)
    segs = identify_segments(vals, mask, g)
    cells = sorted(tuple(c) for s in segs for c in s.cells.tolist())
    assert cells == sorted(tuple(c) for r in connected_regions(vals, mask) for c in r.cells.tolist())
    assert [s.id for s in segs] == list(range(len(segs)))
    # stage 2-4 only ever merge what naive labeling would also merge
    naive = almost_connected_label(connected_regions(vals, mask), 24.0, g)
    owner = {c: i for i, s in enumerate(naive) for c in map(tuple, s.cells.tolist())}
    for s in segs:
        assert len({owner[c] for c in map(tuple, s.cells.tolist())}) == 1


def test_identify_field_threads_agree(rng):
    g = GridGeometry(nx=30, ny=30, dx_km=12, dy_km=12)
    vals = rng.gamma(0.3, 2.0, (6, 30, 30))
    fld = GridField(g, vals)
    one = identify_field(fld, threads=1)
    many = identify_field(fld, threads=4)
    for a, b in zip(one, many):
        assert [s.cells.tolist() for s in a] == [s.cells.tolist() for s in b]
        assert all(s.t == t for t, segs in enumerate(one) for s in segs)


def test_param_validation():
    with pytest.raises(ValueError):
        IdentParams(connectivity=6)
    with pytest.raises(ValueError):
        IdentParams(dilation_radius_km=-1)
