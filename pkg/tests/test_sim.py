from collections import Counter

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from rainstorm import metrics, synthetic
from rainstorm.gridio import GridField, GridGeometry
from rainstorm.ident import Region, Segment
from rainstorm.metrics import StormMetrics
from rainstorm.sim import (QuantileTransfer, ResizeFactorMap, adjust_series,
                           apply_quantile_transfer, build_quantile_transfer, build_resize_map,
                           gridcellwise_simulate, resize_field, resize_storm, simulate_future,
                           split_substorms, storm_events)
from rainstorm.tracking import StormEvent

G = GridGeometry(nx=64, ny=64, dx_km=12.0, dy_km=12.0, lat0=35.0, lon0=-100.0, dt_hours=3.0)
MASK = np.ones(G.shape, bool)


def seg(cells, values=1.0, t=0):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    vals = np.broadcast_to(np.asarray(values, float), (len(cells),)).copy()
    return Segment([Region(cells, vals)], t=t)


def block(x0, y0, w, h):
    return [(x, y) for y in range(y0, y0 + h) for x in range(x0, x0 + w)]


def disc(cx, cy, r):
    return [(x, y) for y in range(cy - r, cy + r + 1) for x in range(cx - r, cx + r + 1)
            if (x - cx) ** 2 + (y - cy) ** 2 <= r * r]


def size_metrics(cells, sizes):
    out = []
    for i, ((x, y), s) in enumerate(zip(cells, sizes)):
        lat, lon = G.latlon(x, y)
        out.append(StormMetrics(i, 0, np.array([s]), np.ones(1),
                                np.array([[float(lat), float(lon)]]), G.cell_area_km2, 3.0))
    return out


# ---------------------------------------------------------------- resize map

def test_resize_map_identity_and_uniform_shrink():
    pts = [(5, 5), (40, 12), (20, 50), (60, 60)]
    base = size_metrics(pts, [100, 40, 70, 10])
    same = build_resize_map(base, base, G, MASK)
    assert np.all(same.factors == 1.0)
    shrunk = size_metrics(pts, [81, 32.4, 56.7, 8.1])
    r = build_resize_map(base, shrunk, G, MASK)
    assert np.allclose(r.factors, 0.9, rtol=1e-12)


def test_resize_map_varies_smoothly_between_regions():
    west = [(5, y) for y in range(4, 64, 8)]
    east = [(58, y) for y in range(4, 64, 8)]
    base = size_metrics(west + east, [100] * 16)
    fut = size_metrics(west + east, [64] * 8 + [100] * 8)
    r = build_resize_map(base, fut, G, MASK, threads=3).factors
    row = r[32]
    assert row[0] == pytest.approx(0.8, abs=1e-3) and row[-1] == pytest.approx(1.0, abs=1e-3)
    assert np.all(np.diff(row) >= -1e-12)
    assert np.all((r >= 0.8 - 1e-12) & (r <= 1.0 + 1e-12))


def test_factor_at_undefined_is_one():
    m = ResizeFactorMap(G, np.full(G.shape, np.nan), MASK)
    assert m.factor_at(35.0, -100.0) == 1.0


# ---------------------------------------------------------------- sub-storms

def test_split_substorms_distances():
    assert len(split_substorms(seg(block(5, 5, 4, 4)), G)) == 1
    # 12 km cells: 17 cells = 204 km apart, 4 cells = 48 km apart
    far = seg(block(0, 0, 3, 3) + block(19, 0, 3, 3))
    near = seg(block(0, 0, 3, 3) + block(6, 0, 3, 3))
    assert len(split_substorms(far, G)) == 2
    assert len(split_substorms(near, G)) == 1


def test_split_substorms_chain_is_transitive():
    # A-B and B-C about 96 km apart, A-C far beyond 120 km
    chain = seg([(0, 0), (8, 0), (16, 0)])
    assert len(split_substorms(chain, G)) == 1


# ---------------------------------------------------------------- resize one storm

def test_resize_identity():
    s = seg(block(3, 4, 5, 2), np.arange(10.0))
    out = resize_storm(s, 1.0)
    assert out.cells.tolist() == s.cells.tolist()
    assert out.values.tolist() == s.values.tolist()


def test_resize_block_half():
    s = seg(block(10, 10, 4, 4), 2.5)
    out = resize_storm(s, 0.5)
    assert sorted(map(tuple, out.cells.tolist())) == sorted(block(11, 11, 2, 2))
    assert np.all(out.values == 2.5)
    assert np.allclose(out.centroid_xy(), s.centroid_xy())


def test_resize_round_trip_within_one_ring():
    s = seg(disc(30, 30, 8), 1.0)
    back = resize_storm(resize_storm(s, 0.5), 2.0)
    orig = set(map(tuple, s.cells.tolist()))
    ring = {(x + dx, y + dy) for x, y in orig for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
    got = set(map(tuple, back.cells.tolist()))
    assert got <= ring
    core = {(x, y) for x, y in orig if all((x + dx, y + dy) in orig
                                          for dx in (-1, 0, 1) for dy in (-1, 0, 1))}
    assert core <= got


def test_resize_vanishing_storm():
    # a compact storm always keeps its center cell
    assert resize_storm(seg([(5, 5)]), 0.2).n_cells == 1
    # two far cells: the centroid falls in the empty gap between them
    assert resize_storm(seg([(0, 0), (10, 0)]), 0.1) is None
    with pytest.raises(ValueError):
        resize_storm(seg([(5, 5)]), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.floats(0.3, 1.0),
       st.lists(st.floats(0.2, 9.0), min_size=49, max_size=49))
def test_resize_values_are_a_sub_multiset(w, h, r, pool):
    cells = block(20, 20, w, h)
    s = seg(cells, np.array(pool[:len(cells)]))
    out = resize_storm(s, r)
    if out is None:
        return
    # for r <= 1 distinct targets have distinct pre-images, so values are never duplicated
    assert not Counter(out.values.tolist()) - Counter(s.values.tolist())
    assert out.n_cells <= s.n_cells


# ---------------------------------------------------------------- resize a field

def _one_storm_field(cells, value=2.0, nt=1, t=0):
    vals = np.zeros((nt,) + G.shape)
    for x, y in cells:
        vals[t, y, x] = value
    return GridField(G, vals)


def test_resize_field_identity_map():
    sc = synthetic.generate(G, 12, 8, seed=3)
    fld, _ = synthetic.render(sc)
    out = resize_field(fld, storm_events(fld), ResizeFactorMap.uniform(G, 1.0))
    assert out == fld


def test_resize_field_quarter_total():
    fld = _one_storm_field(disc(32, 32, 14))
    out = resize_field(fld, storm_events(fld), ResizeFactorMap.uniform(G, 0.5))
    assert out.total() / fld.total() == pytest.approx(0.25, rel=0.05)
    assert set(np.unique(out.values)) <= {0.0, 2.0}


def test_resize_field_local_factors():
    cells_w, cells_e = disc(12, 32, 8), disc(52, 32, 8)
    fld = _one_storm_field(cells_w + cells_e)
    factors = np.where(np.arange(G.nx)[None, :] < 32, 0.5, 1.0) * np.ones(G.shape)
    rmap = ResizeFactorMap(G, factors, MASK)
    out = resize_field(fld, storm_events(fld), rmap)
    west = out.values[0, :, :32].sum() / fld.values[0, :, :32].sum()
    east = out.values[0, :, 32:].sum() / fld.values[0, :, 32:].sum()
    assert west == pytest.approx(0.25, rel=0.15)
    assert east == 1.0


def test_resize_field_logs_removed_storm():
    fld = _one_storm_field([(10, 10), (20, 10)])
    ev = StormEvent(0, 0, [[seg([(10, 10), (20, 10)])]])
    log = []
    out = resize_field(fld, [ev], ResizeFactorMap.uniform(G, 0.1), gap_km=200.0, log=log)
    assert [e["kind"] for e in log] == ["storm_removed"]
    assert out.total() == 0.0


def test_resize_field_overlap_takes_maximum():
    # one segment, two parts 132 km apart edge to edge; tripling both makes them collide
    a, b = disc(20, 32, 3), disc(37, 32, 3)
    vals = np.zeros((1,) + G.shape)
    for x, y in a:
        vals[0, y, x] = 1.0
    for x, y in b:
        vals[0, y, x] = 3.0
    fld = GridField(G, vals)
    ev = StormEvent(0, 0, [[seg(a + b, [1.0] * len(a) + [3.0] * len(b))]])
    log = []
    out = resize_field(fld, [ev], ResizeFactorMap.uniform(G, 3.0), gap_km=120.0, log=log)
    assert [e["kind"] for e in log] == ["overlap"]
    assert set(np.unique(out.values[0])) <= {0.0, 1.0, 3.0}
    assert out.values[0, 32, 28] == 3.0 and out.values[0, 32, 20] == 1.0


# ---------------------------------------------------------------- quantile transfer

def _random_field(rng, nt=80, scale=1.0, p_wet=0.4):
    g = GridGeometry(nx=6, ny=5, dx_km=12, dy_km=12)
    vals = rng.gamma(0.8, 2.0, (nt,) + g.shape) * (rng.random((nt,) + g.shape) < p_wet)
    return GridField(g, scale * vals)


def test_transfer_identity_and_scaling(rng):
    base = _random_field(rng)
    same = build_quantile_transfer(base, base)
    assert np.all(same.w_b == same.w_f)
    assert np.all(same.q_f / same.q_b == 1.0)
    double = build_quantile_transfer(base, base.with_values(2 * base.values))
    assert np.allclose(double.q_f / double.q_b, 2.0, rtol=1e-12)


def test_transfer_wet_fraction_change():
    g = GridGeometry(nx=1, ny=1, dx_km=1, dy_km=1)
    b = np.zeros((10, 1, 1))
    f = np.zeros((10, 1, 1))
    b[:5] = 1.0
    f[:4] = 1.0
    tr = build_quantile_transfer(GridField(g, b), GridField(g, f))
    assert tr.w_b[0, 0] == 0.5 and tr.w_f[0, 0] == 0.4
    assert 1 - tr.wet_change(0, 0) == pytest.approx(0.2)


def test_transfer_promote_only_flag():
    g = GridGeometry(nx=2, ny=1, dx_km=1, dy_km=1)
    b = np.zeros((4, 1, 2))
    f = np.zeros((4, 1, 2))
    b[0, 0, 0] = f[0, 0, 0] = 1.0
    f[1, 0, 1] = 2.0
    tr = build_quantile_transfer(GridField(g, b), GridField(g, f))
    assert tr.promote_only.tolist() == [[False, True]]


LEVELS = np.linspace(0, 1, 100)
ONES = np.ones(100)


def test_adjust_series_demotes_lowest():
    out = adjust_series([0, 1, 2, 3, 4], 0.8, 0.6, ONES, ONES, LEVELS,
                        np.zeros(5), np.zeros(5))
    assert out.tolist() == [0, 0, 2, 3, 4]


def test_adjust_series_uniform_ratio_doubles():
    x = np.array([0, 1.5, 0, 4, 2.0])
    out = adjust_series(x, 0.6, 0.6, ONES, 2 * ONES, LEVELS, np.zeros(5), np.zeros(5))
    assert out.tolist() == (2 * x).tolist()


def test_adjust_series_promotion_uses_spatial_then_temporal():
    x = np.array([0.0, 2.0, 0.0, 0.0, 0.0, 0.0])
    smax = np.array([0.0, 0.0, 0.0, 5.0, 0.0, 0.0])
    smean = np.array([0.0, 0.0, 0.0, 3.0, 0.0, 0.0])
    # wet count 1 -> 3: one spatial promotion (t=3) then one temporal (t=0 or t=2)
    out = adjust_series(x, 0.2, 0.6, ONES, ONES, LEVELS, smax, smean,
                        np.random.default_rng(0))
    assert (out > 0).sum() == 3
    assert out[3] == 3.0
    assert sorted(out[[0, 2]].tolist()) == [0.0, 2.0]


def test_adjust_series_logs_shortfall():
    log = []
    out = adjust_series([0.0, 0.0, 0.0, 1.0], 0.25, 1.0, ONES, ONES, LEVELS,
                        np.zeros(4), np.zeros(4), log=log, where={"x": 0, "y": 0})
    # only t=2 has a wet temporal neighbour; two more steps are missing
    assert (out > 0).sum() == 2
    assert log == [{"kind": "promotion_short", "x": 0, "y": 0, "missing": 2}]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.0, 0.5, 1.0, 2.5, 4.0, 7.0]), min_size=2, max_size=40),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0),
       st.lists(st.floats(0.5, 3.0), min_size=5, max_size=5), st.integers(0, 2 ** 31))
def test_adjust_series_contracts(series, w_b, w_f, ratio_knots, seed):
    x = np.array(series)
    n, nt = int((x > 0).sum()), len(x)
    assume(n > 0)
    levels = np.linspace(0, 1, 5)
    q_b = np.linspace(1, 5, 5)
    q_f = q_b * np.array(ratio_knots)
    smax = np.full(nt, 1.0)                    # every dry step can be promoted
    out = adjust_series(x, w_b, w_f, q_b, q_f, levels, smax, smax,
                        np.random.default_rng(seed))
    target = min(nt, max(0, int(np.floor(n * w_f / w_b + 0.5))))
    assert int((out > 0).sum()) == target
    assert np.all(out >= 0)
    # rank order of the surviving wet values is preserved
    keep = (x > 0) & (out > 0)
    xi, yi = x[keep], out[keep]
    for i in range(len(xi)):
        for j in range(len(xi)):
            if xi[i] < xi[j]:
                assert yi[i] <= yi[j]


def test_apply_transfer_identity_and_threads(rng):
    obs = _random_field(rng)
    base = _random_field(rng)
    same = build_quantile_transfer(base, base)
    assert apply_quantile_transfer(obs, same) == obs
    fut = _random_field(rng, p_wet=0.3, scale=1.4)
    tr = build_quantile_transfer(base, fut)
    a = apply_quantile_transfer(obs, tr, seed=7, threads=1)
    b = apply_quantile_transfer(obs, tr, seed=7, threads=4)
    assert np.array_equal(a.values, b.values, equal_nan=True)


def test_gridcell_uniform_doubling(rng):
    obs = _random_field(rng)
    base = _random_field(rng)
    out = gridcellwise_simulate(obs, base, base.with_values(2 * base.values))
    assert np.allclose(out.values, 2 * obs.values, rtol=1e-12)


def test_uniform_transfer_helper():
    tr = QuantileTransfer.uniform(G, 1.25)
    assert np.allclose(tr.ratios(3, 4), 1.25) and tr.wet_change(3, 4) == 1.0


# ---------------------------------------------------------------- end to end

@pytest.fixture(scope="module")
def synth_pair():
    sc = synthetic.generate(G, 60, 40, seed=1)
    base, _ = synthetic.render(sc)
    fut, _ = synthetic.render(sc, size_scale=0.8, intensity_scale=1.3)
    return base, fut


def test_simulators_identity_law(synth_pair):
    base, _ = synth_pair
    rng = np.random.default_rng(4)
    obs = base.with_values(base.values * rng.uniform(0.5, 1.5, base.values.shape))
    for out in (simulate_future(obs, base, base), gridcellwise_simulate(obs, base, base)):
        assert np.max(np.abs(out.values - obs.values)) <= 1e-9
        assert np.array_equal(out.values > 0, obs.values > 0)


def test_self_simulation_moves_factors_to_future(synth_pair):
    base, fut = synth_pair
    out = simulate_future(base, base, fut, threads=4)

    def factors(f):
        ms = metrics.trim_negligible(metrics.compute_all(storm_events(f), G))
        return metrics.factorize(ms)

    fo, ff = factors(out), factors(fut)
    assert fo.avg_intensity_mm_per_hour == pytest.approx(ff.avg_intensity_mm_per_hour, rel=0.10)
    assert fo.size_factor_km2 == pytest.approx(ff.size_factor_km2, rel=0.10)


def test_storm_and_gridcell_methods_differ(synth_pair):
    base, fut = synth_pair
    storm = simulate_future(base, base, fut, threads=2)
    grid = gridcellwise_simulate(base, base, fut, threads=2)
    differ = (storm.values > 0) != (grid.values > 0)
    assert differ.any()
    # storm shrinking dries whole storm edges, so the storm method has more dry cells
    assert (storm.values == 0).sum() >= (grid.values == 0).sum() - differ.sum()


def test_simulation_threads_identical(synth_pair):
    base, fut = synth_pair
    a = simulate_future(base, base, fut, threads=1)
    b = simulate_future(base, base, fut, threads=8)
    assert np.array_equal(a.values, b.values)
