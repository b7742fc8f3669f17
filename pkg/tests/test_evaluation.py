import json

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from ept_pinn import evaluation as ev
from ept_pinn import forward_sim as fs
from ept_pinn import network as nw
from ept_pinn.physics import PhysicsConstants

K = PhysicsConstants()
SMALL = nw.MlpConfig(hidden_layers=2, hidden_width=16)


@pytest.fixture(scope="module")
def dataset():
    return fs.generate(fs.GenerateConfig(grid_n=11, peak_snr=100.0, seed=1))


def nets(seed=0):
    return nw.init_sine_mlp(SMALL, seed), nw.init_sine_mlp(SMALL, seed + 1)


# -- pnae --------------------------------------------------------------------

def test_pnae_identity_is_zero():
    t = np.array([1.0, -2.0, 4.0])
    assert ev.pnae(t, t) == 0.0


def test_pnae_worked_example():
    assert ev.pnae([1.1, 2, 4], [1, 2, 4]) == pytest.approx(0.1 / 4 / 3 * 100, rel=1e-12)
    assert ev.pnae([1.1, 2, 4], [1, 2, 4]) == pytest.approx(0.8333, abs=1e-4)


def test_pnae_complex_uses_modulus():
    t = np.array([3 + 4j, 1j])
    assert ev.pnae(t + np.array([0, 0.3 + 0.4j]), t) == pytest.approx(0.5 / 5 / 2 * 100)


def test_pnae_mask():
    t = np.array([1.0, 2.0, 100.0])
    p = np.array([1.5, 2.0, 0.0])
    assert ev.pnae(p, t, [True, True, False]) == pytest.approx(0.5 / 2 / 2 * 100)


def test_pnae_errors():
    with pytest.raises(ValueError):
        ev.pnae([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        ev.pnae([1, 2], [1, 2], [False, False])
    with pytest.raises(ValueError):
        ev.pnae([1, 2], [0, 0])


arrays = st.lists(st.floats(-10, 10), min_size=2, max_size=30)


@settings(max_examples=60)
@given(arrays, st.floats(-5, 5), st.integers(0, 1000))
@example([0.0, 2.2250738585072014e-308], 0.0, 0)
def test_pnae_scale_covariance(truth, c, seed):
    t = np.array(truth)
    if np.abs(t).max() < 1e-3:
        t[0] = 1.0  # a subnormal peak overflows the ratio
    e = np.random.default_rng(seed).normal(size=t.shape)
    assert ev.pnae(t + c * e, t) == pytest.approx(abs(c) * ev.pnae(t + e, t), rel=1e-9, abs=1e-12)


@settings(max_examples=60)
@given(arrays, arrays)
def test_pnae_zero_iff_equal(a, b):
    n = min(len(a), len(b))
    t, p = np.array(a[:n]), np.array(b[:n])
    if np.abs(t).max() == 0:
        t[0] = 1.0
    assert (ev.pnae(p, t) == 0) == np.array_equal(p, t)
    assert ev.pnae(p, t) >= 0


# -- sampling ----------------------------------------------------------------------

def test_refined_sampling_restricts_bitwise(dataset):
    f, e = nets()
    g = dataset.grid
    coarse = ev.sample_networks(f, e, g, dataset.coordinate_map, K, dataset.field_scale)
    fine_grid = g.refined(2)
    fine = ev.sample_networks(f, e, fine_grid, dataset.coordinate_map, K, dataset.field_scale)
    idx = ev._matching_nodes(g, fine_grid)
    assert len(idx) == g.size
    np.testing.assert_allclose(fine_grid.points()[idx], g.points(), rtol=0, atol=1e-15)
    assert coarse.b1.tobytes() == fine.b1[idx].tobytes()
    assert coarse.eps_r.tobytes() == fine.eps_r[idx].tobytes()
    assert coarse.sigma.tobytes() == fine.sigma[idx].tobytes()


def test_sampling_unscales_field(dataset):
    f, e = nets()
    a = ev.sample_networks(f, e, dataset.grid, dataset.coordinate_map, K, 1.0)
    b = ev.sample_networks(f, e, dataset.grid, dataset.coordinate_map, K, 4.0)
    np.testing.assert_allclose(b.b1, a.b1 / 4.0, rtol=1e-15)


def test_zero_eps_network_gives_zero_maps(dataset):
    f, e = nets()
    for w in e.weights:
        w[...] = 0.0
    m = ev.sample_networks(f, e, dataset.grid, dataset.coordinate_map, K)
    assert not m.eps_r.any() and not m.sigma.any()


def test_sampling_outside_box_rejected(dataset):
    f, e = nets()
    big = fs.Grid.cube(5, 0.2)
    with pytest.raises(ValueError, match="outside"):
        ev.sample_networks(f, e, big, dataset.coordinate_map, K)


def test_eps_outputs_convert_to_properties(dataset):
    f, e = nets()
    for w in e.weights:
        w[...] = 0.0
    e.biases[-1][...] = [56.0, -41.73]
    m = ev.sample_networks(f, e, dataset.grid, dataset.coordinate_map, K)
    np.testing.assert_allclose(m.eps_r, 56.0)
    np.testing.assert_allclose(m.sigma, 0.69, atol=1e-3)


# -- evaluate / report -------------------------------------------------------------

def test_evaluate_report(dataset):
    f, e = nets()
    rep = ev.evaluate(f, e, dataset)
    assert rep.voxel_count == dataset.interior_mask.sum()
    assert rep.region == "interior"
    assert min(rep.pnae_b1, rep.pnae_eps, rep.pnae_sigma) >= 0
    assert np.isfinite([rep.pnae_b1, rep.pnae_eps, rep.pnae_sigma]).all()
    # an untrained permittivity network predicts almost nothing: error near the mean/peak ratio
    m = dataset.interior_mask
    assert rep.pnae_eps == pytest.approx(dataset.eps_r[m].mean() / 76 * 100, rel=0.05)


def test_evaluate_on_refined_grid_matches(dataset):
    f, e = nets()
    a = ev.evaluate(f, e, dataset)
    b = ev.evaluate(f, e, dataset, grid=dataset.grid.refined(2))
    assert (a.pnae_b1, a.pnae_eps, a.pnae_sigma) == (b.pnae_b1, b.pnae_eps, b.pnae_sigma)
    assert b.extra["sampled_voxels"] == dataset.grid.refined(2).size


def test_report_json_stable(dataset, tmp_path):
    f, e = nets()
    text = ev.evaluate(f, e, dataset, per_slice_axis=2).to_json()
    assert text == ev.evaluate(f, e, dataset, per_slice_axis=2).to_json()
    d = json.loads(text)
    assert list(d) == sorted(d)
    assert "timestamp" not in d and d["format_version"] == ev.REPORT_FORMAT_VERSION
    assert "timestamp" in json.loads(ev.EvalReport.from_json(text).to_json("2026-01-01T00:00:00Z"))
    back = ev.EvalReport.from_json(text)
    assert back.to_json() == text


def test_slice_breakdown_covers_interior(dataset):
    f, e = nets()
    rep = ev.evaluate(f, e, dataset, per_slice_axis=2)
    assert sum(s["voxels"] for s in rep.slices) == rep.voxel_count
    # voxel-weighted average of slice errors equals the volume error (common peak)
    avg = sum(s["pnae_eps"] * s["voxels"] for s in rep.slices) / rep.voxel_count
    assert avg == pytest.approx(rep.pnae_eps, rel=1e-12)


# -- slices ------------------------------------------------------------------------

def test_constant_slice(tmp_path):
    g = fs.Grid.cube(6)
    out = ev.export_slice(np.full(g.size, 2.5), g, 1, 3, tmp_path / "c.csv")
    assert np.all(out == 2.5)
    cells = {c for line in (tmp_path / "c.csv").read_text().splitlines() for c in line.split(",")}
    assert cells == {"2.5"}


@pytest.mark.parametrize("axis", [0, 1, 2])
@pytest.mark.parametrize("part", ["abs", "re", "im", "phase"])
def test_export_roundtrip_bitwise(tmp_path, axis, part):
    g = fs.Grid((4, 5, 6), (1.0, 1.0, 1.0), (0, 0, 0))
    rng = np.random.default_rng(axis)
    vals = rng.normal(size=g.size) + 1j * rng.normal(size=g.size)
    written = ev.export_slice(vals, g, axis, 2, tmp_path / "s.csv", part=part)
    back = ev.read_slice(tmp_path / "s.csv")
    assert back.tobytes() == written.tobytes()
    expected = {"abs": np.abs, "re": np.real, "im": np.imag, "phase": np.angle}[part](
        ev.slice_of(vals, g, axis, 2))
    assert written.tobytes() == expected.tobytes()


def test_slice_orientation():
    g = fs.Grid((4, 5, 6), (1.0, 1.0, 1.0), (0, 0, 0))
    idx = np.arange(g.size, dtype=float)  # value = i + nx*(j + ny*k)
    assert ev.slice_of(idx, g, 2, 1).shape == (5, 4)  # rows: y, columns: x
    assert ev.slice_of(idx, g, 2, 1)[2, 3] == 3 + 4 * (2 + 5 * 1)
    assert ev.slice_of(idx, g, 0, 3)[1, 2] == 3 + 4 * (2 + 5 * 1)  # rows: z, columns: y


def test_slice_index_out_of_range(tmp_path):
    g = fs.Grid.cube(5)
    with pytest.raises(IndexError):
        ev.export_slice(np.zeros(g.size), g, 2, 5, tmp_path / "x.csv")


def test_central_axial_cut_of_truth():
    g = fs.Grid.cube(41)
    eps, _ = fs.rasterize_phantom(fs.default_phantom(), g, K)
    cut = ev.slice_of(eps.real, g, 2, 20)
    assert set(np.unique(cut)) == {1.0, 56.0, 51.0, 65.0, 76.0}
