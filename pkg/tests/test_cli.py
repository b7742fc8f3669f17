import json

import numpy as np
import pytest

from ept_pinn import cli
from ept_pinn import evaluation as ev
from ept_pinn import forward_sim as fs
from ept_pinn import network as nw
from ept_pinn import trainer as tr

TRAIN_CFG = {
    "field_network": {"hidden_layers": 2, "hidden_width": 8, "omega0": 15.0},
    "eps_network": {"hidden_layers": 2, "hidden_width": 8},
    "training": {"iterations": 0, "log_every": 1},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.json").write_text(json.dumps({"grid_n": 10, "peak_snr": 100.0}))
    assert cli.main(["generate", "--config", str(d / "gen.json"), "--out", str(d / "d.eptd"), "--seed", "4"]) == 0
    (d / "train.json").write_text(json.dumps(TRAIN_CFG))
    rc = cli.main(["train", "--data", str(d / "d.eptd"), "--config", str(d / "train.json"),
                   "--out", str(d / "m.eptm"), "--log", str(d / "log.csv"), "--seed", "3"])
    assert rc == 0
    return d


def test_generate_writes_dataset(work):
    ds = fs.load_dataset(work / "d.eptd")
    assert ds.grid.dims == (10, 10, 10) and ds.meta["seed"] == 4


def test_zero_iteration_pipeline(work):
    rc = cli.main(["evaluate", "--data", str(work / "d.eptd"), "--model", str(work / "m.eptm"),
                   "--report", str(work / "r.json")])
    assert rc == 0
    rep = json.loads((work / "r.json").read_text())
    for key in ("pnae_b1", "pnae_eps", "pnae_sigma"):
        assert np.isfinite(rep[key]) and rep[key] > 10
    assert "timestamp" not in rep
    rows = tr.read_log(work / "log.csv")
    assert [r["iteration"] for r in rows] == [0]


def test_seed_reaches_networks(work):
    nets, header, _ = nw.load_model(work / "m.eptm")
    assert header["seeds"] == {"field": 3, "eps": 4}
    assert nets["field"].flatten().tobytes() == nw.init_sine_mlp(nets["field"].config, 3).flatten().tobytes()
    assert nets["field"].config.omega0 == 15.0


def test_evaluate_is_byte_stable(work):
    out = []
    for name in ("a.json", "b.json"):
        cli.main(["evaluate", "--data", str(work / "d.eptd"), "--model", str(work / "m.eptm"),
                  "--report", str(work / name), "--slices", "z"])
        out.append((work / name).read_bytes())
    assert out[0] == out[1]
    assert json.loads(out[0])["slices"]


def test_evaluate_refined_grid(work):
    rc = cli.main(["evaluate", "--data", str(work / "d.eptd"), "--model", str(work / "m.eptm"),
                   "--grid", "19,19,19", "--report", str(work / "fine.json"), "--timestamp"])
    assert rc == 0
    fine = json.loads((work / "fine.json").read_text())
    coarse = json.loads((work / "r.json").read_text()) if (work / "r.json").exists() else None
    assert fine["extra"]["sampled_voxels"] == 19 ** 3 and "timestamp" in fine
    if coarse:
        assert fine["pnae_eps"] == coarse["pnae_eps"]


@pytest.mark.parametrize("what", ["b1", "eps", "sigma"])
def test_export(work, what):
    out = work / f"{what}.csv"
    rc = cli.main(["export", "--model", str(work / "m.eptm"), "--map", what, "--axis", "z",
                   "--index", "5", "--out", str(out)])
    assert rc == 0
    assert ev.read_slice(out).shape == (10, 10)


def test_export_refined(work):
    out = work / "fine.csv"
    assert cli.main(["export", "--model", str(work / "m.eptm"), "--map", "b1", "--axis", "x",
                     "--index", "0", "--out", str(out), "--grid", "21,21,21", "--part", "phase"]) == 0
    assert ev.read_slice(out).shape == (21, 21)


def test_resume(work):
    cfg = json.loads(json.dumps(TRAIN_CFG))
    cfg["training"]["iterations"] = 2
    (work / "t2.json").write_text(json.dumps(cfg))
    rc = cli.main(["train", "--data", str(work / "d.eptd"), "--config", str(work / "t2.json"),
                   "--out", str(work / "m2.eptm"), "--resume", str(work / "m.eptm"), "--seed", "3"])
    assert rc == 0
    _, header, _ = nw.load_model(work / "m2.eptm")
    assert header["iteration"] == 2


@pytest.mark.parametrize("argv,msg", [
    (["evaluate", "--data", "/nonexistent.eptd", "--model", "x", "--report", "r"], "No such file"),
    (["export", "--model", "/nonexistent", "--map", "b1", "--axis", "z", "--index", "0", "--out", "o"], ""),
    (["generate", "--config", "/nonexistent.json", "--out", "o"], "not found"),
])
def test_bad_paths_fail_cleanly(argv, msg, capsys):
    assert cli.main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith(f"ept-pinn {argv[0]}: error:") and msg in err


def test_bad_index_and_grid(work, capsys):
    assert cli.main(["export", "--model", str(work / "m.eptm"), "--map", "b1", "--axis", "z",
                     "--index", "10", "--out", str(work / "x.csv")]) == 1
    assert cli.main(["evaluate", "--data", str(work / "d.eptd"), "--model", str(work / "m.eptm"),
                     "--grid", "3,3", "--report", str(work / "x.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_flags_exit_nonzero():
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--nope"])
    assert info.value.code != 0


def test_unknown_config_section(work, capsys):
    (work / "bad.json").write_text(json.dumps({"optimizer": {}}))
    rc = cli.main(["train", "--data", str(work / "d.eptd"), "--config", str(work / "bad.json"),
                   "--out", str(work / "bad.eptm")])
    assert rc == 1 and "unknown config sections" in capsys.readouterr().err
