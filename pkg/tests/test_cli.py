import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from metsolver.cli import main

BD = """\
species X
bound 10
reaction kb : 0 -> X
reaction kd : X -> 0
rate kb 1.0
rate kd 0.1
init X 0
time 0 100
"""


@pytest.fixture
def bd_file(tmp_path):
    path = tmp_path / "bd.cme"
    path.write_text(BD)
    return path


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_solve_exact_writes_csv_manifest_figure(tmp_path, bd_file):
    out = tmp_path / "run"
    rc = main(["solve-exact", "--model", str(bd_file), "--t", "10", "--out", str(out)])
    assert rc == 0
    assert (out / "p_t10.csv").exists()
    assert (out / "marginal_X_t10.png").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "solve-exact"
    assert "p_t10.csv" in manifest["artifacts"]
    assert manifest["artifacts"]["p_t10.csv"] == _sha(out / "p_t10.csv")
    # probabilities sum to one
    rows = np.loadtxt(out / "p_t10.csv", delimiter=",", skiprows=1)
    assert abs(rows[:, 2].sum() - 1.0) < 1e-9


def test_solve_exact_no_figures(tmp_path, bd_file):
    out = tmp_path / "run"
    rc = main(["solve-exact", "--model", str(bd_file), "--t", "1,5", "--out", str(out), "--no-figures"])
    assert rc == 0
    assert not list(out.glob("*.png"))
    assert (out / "p_t1.csv").exists() and (out / "p_t5.csv").exists()


def test_missing_model_is_validation_error(tmp_path):
    rc = main(["solve-exact", "--model", str(tmp_path / "nope.cme"), "--t", "1", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_train_met_missing_reward_set_exit_2(tmp_path, bd_file, capsys):
    rc = main(
        ["train-met", "--model", str(bd_file), "--reward-set", str(tmp_path / "missing.jsonl"),
         "--seed", "1", "--out", str(tmp_path / "o")]
    )
    assert rc == 2
    assert "missing.jsonl" in capsys.readouterr().err


def test_simulate_requires_seed(tmp_path, bd_file):
    rc = main(["simulate", "--model", str(bd_file), "--grid", "1", "--n", "5", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_simulate_byte_identical_reruns(tmp_path, bd_file):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        rc = main(
            ["simulate", "--model", str(bd_file), "--grid", "1,3", "--n", "200",
             "--seed", "7", "--out", str(out), "--no-figures"]
        )
        assert rc == 0
    assert _sha(out1 / "ensemble.bin") == _sha(out2 / "ensemble.bin")
    assert _sha(out1 / "ensemble.csv") == _sha(out2 / "ensemble.csv")


def test_simulate_worker_count_invariance(tmp_path, bd_file, monkeypatch):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("MET_THREADS", "1")
    assert main(["simulate", "--model", str(bd_file), "--grid", "2", "--n", "64",
                 "--seed", "3", "--out", str(out1), "--no-figures"]) == 0
    monkeypatch.setenv("MET_THREADS", "4")
    assert main(["simulate", "--model", str(bd_file), "--grid", "2", "--n", "64",
                 "--seed", "3", "--out", str(out2), "--no-figures"]) == 0
    assert _sha(out1 / "ensemble.bin") == _sha(out2 / "ensemble.bin")


def test_output_dir_lock(tmp_path, bd_file):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    rc = main(["solve-exact", "--model", str(bd_file), "--t", "1", "--out", str(out)])
    assert rc == 2


def test_config_file_with_flag_override(tmp_path, bd_file):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"model": str(bd_file), "times": [2.0], "out": str(tmp_path / "from_cfg")}))
    out = tmp_path / "flag_wins"
    rc = main(["solve-exact", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    assert (out / "p_t2.csv").exists()


def test_analyze_metrics_and_figures(tmp_path, bd_file):
    sim = tmp_path / "sim"
    assert main(["simulate", "--model", str(bd_file), "--grid", "1,5", "--n", "500",
                 "--seed", "5", "--out", str(sim), "--no-figures"]) == 0
    out = tmp_path / "analysis"
    rc = main(["analyze", "--ensemble", str(sim / "ensemble.bin"), "--t", "5",
               "--species", "0", "--out", str(out)])
    assert rc == 0
    text = (out / "metrics.csv").read_text()
    assert "mean_s0_t5" in text
    assert (out / "compare_s0_t5.png").exists()


def test_analyze_two_ensembles_hellinger(tmp_path, bd_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, seed in ((a, 1), (b, 2)):
        assert main(["simulate", "--model", str(bd_file), "--grid", "5", "--n", "400",
                     "--seed", str(seed), "--out", str(out), "--no-figures"]) == 0
    out = tmp_path / "cmp"
    rc = main(["analyze", "--ensemble", str(a / "ensemble.bin"), "--ensemble", str(b / "ensemble.bin"),
               "--t", "5", "--out", str(out), "--no-figures"])
    assert rc == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert any(line.startswith("hellinger_s0_t5") for line in lines)


def test_gradcheck_command(tmp_path):
    rc = main(["gradcheck", "--out", str(tmp_path / "g")])
    assert rc == 0
    assert (tmp_path / "g" / "gradcheck.csv").exists()


def test_train_reward_and_sample_round_trip(tmp_path, bd_file):
    reward_dir = tmp_path / "reward"
    rc = main(
        ["train-reward", "--model", str(bd_file), "--dt", "0.01", "--t-final", "0.02",
         "--save-times", "0,0.02", "--width", "8", "--epochs", "2", "--batch", "50",
         "--seed", "3", "--out", str(reward_dir), "--no-figures"]
    )
    assert rc == 0
    assert (reward_dir / "manifest.jsonl").exists()

    met_dir = tmp_path / "met"
    rc = main(
        ["train-met", "--model", str(bd_file), "--reward-set", str(reward_dir / "manifest.jsonl"),
         "--d-emb", "16", "--d-ff", "64", "--d-l", "1", "--heads", "2", "--d-p", "4",
         "--s-batch", "20", "--m-acc", "2", "--epochs", "2", "--seed", "4",
         "--out", str(met_dir), "--no-figures"]
    )
    assert rc == 0
    ckpt = met_dir / "met.ckpt"
    assert ckpt.exists() and (met_dir / "loss_trace.csv").exists()

    sample_dir = tmp_path / "samples"
    rc = main(["sample", "--checkpoint", str(ckpt), "--t", "0.02", "--n", "50",
               "--seed", "5", "--out", str(sample_dir), "--no-figures"])
    assert rc == 0
    lines = (sample_dir / "samples.csv").read_text().strip().splitlines()
    assert lines[0] == "X"
    assert len(lines) == 51

    traj_dir = tmp_path / "traj"
    rc = main(["trajectories", "--checkpoint", str(ckpt), "--dt", "0.02", "--steps", "3",
               "--n", "10", "--seed", "6", "--out", str(traj_dir), "--no-figures"])
    assert rc == 0
    assert (traj_dir / "ensemble.bin").exists()

    sweep_dir = tmp_path / "sweep"
    rc = main(["sweep", "--checkpoint", str(ckpt), "--names", "kb,kd",
               "--grid-x", "0.5:2:2", "--grid-y", "0.05:0.2:2:log", "--t", "0.02",
               "--n-samples", "40", "--species", "0", "--seed", "8",
               "--out", str(sweep_dir), "--no-figures"])
    assert rc == 0
    assert (sweep_dir / "sweep.csv").exists()

    infer_dir = tmp_path / "infer"
    sim_dir = tmp_path / "sim_for_infer"
    assert main(["simulate", "--model", str(bd_file), "--grid", "0.02", "--n", "50",
                 "--seed", "9", "--out", str(sim_dir), "--no-figures"]) == 0
    rc = main(["infer", "--checkpoint", str(ckpt), "--data", str(sim_dir / "ensemble.bin"),
               "--steps", "5", "--batch", "20", "--std", "kd=0.05", "--seed", "10",
               "--out", str(infer_dir), "--no-figures"])
    assert rc == 0
    assert (infer_dir / "chain.csv").exists()


def test_shipped_models_parse():
    from importlib import resources

    import metsolver.models
    from metsolver.model import parse_model

    expected = {
        "birth_death.cme": (1, 2),
        "toggle_switch.cme": (4, 8),
        "autoreg.cme": (2, 5),
        "gene_express.cme": (2, 4),
        "mrna_turnover.cme": (4, 7),
        "cascade.cme": (15, 30),
    }
    for name, (n, m) in expected.items():
        text = resources.files(metsolver.models).joinpath(name).read_text()
        net = parse_model(text)
        assert (net.n_species, net.n_reactions) == (n, m), name
