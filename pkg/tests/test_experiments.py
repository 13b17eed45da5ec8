import loopymp as lmp
import numpy as np
import pytest


def _cfg(command, **kwargs):
    defaults = dict(num_graphs=30, chunk_size=10)
    defaults.update(kwargs)
    return lmp.ExperimentConfig(command=command, **defaults)


def _model(tmp_path, n_in, name="model.txt"):
    path = str(tmp_path / name)
    lmp.save_params(lmp.init_params(n_in, seed=0), path)
    return path


def test_config_validation():
    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(command="plot")
    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(algos=("spa", "gibbs"))
    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(grid=1)
    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(num_graphs=0)
    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(mu=1.0)


def test_settings_leave_out_workers():
    s = lmp.ExperimentConfig(workers=4, models={"cycbp": "m.txt"}).settings()

    assert "workers" not in s.d
    assert s["models", "cycbp"] == "m.txt"
    assert s["seed"] == 0


def test_train_config_conversion():
    cfg = lmp.ExperimentConfig(command="train", loss="bethe", mode="extrinsic")
    tcfg = cfg.train_config()
    assert tcfg.loss_kind is lmp.LossKind.BETHE
    assert tcfg.mode is lmp.Mode.EXTRINSIC

    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(command="train", loss="mse").train_config()
    with pytest.raises(lmp.ConfigurationError):
        lmp.ExperimentConfig(command="train", loss="bmi").train_config()


def test_load_models_errors(tmp_path):
    with pytest.raises(lmp.ConfigurationError, match="cycbp"):
        lmp.load_models(_cfg("ising-table", algos=("cycbp",)), lmp.TaskKind.ISING)

    missing = _cfg(
        "ising-table", algos=("cycbp",), models={"cycbp": str(tmp_path / "no")}
    )
    with pytest.raises(lmp.ConfigurationError, match="cycbp"):
        lmp.load_models(missing, lmp.TaskKind.ISING)

    wrong = _cfg("ising-table", algos=("cycbp",), models={"cycbp": _model(tmp_path, 2)})
    with pytest.raises(lmp.ConfigurationError):
        lmp.load_models(wrong, lmp.TaskKind.ISING)

    ok = _cfg(
        "channel-sweep",
        algos=("spa", "cycbp_e"),
        models={"cycbp_e": _model(tmp_path, 6)},
    )
    assert list(lmp.load_models(ok, lmp.TaskKind.CHANNEL)) == ["cycbp_e"]


def test_run_algorithm_registry(tmp_path):
    graphs = lmp.sample_spin_glasses(2.0, 3, np.random.default_rng(0))
    models = {"cycbp_e": lmp.init_params(2, 0), "cycbp": lmp.init_params(5, 0)}
    cfg = _cfg("ising-table")

    assert lmp.ALGORITHMS == ("spa", "spa_mu", "cccp", "cycbp_e", "cycbp", "exact")
    assert tuple(lmp.RUNNERS) == lmp.ALGORITHMS
    for name in lmp.ALGORITHMS:
        beliefs = lmp.run_algorithm(name, graphs, cfg, models)
        assert beliefs.singles.shape == (3, 4, 2)
        assert np.allclose(beliefs.singles.sum(axis=-1), 1.0)

    with pytest.raises(lmp.ConfigurationError):
        lmp.run_algorithm("bp", graphs, cfg, models)


def test_ising_table(tmp_path):
    out = tmp_path / "table.csv"
    cfg = _cfg("ising-table", algos=("spa", "exact"), out=str(out))
    rows = lmp.cmd_ising_table(cfg)

    assert [r[0] for r in rows] == ["spa", "exact"]
    spa, exact = rows
    assert spa[1] > 0 and spa[2] > 0
    assert exact[1] == pytest.approx(0.0, abs=1e-10)
    assert exact[4] == pytest.approx(0.0, abs=1e-10)

    lines = out.read_text().splitlines()
    assert lines[0].startswith("# loopymp ")
    assert lines[1] == "algo,mean_kl,std_kl,mean_fbethe,mean_ll"
    assert len(lines) == 4


def test_ising_table_is_independent_of_algorithm_list_and_workers(tmp_path):
    out = tmp_path / "table.csv"
    lmp.cmd_ising_table(_cfg("ising-table", algos=("spa",), out=str(out)))
    first = out.read_bytes()
    lmp.cmd_ising_table(_cfg("ising-table", algos=("spa",), out=str(out), workers=3))
    assert out.read_bytes() == first

    rows = lmp.cmd_ising_table(_cfg("ising-table", algos=("cccp", "spa")))
    assert rows[1][1] == float(first.decode().splitlines()[2].split(",")[1])


def test_heatmap(tmp_path):
    out = tmp_path / "heatmap.csv"
    rows = lmp.cmd_ising_heatmap(_cfg("heatmap", grid=5, algos=("spa",), out=str(out)))

    assert len(rows) == 25
    assert rows[0][:2] == (-2.0, -2.0)
    center = [r for r in rows if r[0] == 0.0 and r[1] == 0.0]
    assert center[0][2] == pytest.approx(0.0, abs=1e-12)
    assert out.read_text().splitlines()[1] == "theta,j,kl"

    with pytest.raises(lmp.ConfigurationError):
        lmp.cmd_ising_heatmap(_cfg("heatmap", grid=5, algos=("spa", "cccp")))


def test_dump_mapping(tmp_path):
    out = tmp_path / "mapping.csv"
    cfg = _cfg(
        "dump-mapping",
        grid=11,
        algos=("cycbp_e",),
        models={"cycbp_e": _model(tmp_path, 2)},
        out=str(out),
    )
    rows = lmp.cmd_dump_mapping(cfg)

    assert len(rows) == 7 * 11
    for e, llr_in, spa, learned in rows:
        assert np.isfinite(learned)
        if llr_in == 0.0:
            assert spa == pytest.approx(0.0, abs=1e-15)
        if llr_in == 25.0:
            assert spa == pytest.approx(2 * e, abs=1e-6)
    assert out.read_text().splitlines()[1] == "e,llr_in,llr_out_spa,llr_out_model"

    with pytest.raises(lmp.ConfigurationError):
        lmp.cmd_dump_mapping(_cfg("dump-mapping", algos=("cycbp_e",)))


def test_train_command_writes_model_and_curve(tmp_path):
    out = tmp_path / "models" / "cycbp_e.txt"
    cfg = _cfg(
        "train",
        mode="extrinsic",
        steps=2,
        batch_size=4,
        restarts=1,
        out=str(out),
    )
    result = lmp.cmd_train(cfg)

    curve = (tmp_path / "models" / "cycbp_e.curve.csv").read_text().splitlines()
    assert curve[1] == "step,loss,val_loss"
    assert len(curve) == 2 + 2

    params = lmp.load_params(str(out))
    tcfg = cfg.train_config()
    assert lmp.evaluate_model(params, tcfg, lmp.validation_set(tcfg)) == pytest.approx(
        result.curve[-1].val_loss, abs=1e-12
    )

    with pytest.raises(lmp.ConfigurationError):
        lmp.cmd_train(_cfg("train", steps=0))


def test_channel_sweep(tmp_path):
    out = tmp_path / "sweep.csv"
    cfg = _cfg(
        "channel-sweep",
        num_graphs=200,
        chunk_size=50,
        ebno=(2.0, 8.0, 14.0),
        algos=("exact", "spa"),
        out=str(out),
    )
    rows = lmp.cmd_channel_sweep(cfg)

    assert [(r[0], r[1]) for r in rows] == [
        (2.0, "exact"),
        (2.0, "spa"),
        (8.0, "exact"),
        (8.0, "spa"),
        (14.0, "exact"),
        (14.0, "spa"),
    ]
    exact = [r[2] for r in rows if r[1] == "exact"]
    assert exact[0] > exact[1] > exact[2] > 0
    assert out.read_text().splitlines()[1] == "ebno_db,algo,one_minus_bmi"


@pytest.mark.slow
def test_spin_glass_table_regression():
    rows = lmp.cmd_ising_table(
        lmp.ExperimentConfig(num_graphs=10000, algos=("spa", "spa_mu", "cccp"))
    )
    spa, spa_mu, cccp = rows

    assert spa[1] == pytest.approx(0.087, abs=0.010)
    assert spa[3] == pytest.approx(-7.50, abs=0.15)
    assert spa[4] == pytest.approx(0.30, abs=0.05)
    assert spa_mu[1] == pytest.approx(0.059, abs=0.008)
    assert spa_mu[1] < spa[1]
    assert spa_mu[4] < spa[4]
    assert cccp[1] == pytest.approx(0.044, abs=0.008)
    assert cccp[4] <= 1e-5


@pytest.mark.slow
def test_heatmap_antiferromagnetic_region():
    def region_mean(algo):
        cfg = lmp.ExperimentConfig(command="heatmap", algos=(algo,))
        rows = lmp.cmd_ising_heatmap(cfg)
        return np.mean([kl for theta, j, kl in rows if j <= -1.5])

    assert region_mean("spa") > 0.3
    assert region_mean("cccp") <= 0.05


@pytest.mark.slow
def test_channel_sweep_error_floor():
    cfg = lmp.ExperimentConfig(
        command="channel-sweep", num_graphs=20000, algos=("exact", "spa")
    )
    rows = lmp.cmd_channel_sweep(cfg)
    exact = [v for _, algo, v in rows if algo == "exact"]
    spa = [v for _, algo, v in rows if algo == "spa"]

    assert all(a > b for a, b in zip(exact, exact[1:]))
    assert spa[-1] >= 3 * exact[-1]
