import json

import numpy as np
import pytest

from abmix import cli

TINY = {
    "model": "gmm",
    "train": {"epochs": 1, "iterations_per_epoch": 4, "batch_size": 6, "n_standardize": 30},
    "arch": {"flow_layers": 2, "flow_hidden": 8, "local_hidden": 6, "global_hidden": 8, "classifier_hidden": 8},
    "simulator": {"n_range": [10, 14]},
    "sbc": {"R": 12, "S": 20},
    "fit": {"S": 50},
    "classify": {"S": 10},
    "diagnose": {"M": 20, "S": 100, "ppc_draws": 5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.json").write_text(json.dumps(TINY))
    assert cli.main(["train", "--config", str(d / "c.json"), "--seed", "7", "--out", str(d / "m.ckpt")]) == 0
    assert cli.main(["simulate", "--config", str(d / "c.json"), "--seed", "3", "-n", "2",
                     "--out", str(d / "data")]) == 0
    return d


def run(workdir, *argv):
    return cli.main([a.format(w=workdir) for a in argv])


# configuration precedence


def test_defaults_only():
    cfg = cli.resolve_config()
    assert cfg == cli.DEFAULTS and cfg is not cli.DEFAULTS


def test_file_overrides_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "train": {"lr": 0.01}, "arch": {"flow_layers": 3}}))
    cfg = cli.resolve_config(p)
    golden = json.loads(json.dumps(cli.DEFAULTS))
    golden["seed"] = 4
    golden["train"]["lr"] = 0.01
    golden["arch"] = {"flow_layers": 3}
    assert cfg == golden


def test_cli_overrides_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "train": {"lr": 0.01, "epochs": 3}}))
    cfg = cli.resolve_config(p, ["train.lr=0.5", "simulator.n_range=[40,80]"], {"seed": 9})
    assert cfg["seed"] == 9
    assert cfg["train"]["lr"] == 0.5 and cfg["train"]["epochs"] == 3
    assert cfg["train"]["batch_size"] == cli.DEFAULTS["train"]["batch_size"]
    assert cfg["simulator"] == {"n_range": [40, 80]}
    # a --set value is beaten by the explicit flag
    assert cli.resolve_config(None, ["seed=2"], {"seed": 5})["seed"] == 5
    assert cli.resolve_config(None, ["seed=2"], {"seed": None})["seed"] == 2


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(cli.UsageError):
        cli.resolve_config(None, ["train.learning_rate=1"])
    with pytest.raises(cli.UsageError):
        cli.resolve_config(None, ["nonsense"])
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(cli.UsageError):
        cli.resolve_config(p)


def test_string_values_pass_through():
    assert cli.resolve_config(None, ["classify.mode=smooth"])["classify"]["mode"] == "smooth"


# commands


def test_usage_errors_exit_one(workdir, capsys):
    assert cli.main([]) == 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["fit", "--checkpoint", "x"]) == 1
    assert run(workdir, "fit", "--checkpoint", "{w}/missing.ckpt", "--data", "{w}/data/dataset_0001.json",
               "--out", "{w}/o") == 1
    assert "not found" in capsys.readouterr().err


def test_train_is_byte_identical(workdir):
    assert run(workdir, "train", "--config", "{w}/c.json", "--seed", "7", "--out", "{w}/again.ckpt") == 0
    assert (workdir / "m.ckpt").read_bytes() == (workdir / "again.ckpt").read_bytes()
    assert (workdir / "m.ckpt.json").read_bytes() == (workdir / "again.ckpt.json").read_bytes()
    assert run(workdir, "train", "--config", "{w}/c.json", "--seed", "8", "--out", "{w}/other.ckpt") == 0
    assert (workdir / "m.ckpt").read_bytes() != (workdir / "other.ckpt").read_bytes()


def test_manifest_and_trace(workdir):
    man = json.loads((workdir / "m.ckpt.json").read_text())
    assert man["seed"] == 7 and man["model"] == "gmm" and man["version"]
    assert man["model_config"]["n_range"] == [10, 14]
    trace = (workdir / "m.ckpt.trace.csv").read_text().splitlines()
    assert trace[0].startswith("# abmix") and "seed=7" in trace[0] and "config_hash=" in trace[0]


def test_simulate_outputs(workdir):
    doc = json.loads((workdir / "data" / "dataset_0001.json").read_text())
    assert doc["provenance"]["seed"] == 3 and doc["meta"]["model"] == "gmm"
    assert 10 <= doc["meta"]["N"] <= 14
    assert run(workdir, "simulate", "--config", "{w}/c.json", "--set", "simulate.format=csv",
               "--out", "{w}/csv") == 0
    first = (workdir / "csv" / "dataset_0001.csv").read_text().splitlines()[0]
    assert first.startswith("# abmix")


def test_fit_and_draw_determinism(workdir):
    args = ["fit", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/data/dataset_0001.json", "--config", "{w}/c.json"]
    assert run(workdir, *args, "--out", "{w}/fit1") == 0
    assert run(workdir, *args, "--out", "{w}/fit2") == 0
    a = (workdir / "fit1" / "draws.csv").read_bytes()
    assert a == (workdir / "fit2" / "draws.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0].startswith("# abmix") and "command=fit" in lines[0]
    assert len(lines) == 2 + TINY["fit"]["S"]
    summary = (workdir / "fit1" / "summary.csv").read_text().splitlines()
    assert summary[1].startswith("parameter,mean,sd") and len(summary) == 2 + 6


def test_fit_reads_csv_data(workdir):
    run(workdir, "simulate", "--config", "{w}/c.json", "--set", "simulate.format=csv", "--out", "{w}/csv")
    assert run(workdir, "fit", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/csv/dataset_0001.csv",
               "--out", "{w}/fitcsv", "--set", "fit.S=5") == 0


def test_classify_and_mode_guard(workdir, capsys):
    base = ["classify", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/data/dataset_0001.json"]
    assert run(workdir, *base, "--out", "{w}/cls", "--config", "{w}/c.json", "--figures") == 0
    text = (workdir / "cls" / "class_probs.csv").read_text().splitlines()
    assert text[1] == "# mode=independent"
    assert (workdir / "cls" / "class_probs.png").stat().st_size > 0
    assert run(workdir, *base, "--out", "{w}/cls2", "--mode", "smooth") == 1
    assert "not supported" in capsys.readouterr().err


def test_model_mismatch(workdir, tmp_path):
    assert cli.main(["simulate", "--model", "hmm", "--set", "simulator.n_range=[5,5]", "--out", str(tmp_path)]) == 0
    assert run(workdir, "fit", "--checkpoint", "{w}/m.ckpt", "--data", str(tmp_path / "dataset_0001.json"),
               "--out", "{w}/bad") == 1


def test_sbc_and_diagnose_files(workdir):
    assert run(workdir, "sbc", "--checkpoint", "{w}/m.ckpt", "--config", "{w}/c.json", "--out", "{w}/sbc",
               "--figures") == 0
    for name in ("sbc_report.json", "sbc_ranks.csv", "sbc_curves.csv", "recovery.csv", "sbc_curves.png",
                 "recovery.png"):
        assert (workdir / "sbc" / name).exists(), name
    rep = json.loads((workdir / "sbc" / "sbc_report.json").read_text())
    assert rep["R"] == 12 and rep["provenance"]["command"] == "sbc"
    code = run(workdir, "diagnose", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/data/dataset_0001.json",
               "--config", "{w}/c.json", "--out", "{w}/diag")
    assert code == 0
    psis = json.loads((workdir / "diag" / "psis.json").read_text())
    mis = json.loads((workdir / "diag" / "misspecification.json").read_text())
    assert 0 <= mis["p_value"] <= 1 and mis["M"] == 20
    assert "pareto_k" in psis and psis["provenance"]["seed"] == 0
    assert (workdir / "diag" / "ppc.csv").read_text().startswith("# abmix")


def test_strict_flags_exit_two(workdir):
    # four training steps leave the flow far from the posterior, so k-hat is large
    code = run(workdir, "diagnose", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/data/dataset_0001.json",
               "--config", "{w}/c.json", "--out", "{w}/diag2", "--strict")
    psis = json.loads((workdir / "diag2" / "psis.json").read_text())
    assert psis["flag"] and code == 2


def test_threads_from_env(workdir, monkeypatch):
    monkeypatch.setenv("ABMIX_THREADS", "1")
    assert run(workdir, "fit", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/data/dataset_0001.json",
               "--out", "{w}/t", "--set", "fit.S=5") == 0
    monkeypatch.setenv("ABMIX_THREADS", "many")
    assert run(workdir, "fit", "--checkpoint", "{w}/m.ckpt", "--data", "{w}/data/dataset_0001.json",
               "--out", "{w}/t") == 1
    assert cli.main(["--threads", "0", "simulate", "--out", str(workdir / "t0")]) == 1


def test_train_figures(workdir):
    assert run(workdir, "train", "--config", "{w}/c.json", "--out", "{w}/f.ckpt", "--figures",
               "--set", "train.iterations_per_epoch=2") == 0
    assert (workdir / "f.ckpt.trace.png").stat().st_size > 0
    data = np.loadtxt(workdir / "f.ckpt.trace.csv", delimiter=",", skiprows=2)
    assert data.shape == (2, 6)
