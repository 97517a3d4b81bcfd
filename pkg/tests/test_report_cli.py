import json
import math

import numpy as np
import pytest
import yaml

from cign import architectures, checkpoint, cli, config, dataio, report
from cign.graph import CIGN


def test_count_params_baseline_and_paths():
    counts = report.count_params(CIGN(architectures.mnist("baseline")))
    assert counts["total"] == 1_256_080 and counts["total_H"] == 0
    counts = report.count_params(CIGN(architectures.mnist("cign_fed")))
    assert len(counts["paths"]) == 4
    for p in counts["paths"]:
        assert p["expert_F"] + p["routers_H"] == p["visited"]
        assert len(p["path"]) == 3
    assert counts["total"] == sum(n["F"] + n["H"] for n in counts["nodes"])
    text = report.render_param_counts(counts, "mnist/cign_fed")
    assert f"total:   {counts['total']}" in text


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_untrained_histogram_is_close_to_uniform(seed, synthetic_test):
    hist = report.leaf_histogram(CIGN(architectures.mnist("cign_fed"), seed=seed), synthetic_test)
    for node, kids in hist.children.items():
        assert np.array_equal(sum(hist.counts[k] for k in kids), hist.counts[node])
    assert hist.total(0) == len(synthetic_test)
    assert abs(hist.expected_leaf_entropy() - math.log(10)) / math.log(10) < 0.05


def test_histogram_entropies_and_rendering():
    hist = report.LeafHistogram(
        num_classes=3,
        counts={0: np.array([10, 10, 0]), 1: np.array([10, 0, 0]), 2: np.array([0, 10, 0])},
        children={0: (1, 2)},
        leaves=(1, 2),
        class_names=("a", "b", "c"),
    )
    assert hist.expected_leaf_entropy() == 0.0
    assert hist.label_entropy(0) == pytest.approx(math.log(2))
    assert hist.dominant_child(0, 1) == 2
    text = hist.render()
    assert "leaf 1 (n=10" in text and "c:" not in text
    assert hist.to_csv().splitlines()[0] == "node,class,name,count"


def _records():
    return [
        report.run_summary("mnist/cign_fed", s, acc, 120194) for s, acc in enumerate([0.9925, 0.9901, 0.9913])
    ] + [report.run_summary("mnist/baseline", 0, 0.9921, 1256080)]


def test_aggregate_table(tmp_path):
    rows = report.aggregate(_records())
    fed = next(r for r in rows if r["model"] == "mnist/cign_fed")
    assert fed["max"] == 0.9925 and fed["min"] == 0.9901
    assert fed["avg"] == pytest.approx((0.9925 + 0.9901 + 0.9913) / 3)
    table = report.render_table(rows)
    assert "%99.25" in table and "%99.01" in table and "%99.13" in table


def test_report_regeneration_is_byte_identical(tmp_path):
    path = tmp_path / "metrics.jsonl"
    report.append_records(path, _records())
    first = report.report_from_file(path)
    second = report.report_from_file(path)
    assert first == second
    assert report.read_records(path) == _records()


def test_output_lock(tmp_path):
    with report.OutputLock(tmp_path):
        assert (tmp_path / ".lock").exists()
        with pytest.raises(RuntimeError):
            with report.OutputLock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()


def test_checkpoint_round_trip(tmp_path):
    model = CIGN(architectures.mnist("cign_fed"), seed=5)
    path = checkpoint.save(model, tmp_path / "m.npz", {"label": "x"})
    loaded, header = checkpoint.load(path)
    assert header["extra"] == {"label": "x"}
    assert loaded.tree == model.tree
    for name, p in model.params.items():
        assert np.array_equal(p.value.detach().numpy(), loaded.params[name].value.detach().numpy())
    (tmp_path / "bad.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "bad.npz")


# ---- configuration ------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(config.ConfigError, match="unknown keys"):
        config.from_dict({"model": {"architecture": "mnist", "widht": 3}})
    with pytest.raises(config.ConfigError, match="unknown keys"):
        config.from_dict({"schedule": {"learning_rate": 0.1}})
    with pytest.raises(config.ConfigError):
        config.from_dict({"schedule": {"rho_phases": [[0, 0.9]]}})


def test_config_defaults_follow_architecture():
    assert config.from_dict({"model": {"architecture": "fashion"}}).schedule.lambda_balance == 5.0
    cfg = config.from_dict({"schedule": {"epochs": 7}})
    assert cfg.schedule.epochs == 7 and cfg.schedule.base_lr == 0.025


# ---- command line -------------------------------------------------------------


def _write_config(tmp_path, **schedule):
    cfg = {
        "dataset": {"name": "synthetic", "synthetic_train": 250, "synthetic_test": 100},
        "model": {"architecture": "mnist", "variant": "cign_fed"},
        "schedule": {"epochs": 1, "batch_size": 50, **schedule},
        "seeds": [0],
        "output_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_cli_usage_and_config_errors(tmp_path, capsys):
    assert cli.main(["bogus"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {variant: wide}\n")
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_cli_data_errors(tmp_path):
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none.npz"), "--dataset", "synthetic"]) == cli.EXIT_DATA
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none.npz"),
                     "--dataset", "mnist", "--data-root", str(tmp_path)]) == cli.EXIT_DATA
    assert cli.main(["report", "--metrics", str(tmp_path / "none.jsonl")]) == cli.EXIT_DATA


def test_cli_count_params(tmp_path, capsys):
    assert cli.main(["count-params", "--variant", "baseline", "--out", str(tmp_path)]) == 0
    assert "total:   1256080" in capsys.readouterr().out
    assert json.loads((tmp_path / "params.json").read_text())["total"] == 1256080


def test_cli_train_evaluate_histogram_report(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg)]) == 0
    ckpt = out / "checkpoint_seed0.npz"
    assert ckpt.exists() and not (out / ".lock").exists()
    recs = report.read_records(out / "metrics.jsonl")
    assert [r["type"] for r in recs] == ["record", "run"]
    capsys.readouterr()

    assert cli.main(["evaluate", "--checkpoint", str(ckpt), "--config", str(cfg)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["n"] == 100 and sum(ev["leaf_counts"].values()) == 100
    assert ev["accuracy"] == pytest.approx(recs[1]["test_accuracy"])

    assert cli.main(["histogram", "--checkpoint", str(ckpt), "--config", str(cfg), "--out", str(out)]) == 0
    assert "expected leaf entropy" in capsys.readouterr().out
    assert (out / "histogram.csv").exists()

    csv_path = tmp_path / "t.csv"
    assert cli.main(["report", "--config", str(cfg), "--csv", str(csv_path)]) == 0
    table = capsys.readouterr().out
    assert "mnist/cign_fed" in table
    assert cli.main(["report", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out == table


def test_cli_train_refuses_locked_output(tmp_path):
    cfg = _write_config(tmp_path)
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / ".lock").write_text("123")
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG


def test_cli_diverged_run(tmp_path):
    cfg = _write_config(tmp_path, base_lr=1.0e12)
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_DIVERGED
    recs = report.read_records(tmp_path / "run" / "metrics.jsonl")
    assert recs[-1]["status"] == "diverged"


def test_shipped_configs_are_valid():
    from pathlib import Path

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert paths
    for p in paths:
        config.load(p)
