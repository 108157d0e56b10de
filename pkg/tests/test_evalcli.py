import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trfeddis.cli import main
from trfeddis.config import ConfigError, ExperimentConfig, load_config
from trfeddis.data import Dataset
from trfeddis.metrics import auroc_bruteforce, dump_embeddings, evaluate, evaluate_outputs, ood_separation
from trfeddis.model import ModelConfig, init_model
from trfeddis.persist import (
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    checkpoint_read,
    checkpoint_write,
    write_csv,
)
from trfeddis.specfun import RngStream

TINY = {
    "strategy": "TrFedDis",
    "rounds": 1,
    "batch_size": 16,
    "model": {"conv_channels": [4], "feat_dim": 16, "head_width": 16},
    "data": {"num_clients": 2, "per_client_n": 100, "image_size": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY | {"output_dir": str(tmp_path / "run")}))
    return p


# ------------------------------------------------------------------ metrics


def test_ood_separation_examples():
    assert ood_separation([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert ood_separation([0.3, 0.4, 0.5], [0.3, 0.4, 0.5]) == 0.5
    assert ood_separation([0.1, 0.2], [0.15, 0.3]) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        ood_separation([], [0.1])


@given(
    arrays(np.float64, st.integers(1, 60), elements=st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.9])),
    arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1)),
)
def test_auroc_matches_bruteforce(clean, noisy):
    assert ood_separation(clean, noisy) == pytest.approx(auroc_bruteforce(clean, noisy), abs=1e-12)


def test_auroc_large_random_against_bruteforce(rng):
    a, b = rng.normal(size=1000).round(2), rng.normal(0.5, size=1000).round(2)
    assert ood_separation(a, b) == pytest.approx(auroc_bruteforce(a, b), abs=1e-12)


def test_evaluate_outputs_decisions():
    g = np.array([[5.0, -5.0], [-5.0, 5.0]])
    l = np.array([[-5.0, 6.0], [-5.0, 5.0]])
    y = np.array([0, 1])
    fused = evaluate_outputs(g, l, y, "fusion")
    assert fused.acc_global == 1.0 and fused.acc_local == 0.5
    assert evaluate_outputs(g, l, y, "sum").acc_fused == 0.5  # row 0: -5+6 beats 5-5
    assert evaluate_outputs(g, None, y, "single").acc_fused == 1.0
    assert fused.u.shape == (2,) and np.all((0 < fused.u) & (fused.u <= 1))
    with pytest.raises(ValueError):
        evaluate_outputs(g, l, y, "vote")


def test_single_sample_correct_gives_accuracy_one():
    m = init_model(ModelConfig.mlp_default(input_dim=4, num_classes=3), RngStream(0))
    x = np.zeros((1, 4), dtype=np.float32)
    res = evaluate(m, Dataset(x, np.array([0]), 0, 3))
    res = evaluate(m, Dataset(x, res.predictions.astype(np.int64), 0, 3))
    assert res.acc_fused == 1.0


def test_random_model_is_near_chance():
    k, n = 5, 500
    accs = []
    for seed in range(5):
        m = init_model(ModelConfig.mlp_default(input_dim=8, num_classes=k), RngStream(seed))
        r = np.random.default_rng(seed)
        ds = Dataset(r.normal(size=(n, 8)).astype(np.float32), r.integers(0, k, n), 0, k)
        accs.append(evaluate(m, ds).acc_fused)
    sigma = np.sqrt(0.2 * 0.8 / (5 * n))
    assert abs(np.mean(accs) - 1 / k) < 3 * sigma


def test_evaluate_rejects_empty():
    m = init_model(ModelConfig.mlp_default(input_dim=4), RngStream(0))
    with pytest.raises(ValueError):
        evaluate(m, Dataset(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), 0, 5))


def test_dump_embeddings_schema(tmp_path, rng):
    m = init_model(ModelConfig.conv_default(input_shape=(3, 8, 8), num_classes=4), RngStream(0))
    ds = Dataset(rng.normal(size=(7, 3, 8, 8)).astype(np.float32), np.arange(7) % 4, 0, 4)
    dump_embeddings(m, ds, tmp_path / "a.csv", client_id=2)
    dump_embeddings(m, ds, tmp_path / "b.csv", client_id=2)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 7 + 1
    assert len(lines[0].split(",")) == 2 + m.feat_dim + 2 * 4
    assert lines[1].startswith("2,0,")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# ------------------------------------------------------------------ persist


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = init_model(ModelConfig.conv_default(), RngStream(3))
    m.params["enc.0.bn.running_var"][...] = 0.37
    checkpoint_write(m, tmp_path / "m.ckpt", {"seed": 3})
    back, meta = checkpoint_read(tmp_path / "m.ckpt")
    assert back.params.equal(m.params) and back.params.tags == m.params.tags
    assert back.config == m.config and back.trainable == m.trainable and meta == {"seed": 3}


def test_checkpoint_manifest_lists_each_param_once(tmp_path):
    m = init_model(ModelConfig.conv_default(), RngStream(0))
    raw = checkpoint_write(m, tmp_path / "m.ckpt").read_bytes()
    head = raw[: raw.index(b"\nend ")].decode().splitlines()
    params = [line.split() for line in head if line.startswith("param ")]
    assert [p[1] for p in params] == list(m.params)
    assert all(p[2] == m.params.tags[p[1]].value for p in params)


def test_checkpoint_little_endian_payload(tmp_path):
    m = init_model(ModelConfig.mlp_default(input_dim=2, num_classes=2, use_batchnorm=False), RngStream(0))
    raw = checkpoint_write(m, tmp_path / "m.ckpt").read_bytes()
    w = m.params["enc.0.weight"]
    assert w.astype("<f4").tobytes() in raw


def test_checkpoint_errors(tmp_path):
    m = init_model(ModelConfig.mlp_default(), RngStream(0))
    p = checkpoint_write(m, tmp_path / "m.ckpt")
    raw = p.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointTruncatedError):
        checkpoint_read(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw.replace(b"TRFEDDIS-CKPT 1", b"TRFEDDIS-CKPT 2", 1))
    with pytest.raises(CheckpointVersionError):
        checkpoint_read(tmp_path / "v.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\x00" * 4)
    with pytest.raises(CheckpointManifestError):
        checkpoint_read(tmp_path / "x.ckpt")
    (tmp_path / "g.ckpt").write_bytes(raw.replace(b"LocalHead", b"LocalHeaX", 1))
    with pytest.raises(CheckpointManifestError):
        checkpoint_read(tmp_path / "g.ckpt")


def test_write_csv_format(tmp_path):
    p = write_csv(tmp_path / "a.csv", ("a", "b"), [{"a": 1, "b": 0.1}, (2, 1e-20)])
    assert p.read_bytes() == b"a,b\n1,0.1\n2,1e-20\n"


# ------------------------------------------------------------------- config


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"strategy": "TrFedDis", "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"data": {"nope": 1}})


@pytest.mark.parametrize(
    "bad",
    [
        {"strategy": "FedX"},
        {"rounds": -1},
        {"lr": -0.1},
        {"batch_size": 1},
        {"seeds": []},
        {"un_weights": [1, 1]},
        {"schedules": {"ramp_fraction": 2.0}},
        {"model": {"arch": "rnn"}},
        {"data": {"test_fraction": 1.0}},
        {"data": {"source": "idx"}},
    ],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg
    with pytest.raises(ConfigError, match="missing.json"):
        load_config(tmp_path / "missing.json")


# ---------------------------------------------------------------------- cli


def test_cli_train_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_cli_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train", "--config", "x", "--bogus"]) == 1
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_runtime_error_exit_two(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage\n")
    assert main(["ood", "--checkpoint", str(bad)]) == 2


def test_cli_end_to_end(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--seed", "4", "--out", str(out)]) == 0
    ckpt = out / "seed4" / "client1.ckpt"
    assert ckpt.exists() and (out / "metrics.csv").exists()

    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(cfg_path)]) == 0
    assert "acc_fused=" in capsys.readouterr().out

    assert main(["ood", "--checkpoint", str(ckpt), "--sigma", "1.5"]) == 0
    text = capsys.readouterr().out
    assert "auroc=" in text
    lines = ckpt.with_suffix(".ood.csv").read_text().splitlines()
    assert lines[0] == "split,u" and len(lines) == 1 + 2 * 20

    assert main(["dump-embeddings", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e.csv")]) == 0
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 21


def test_cli_ablate(tmp_path, cfg_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_path), "--variants", "backbone,dis", "--out", str(out)]) == 0
    assert (out / "backbone" / "metrics.csv").exists() and (out / "dis" / "metrics.csv").exists()
    rows = (out / "ablation_summary.csv").read_text().splitlines()
    assert rows[0] == "variant,acc_mean,acc_std,mean_u" and len(rows) == 3
    assert main(["ablate", "--config", str(cfg_path), "--variants", "best"]) == 1


def test_cli_train_byte_identical(tmp_path, cfg_path):
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/seed0/client0.ckpt").read_bytes() == (tmp_path / "b/seed0/client0.ckpt").read_bytes()
