import filecmp

import numpy as np
import pytest

from trfeddis.config import ExperimentConfig
from trfeddis.federation import (
    ClientUpdate,
    ServerState,
    Strategy,
    TagMismatchError,
    TrainSettings,
    VARIANTS,
    aggregate,
    build_clients,
    load_datasets,
    local_train,
    run_experiment,
    run_round,
)
from trfeddis.model import ALL_TAGS, ParamSet, PartitionTag, init_model
from trfeddis.persist import checkpoint_read
from trfeddis.specfun import RngStream


def tiny(strategy="TrFedDis", **kw):
    base = {
        "strategy": strategy,
        "rounds": 2,
        "batch_size": 16,
        "model": {"arch": "conv", "conv_channels": [4], "feat_dim": 16, "head_width": 16},
        "data": {"num_clients": 3, "per_client_n": 100, "image_size": 8, "num_classes": 5},
    }
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = base[k] | v
        else:
            base[k] = v
    return ExperimentConfig.from_dict(base)


def settings(cfg):
    return TrainSettings(cfg.lr, cfg.batch_size, cfg.local_epochs, cfg.eval_batch_size)


def _names(model, tags):
    return {n for n, t in model.params.tags.items() if t in tags}


# -------------------------------------------------------------- strategies


def test_strategy_tag_sets():
    assert Strategy("SingleSet").aggregated_tags == frozenset()
    assert Strategy("FedAvg").aggregated_tags == ALL_TAGS
    assert Strategy("FedBN").aggregated_tags == ALL_TAGS - {PartitionTag.LOCAL_BN}
    assert Strategy("TrFedDis").aggregated_tags == {PartitionTag.SHARED_ENCODER, PartitionTag.SHARED_GLOBAL_HEAD}
    with pytest.raises(ValueError):
        Strategy("FedProx")


def test_ablation_variants():
    assert VARIANTS["backbone"] == Strategy("FedBN") and not VARIANTS["backbone"].dual_head
    assert VARIANTS["dis"].decision == "sum" and not VARIANTS["dis"].enable_ce
    assert VARIANTS["dis+un"].decision == "fusion" and not VARIANTS["dis+un"].enable_ce
    assert VARIANTS["full"] == Strategy("TrFedDis")


# ------------------------------------------------------------- local_train


def test_epochs_zero_returns_broadcast():
    cfg = tiny(local_epochs=0)
    server, clients = build_clients(cfg, 0)
    upd, c = local_train(clients[0], server.shared, 0, settings(cfg))
    assert upd.params.equal(server.shared) and c.step == 0


def test_lr_zero_returns_broadcast():
    cfg = tiny(lr=0.0)
    server, clients = build_clients(cfg, 0)
    upd, c = local_train(clients[0], server.shared, 1, settings(cfg))
    assert upd.params.equal(server.shared)
    assert c.step == 80 // 16


def test_upload_never_carries_private_tags():
    for name in ("FedBN", "TrFedDis"):
        cfg = tiny(name)
        server, clients = build_clients(cfg, 0)
        upd, _ = local_train(clients[0], server.shared, 1, settings(cfg))
        tags = {upd.params.tags[n] for n in upd.params}
        assert PartitionTag.LOCAL_BN not in tags
        assert PartitionTag.LOCAL_HEAD not in tags


def test_tag_mismatch_rejected():
    cfg = tiny()
    server, clients = build_clients(cfg, 0)
    full = ParamSet(clients[0].model.params.copy(), clients[0].model.params.tags)
    with pytest.raises(TagMismatchError):
        local_train(clients[0], full, 1, settings(cfg))
    with pytest.raises(TagMismatchError):
        local_train(clients[0], None, 1, settings(cfg))


def test_training_reduces_loss_majority_of_seeds():
    from trfeddis.losses import one_hot, total_loss
    from trfeddis.model import forward

    def train_loss(c):
        # batch statistics on a throwaway copy, schedules frozen at step 0
        x, y = c.dataset.train.inputs, c.dataset.train.labels
        _, g, l = forward(c.model.copy(), x, "train")
        return total_loss(g, l, one_hot(y, 5), 0, c.loss_config).l_total

    wins = 0
    for seed in range(5):
        cfg = tiny("TrFedDis", data={"num_clients": 2, "per_client_n": 200})
        server, clients = build_clients(cfg, seed)
        c = clients[0]
        before = train_loss(c)
        local_train(c, server.shared, 1, settings(cfg))
        wins += train_loss(c) < before
    assert wins >= 3


def test_step_counter_advances_per_batch():
    cfg = tiny(local_epochs=2)
    server, clients = build_clients(cfg, 0)
    server, clients, rep = run_round(server, clients, settings(cfg))
    assert all(c.step == 2 * (80 // 16) for c in clients)
    assert [r["step"] for r in rep.clients] == [10, 10, 10]


# --------------------------------------------------------------- aggregate


def _upd(cid, value, name="w"):
    return ClientUpdate(cid, ParamSet({name: np.full(3, value, dtype=np.float32)}, {name: PartitionTag.SHARED_ENCODER}), 10)


def test_aggregate_two_clients_midpoint():
    out = aggregate([_upd(0, 0.0), _upd(1, 2.0)], {0: 0.5, 1: 0.5})
    assert np.array_equal(out["w"], np.ones(3, dtype=np.float32))


def test_aggregate_single_client_bitwise(rng):
    p = ParamSet({"w": rng.normal(size=(4, 5)).astype(np.float32)}, {"w": PartitionTag.SHARED_ENCODER})
    out = aggregate([ClientUpdate(3, p, 7)], {3: 1.0})
    assert out.equal(p) and out["w"].dtype == np.float32


def test_aggregate_identical_updates_fixed_point(rng):
    v = rng.normal(size=(6,)).astype(np.float32)
    ups = [ClientUpdate(i, ParamSet({"w": v.copy()}, {"w": PartitionTag.SHARED_ENCODER}), 1) for i in range(4)]
    w = {0: 0.1, 1: 0.2, 2: 0.3, 3: 0.4}
    assert np.max(np.abs(aggregate(ups, w)["w"] - v)) < 1e-7


def test_aggregate_permutation_invariant(rng):
    ups = [ClientUpdate(i, ParamSet({"w": rng.normal(size=50).astype(np.float32)}, {"w": PartitionTag.SHARED_ENCODER}), 1) for i in range(5)]
    w = {i: (i + 1) / 15 for i in range(5)}
    ref = aggregate(ups, w)
    for perm in (rng.permutation(5) for _ in range(5)):
        assert np.max(np.abs(aggregate([ups[i] for i in perm], w)["w"] - ref["w"])) <= 1e-12


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([_upd(0, 1.0), _upd(1, 1.0, name="v")], {0: 0.5, 1: 0.5})
    with pytest.raises(ValueError):
        aggregate([_upd(0, 1.0), _upd(1, 1.0)], {0: 0.5, 1: 0.6})
    with pytest.raises(ValueError):
        aggregate([], {})


# --------------------------------------------------------------- run_round


def test_single_set_round_leaves_server_untouched():
    cfg = tiny("SingleSet")
    server, clients = build_clients(cfg, 0)
    assert server.shared is None
    server, clients, rep = run_round(server, clients, settings(cfg))
    assert server.shared is None and server.round == 1
    w = [c.model.params["enc.0.weight"] for c in clients]
    assert not np.array_equal(w[0], w[1]) and not np.array_equal(w[1], w[2])
    assert len(rep.clients) == 3


def test_trfeddis_round_syncs_shared_only():
    cfg = tiny()
    server, clients = build_clients(cfg, 0)
    server, clients, rep = run_round(server, clients, settings(cfg))
    shared = _names(clients[0].model, {PartitionTag.SHARED_ENCODER, PartitionTag.SHARED_GLOBAL_HEAD})
    for n in shared:
        assert all(np.array_equal(c.model.params[n], server.shared[n]) for c in clients)
    assert not np.array_equal(clients[0].model.params["head_l.0.weight"], clients[1].model.params["head_l.0.weight"])
    assert not np.array_equal(clients[0].model.params["enc.0.bn.gamma"], clients[1].model.params["enc.0.bn.gamma"])
    for r in rep.clients:
        for key in ("acc_fused", "acc_global", "acc_local"):
            assert 0.0 <= r["test"][key] <= 1.0


def test_mixed_strategies_rejected():
    cfg = tiny()
    server, clients = build_clients(cfg, 0)
    server.strategy = Strategy("FedAvg")
    with pytest.raises(ValueError):
        run_round(server, clients, settings(cfg))


def _swap_other_data(clients, keep, seed):
    from trfeddis.data import make_synthetic

    other = make_synthetic(seed, len(clients), 100, 5, 8)
    for c, ds in zip(clients, other):
        if c.client_id != keep:
            c.dataset = ds


def test_local_head_isolation_first_round():
    # in round one client i trains only on its own data from the shared init,
    # so swapping everyone else's data cannot touch its private parameters
    cfg = tiny()
    s1, c1 = build_clients(cfg, 0)
    s2, c2 = build_clients(cfg, 0)
    _swap_other_data(c2, keep=1, seed=99)
    _, c1, _ = run_round(s1, c1, settings(cfg))
    _, c2, _ = run_round(s2, c2, settings(cfg))
    for n in _names(c1[1].model, {PartitionTag.LOCAL_HEAD, PartitionTag.LOCAL_BN}):
        assert np.array_equal(c1[1].model.params[n], c2[1].model.params[n]), n


def test_private_params_never_overwritten_by_broadcast():
    for name in ("FedBN", "TrFedDis"):
        cfg = tiny(name)
        server, clients = build_clients(cfg, 0)
        private = {PartitionTag.LOCAL_BN} if name == "FedBN" else {PartitionTag.LOCAL_BN, PartitionTag.LOCAL_HEAD}
        st = settings(cfg)
        for _ in range(3):
            shared = server.shared
            results = [local_train(c, shared, st.local_epochs, st) for c in clients]
            after_train = [{n: c.model.params[n].copy() for n in _names(c.model, private)} for _, c in results]
            assert all(not (set(u.params) & set(snap)) for (u, _), snap in zip(results, after_train))
            server.shared = aggregate([u for u, _ in results], server.weights)
            for c, snap in zip(clients, after_train):
                c.model.load(server.shared)
                assert all(np.array_equal(c.model.params[n], v) for n, v in snap.items())


def test_fedavg_shares_bn():
    cfg = tiny("FedAvg")
    server, clients = build_clients(cfg, 0)
    _, clients, _ = run_round(server, clients, settings(cfg))
    assert np.array_equal(clients[0].model.params["enc.0.bn.running_mean"], clients[2].model.params["enc.0.bn.running_mean"])


def test_weights_sum_to_one_and_follow_size():
    server, clients = build_clients(tiny(), 0)
    assert sum(server.weights.values()) == pytest.approx(1.0)
    server, _ = build_clients(tiny(aggregation_weights="uniform"), 0)
    assert set(server.weights.values()) == {1 / 3}


# ------------------------------------------------------------ run_experiment


def test_experiment_outputs_and_determinism(tmp_path):
    cfg = tiny(seeds=[0, 1])
    r1 = run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, out_dir=tmp_path / "b")
    assert len(r1.rows) == 2 * 2 * 3 * 2
    assert filecmp.cmp(tmp_path / "a" / "metrics.csv", tmp_path / "b" / "metrics.csv", shallow=False)
    for s in (0, 1):
        for i in range(3):
            f = f"seed{s}/client{i}.ckpt"
            assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("seed,round,client,split,accuracy,acc_global,acc_local,mean_u,l_un_global")
    assert "mean" in (tmp_path / "a" / "summary.csv").read_text()


def test_parallel_workers_match_serial(tmp_path):
    cfg = tiny(rounds=1)
    run_experiment(cfg, out_dir=tmp_path / "serial", workers=1)
    run_experiment(cfg, out_dir=tmp_path / "par", workers=2)
    assert filecmp.cmp(tmp_path / "serial" / "metrics.csv", tmp_path / "par" / "metrics.csv", shallow=False)
    for i in range(3):
        assert filecmp.cmp(tmp_path / "serial" / f"seed0/client{i}.ckpt", tmp_path / "par" / f"seed0/client{i}.ckpt", shallow=False)


def test_zero_rounds_checkpoints_equal_init(tmp_path):
    cfg = tiny(rounds=0)
    res = run_experiment(cfg, out_dir=tmp_path)
    assert res.reports[0] == [] and res.rows == []
    server, clients = build_clients(cfg, 0)
    model, meta = checkpoint_read(tmp_path / "seed0" / "client2.ckpt")
    assert model.params.equal(clients[2].model.params)
    assert meta["client_id"] == 2 and meta["seed"] == 0


def test_mlp_arch_flattens_inputs():
    cfg = tiny(model={"arch": "mlp"}, rounds=1)
    ds = load_datasets(cfg, 0)
    assert ds[0].inputs.ndim == 2
    res = run_experiment(cfg)
    assert len(res.reports[0]) == 1


def test_idx_source(tmp_path, rng):
    from trfeddis.data import write_idx

    clients = []
    for i in range(2):
        write_idx(tmp_path / f"x{i}.idx", rng.integers(0, 256, size=(40, 6, 6)).astype(np.uint8))
        write_idx(tmp_path / f"y{i}.idx", (np.arange(40) % 3).astype(np.uint8))
        clients.append({"images": str(tmp_path / f"x{i}.idx"), "labels": str(tmp_path / f"y{i}.idx"), "n_train": 32})
    cfg = tiny(model={"conv_channels": [4]}, data={"source": "idx", "clients": clients, "num_classes": 3}, rounds=1, batch_size=8)
    ds = load_datasets(cfg, 0)
    assert ds[0].inputs.shape == (40, 1, 6, 6) and ds[0].inputs.max() <= 1.0
    assert len(run_experiment(cfg).reports[0]) == 1
