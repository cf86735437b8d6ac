import json

import numpy as np
import pytest

from oracles import micro_instance, spreadsheet_bce
from tdm import fixture_path
from tdm.builder import init_category_tree
from tdm.data import build_user_state, ingest, split
from tdm.scorer import PROB_CLAMP, Behaviors, ScorerConfig, encode_states, forward, init_params
from tdm.synthetic import planted_clusters
from tdm.trainer import (
    SGD,
    Adam,
    TrainConfig,
    TrainingDiverged,
    fixed_sample,
    heldout_interactions,
    joint_train,
    loss,
    make_optimizer,
    parse_negatives,
    remap_params,
    train,
    train_epoch,
    training_interactions,
    window_behaviors,
)

FAST = dict(batch_size=10, negatives="total=4")
PLANTED = dict(batch_size=10, negatives="total=12")


@pytest.fixture(scope="module")
def fixture50():
    corpus, events = ingest(fixture_path("train_50.tsv"), "tabular_behavior")
    return corpus, split(events, 0, 0, seed=0)


@pytest.fixture(scope="module")
def small_planted():
    pc = planted_clusters(n_items=128, n_clusters=8, n_users=120, events_per_user=(12, 20), seed=1)
    return pc.corpus, split(pc.events, 10, 10, seed=1)


def one_user_behaviors():
    return Behaviors.from_windows([[[] for _ in range(10)]], 10)


class TestLoss:
    def test_half_probability_is_ln2(self):
        params = init_params(15, ScorerConfig(variant="dnn"), 0)
        params.weights["out_w"][:, 1] = params.weights["out_w"][:, 0]
        value = loss(params, one_user_behaviors(), [0, 0, 0], [1, 2, 3], [1, 0, 1])
        assert value == pytest.approx(np.log(2.0), abs=1e-15)

    def test_clamped_separation_bound(self):
        params = init_params(15, ScorerConfig(variant="dnn"), 0)
        params.weights["out_w"][:] = 0.0
        params.weights["out_b"][:] = [-50.0, 50.0]
        value = loss(params, one_user_behaviors(), [0, 0], [1, 2], [1, 1])
        assert value == pytest.approx(-np.log(1.0 - PROB_CLAMP), rel=1e-9)

    def test_six_sample_hand_sum(self):
        params, beh, users, cand, labels = micro_instance("attention_dnn", 7, train=False, n_samples=6)
        probs = forward(params, beh, users, cand).prob
        assert loss(params, beh, users, cand, labels) == pytest.approx(spreadsheet_bce(probs, labels), rel=1e-14)

    def test_empty_batch(self):
        params = init_params(15, ScorerConfig(variant="dnn"), 0)
        with pytest.raises(ValueError):
            loss(params, one_user_behaviors(), [], [], [])


class TestInteractions:
    def test_fifty_interactions(self, fixture50):
        _, sp = fixture50
        assert len(training_interactions(sp)) == 50

    def test_state_uses_strictly_earlier_behaviors(self, fixture50):
        corpus, sp = fixture50
        tree = init_category_tree(corpus, 0)
        inter = training_interactions(sp)
        beh = window_behaviors(tree, inter.history, inter.start, inter.end, 10, 64)
        users = sp.train_users
        # rebuild every row the slow way
        states = []
        for u in users:
            evs = sp.events_by_user[u]
            for e in evs:
                if any(x.timestamp < e.timestamp for x in evs):
                    states.append(build_user_state(evs, e.timestamp, 10, 64, strict=True))
        slow = encode_states(tree, states, 10)
        L = max(beh.nodes.shape[2], slow.nodes.shape[2])
        pad = lambda a: np.pad(a, ((0, 0), (0, 0), (0, L - a.shape[2])))  # noqa: E731
        assert np.array_equal(pad(beh.mask), pad(slow.mask))
        assert np.array_equal(pad(beh.nodes) * pad(beh.mask), pad(slow.nodes) * pad(slow.mask))

    def test_heldout_targets_are_ground_truth(self, small_planted):
        _, sp = small_planted
        inter = heldout_interactions(sp, "validation")
        expected = [e.item_id for u in sp.validation_users for e in sp.ground_truth(u)]
        assert inter.target.tolist() == expected


    def test_heldout_cap_is_fixed_subset(self, small_planted):
        corpus, sp = small_planted
        tree = init_category_tree(corpus, 0)
        inter = heldout_interactions(sp, "validation")
        cfg = TrainConfig(max_heldout=15, **PLANTED)
        a, b = fixed_sample(tree, inter, cfg, 3), fixed_sample(tree, inter, cfg, 3)
        assert a.behaviors.n_users == 15 < len(inter)
        assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.owner, b.owner)


class TestTrainEpoch:
    def test_zero_rate_is_identity(self, fixture50):
        corpus, sp = fixture50
        tree = init_category_tree(corpus, 0)
        for optimizer in ("adam", "sgd"):
            cfg = TrainConfig(learning_rate=0.0, optimizer=optimizer, **FAST)
            params = init_params(tree.n_nodes, cfg.scorer_config(), 0)
            before = params.checksum()
            train_epoch(params, tree, training_interactions(sp), cfg)
            assert params.checksum() == before

    @pytest.mark.parametrize("variant", ["attention_dnn", "dnn", "product_dnn"])
    def test_loss_decreases_on_fixture(self, fixture50, variant):
        corpus, sp = fixture50
        cfg = TrainConfig(variant=variant, **FAST)
        tree = init_category_tree(corpus, 0)
        params = init_params(tree.n_nodes, cfg.scorer_config(), 0)
        opt = make_optimizer(cfg)
        inter = training_interactions(sp)
        losses = []
        for epoch in range(5):
            params, stats = train_epoch(params, tree, inter, cfg, opt, epoch)
            losses.append(stats["train_loss"])
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_same_seed_same_checksum(self, fixture50):
        corpus, sp = fixture50
        tree = init_category_tree(corpus, 0)
        sums = []
        for _ in range(2):
            cfg = TrainConfig(variant="attention_dnn", **FAST)
            params = init_params(tree.n_nodes, cfg.scorer_config(), 0)
            train_epoch(params, tree, training_interactions(sp), cfg)
            sums.append(params.checksum())
        assert sums[0] == sums[1]

    def test_divergence_aborts(self, fixture50):
        corpus, sp = fixture50
        tree = init_category_tree(corpus, 0)
        cfg = TrainConfig(variant="dnn", **FAST)
        params = init_params(tree.n_nodes, cfg.scorer_config(), 0)
        params.weights["fc0_w"][:] = np.inf
        with pytest.raises(TrainingDiverged) as err, np.errstate(invalid="ignore"):
            train_epoch(params, tree, training_interactions(sp), cfg)
        assert err.value.diagnostics["step"] == 0

    def test_tree_size_mismatch(self, fixture50):
        corpus, sp = fixture50
        tree = init_category_tree(corpus, 0)
        params = init_params(tree.n_nodes + 1, ScorerConfig(), 0)
        with pytest.raises(ValueError):
            train_epoch(params, tree, training_interactions(sp), TrainConfig(**FAST))

    def test_hs_mode_runs(self, fixture50):
        corpus, sp = fixture50
        tree = init_category_tree(corpus, 0)
        cfg = TrainConfig(variant="dnn", mode="hs", **FAST)
        params = init_params(tree.n_nodes, cfg.scorer_config(), 0)
        _, stats = train_epoch(params, tree, training_interactions(sp), cfg)
        assert np.isfinite(stats["train_loss"]) and stats["hs_skipped_levels"] == 0


class TestOptimizers:
    def test_sgd_step(self):
        w = {"a": np.array([1.0, 2.0])}
        SGD(0.1).step(w, {"a": np.array([1.0, -1.0])})
        np.testing.assert_allclose(w["a"], [0.9, 2.1])

    def test_adam_first_step_moves_by_lr(self):
        w = {"a": np.array([1.0, 2.0])}
        Adam(0.01).step(w, {"a": np.array([3.0, -0.5])})
        np.testing.assert_allclose(w["a"], [0.99, 2.01], rtol=1e-6)


class TestJointTrain:
    def test_single_round_keeps_category_tree(self, small_planted):
        corpus, sp = small_planted
        cfg = TrainConfig(variant="dnn", epochs=1, tree_rounds=1, hidden=(16, 8, 8), dim=8, **PLANTED)
        _, tree, rounds = joint_train(corpus, sp, cfg)
        assert tree.to_bytes() == init_category_tree(corpus, cfg.seed).to_bytes()
        assert len(rounds) == 1 and np.isfinite(rounds[0].report.test_loss)

    def test_two_rounds_write_checkpoints(self, small_planted, tmp_path):
        corpus, sp = small_planted
        cfg = TrainConfig(variant="dnn", epochs=1, tree_rounds=2, hidden=(16, 8, 8), dim=8, **PLANTED)
        _, tree, rounds = joint_train(corpus, sp, cfg, out_dir=tmp_path)
        assert [r.report.round for r in rounds] == [0, 1]
        for r in (0, 1):
            report = json.loads((tmp_path / f"round_{r}" / "report.json").read_text())
            assert report["round"] == r and "wall_time" not in report
        assert json.loads((tmp_path / "timing.json").read_text()).keys() == {"round_0", "round_1"}
        assert rounds[1].tree.content_hash() == tree.content_hash()

    def test_remap_carries_leaf_rows(self, small_planted):
        corpus, _ = small_planted
        old = init_category_tree(corpus, 0)
        new = init_category_tree(corpus, 1)
        params = init_params(old.n_nodes, ScorerConfig(variant="dnn", dim=8, hidden=(8, 8)), 0)
        out = remap_params(params, old, new, seed=5)
        for item in corpus.item_ids.tolist():
            a = params.weights["emb"][old.leaf_of_item[item]]
            b = out.weights["emb"][new.leaf_of_item[item]]
            assert a.tobytes() == b.tobytes()
        assert np.array_equal(out.weights["fc0_w"], params.weights["fc0_w"])

    def test_train_report_patience(self, small_planted):
        corpus, sp = small_planted
        tree = init_category_tree(corpus, 0)
        cfg = TrainConfig(variant="dnn", epochs=6, patience=1, learning_rate=0.5, hidden=(8, 8, 8), dim=8, **PLANTED)
        params = init_params(tree.n_nodes, cfg.scorer_config(), 0)
        _, report = train(params, tree, sp, cfg)
        assert len(report.epochs) <= 6
        if len(report.epochs) < 6:
            assert report.stopped_early


class TestConfig:
    def test_key_value_file(self, tmp_path):
        path = tmp_path / "c.conf"
        path.write_text("# comment\nepochs = 3\nlearning_rate=0.01\nnegatives=total=24\nhidden=16,8,8\nvariant=dnn\n")
        cfg = TrainConfig.from_file(path)
        assert (cfg.epochs, cfg.learning_rate, cfg.negatives, cfg.hidden) == (3, 0.01, "total=24", (16, 8, 8))

    def test_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"epochs": 2, "hidden": [4, 4, 4], "optimizer": "sgd"}))
        cfg = TrainConfig.from_file(path)
        assert cfg.hidden == (4, 4, 4) and cfg.optimizer == "sgd"

    def test_rejects_unknown_and_invalid(self, tmp_path):
        with pytest.raises(ValueError):
            TrainConfig.from_mapping({"epoch": "3"})
        with pytest.raises(ValueError):
            TrainConfig(tree_rounds=0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            TrainConfig(max_heldout=-1)
        (tmp_path / "bad.conf").write_text("epochs 3\n")
        with pytest.raises(ValueError, match=":1:"):
            TrainConfig.from_file(tmp_path / "bad.conf")

    def test_parse_negatives(self):
        assert parse_negatives("total=100") == 100
        assert parse_negatives("1,2,4") == [1, 2, 4]
        assert parse_negatives([3, 3]) == [3, 3]
        assert parse_negatives(7) == 7

    def test_round_trip_dict(self):
        cfg = TrainConfig(hidden=(8, 4, 4), variant="product_dnn", dim=4)
        assert TrainConfig.from_mapping(cfg.to_dict()) == cfg
