import numpy as np
import pytest

from oracles import gradient_check, micro_config, micro_instance
from tdm.scorer import (
    PROB_CLAMP,
    VARIANTS,
    Behaviors,
    CheckpointError,
    NumericError,
    ScorerConfig,
    ScorerParams,
    backward,
    count_parameters,
    forward,
    init_params,
    loss_and_grad,
    score_nodes,
    update_bn_stats,
    user_vectors,
)


def empty_behaviors(n_users=1, n_windows=10):
    return Behaviors.from_windows([[[] for _ in range(n_windows)] for _ in range(n_users)], n_windows)


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_empty_state_is_finite(self, variant):
        params = init_params(15, ScorerConfig(variant=variant), 0)
        p = forward(params, empty_behaviors(), [0, 0], [3, 9]).prob
        assert np.all((p > 0) & (p < 1))

    def test_repeated_behavior_same_window_output(self):
        params = init_params(15, ScorerConfig(variant="dnn", n_windows=2), 1)
        once = Behaviors.from_windows([[[4], [7]]], 2)
        thrice = Behaviors.from_windows([[[4, 4, 4], [7]]], 2)
        a = forward(params, once, [0], [9]).prob
        b = forward(params, thrice, [0], [9]).prob
        assert a[0] == pytest.approx(b[0], abs=1e-15)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_scoring_twice_is_bitwise_identical(self, variant):
        params, beh, users, cand, _ = micro_instance(variant, 5, train=False)
        a = forward(params, beh, users, cand).prob
        b = forward(params, beh, users, cand).prob
        assert a.tobytes() == b.tobytes()

    def test_batched_equals_one_at_a_time(self):
        params, beh, users, cand, _ = micro_instance("attention_dnn", 8, train=False, n_samples=10)
        batch = forward(params, beh, users, cand).prob
        single = [forward(params, beh, users[i : i + 1], cand[i : i + 1]).prob[0] for i in range(10)]
        np.testing.assert_allclose(batch, single, rtol=0, atol=1e-14)

    def test_node_out_of_range(self):
        params = init_params(15, ScorerConfig(variant="dnn"), 0)
        with pytest.raises(IndexError):
            forward(params, empty_behaviors(), [0], [15])

    def test_nan_names_layer(self):
        params = init_params(15, ScorerConfig(variant="dnn"), 0)
        params.weights["fc1_w"][0, 0] = np.nan
        with pytest.raises(NumericError) as err:
            forward(params, empty_behaviors(), [0], [3])
        assert err.value.layer == "fc1"

    def test_probabilities_clamped(self):
        params = init_params(15, ScorerConfig(variant="dnn"), 0)
        params.weights["out_b"][:] = [-100.0, 100.0]
        cache = forward(params, empty_behaviors(), [0], [3])
        assert cache.prob[0] == 1 - PROB_CLAMP
        assert cache.n_clamped == 1

    def test_attention_ones_matches_dnn(self):
        att = init_params(40, ScorerConfig(variant="attention_dnn"), 2)
        att.weights["att_w2"][:] = 0.0
        att.weights["att_b2"][:] = 1.0
        dnn = init_params(40, ScorerConfig(variant="dnn"), 2)
        for name in dnn.weights:
            dnn.weights[name] = att.weights[name].copy()
        rng = np.random.default_rng(0)
        wins = [[rng.integers(0, 40, rng.integers(0, 6)).tolist() for _ in range(10)] for _ in range(4)]
        beh = Behaviors.from_windows(wins, 10)
        users, cand = rng.integers(0, 4, 30), rng.integers(0, 40, 30)
        for train in (False, True):
            a = forward(att, beh, users, cand, train=train).prob
            b = forward(dnn, beh, users, cand, train=train).prob
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_without_batch_norm_train_equals_eval(self, variant):
        cfg = ScorerConfig(variant=variant, batch_norm=False)
        params = init_params(30, cfg, 3)
        rng = np.random.default_rng(1)
        beh = Behaviors.from_windows([[rng.integers(0, 30, 3).tolist() for _ in range(10)] for _ in range(3)], 10)
        users, cand = rng.integers(0, 3, 20), rng.integers(0, 30, 20)
        a = forward(params, beh, users, cand, train=True).prob
        b = forward(params, beh, users, cand, train=False).prob
        assert a.tobytes() == b.tobytes()

    def test_product_dnn_logit_is_dot_product(self):
        params, beh, users, cand, _ = micro_instance("product_dnn", 4, train=False)
        vec = user_vectors(params, beh)
        logits = np.einsum("sd,sd->s", vec[users], params.weights["emb"][cand])
        np.testing.assert_allclose(forward(params, beh, users, cand).prob, 1 / (1 + np.exp(-logits)), atol=1e-14)

    def test_score_nodes_chunks(self):
        params, beh, users, cand, _ = micro_instance("dnn", 6, train=False, n_samples=50)
        np.testing.assert_array_equal(score_nodes(params, beh, users, cand, chunk=7), forward(params, beh, users, cand).prob)


class TestBackward:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("train", [True, False])
    def test_finite_difference(self, variant, train):
        for seed in range(3):
            result = gradient_check(*micro_instance(variant, seed, train=train), train=train)
            assert result.zero_rows_ok
            assert result.checked > 100
            assert result.worst < 1e-4

    def test_output_gradient_balances_at_half(self):
        params = init_params(15, micro_config("dnn"), 0)
        params.weights["out_w"][:, 1] = params.weights["out_w"][:, 0]
        params.weights["out_b"][:] = 0.3
        beh = empty_behaviors(1, 3)
        cache = forward(params, beh, [0], [4], train=True, keep_cache=True)
        assert cache.prob[0] == 0.5
        grads = backward(params, beh, cache, np.array([1]))
        assert grads["out_b"].sum() == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(grads["out_w"].sum(axis=1), 0.0, atol=1e-15)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_untouched_rows_have_zero_gradient(self, variant):
        params, beh, users, cand, labels = micro_instance(variant, 11, n_nodes=30)
        _, grads, _ = loss_and_grad(params, beh, users, cand, labels)
        touched = set(cand.tolist()) | set(beh.nodes[beh.mask > 0].tolist())
        untouched = [r for r in range(30) if r not in touched]
        assert untouched
        assert np.all(grads["emb"][untouched] == 0.0)

    def test_bn_stats_move_only_on_update(self):
        params, beh, users, cand, labels = micro_instance("dnn", 2)
        before = {k: v.copy() for k, v in params.bn_state.items()}
        _, _, cache = loss_and_grad(params, beh, users, cand, labels)
        assert all(np.array_equal(before[k], params.bn_state[k]) for k in before)
        update_bn_stats(params, cache)
        assert float(params.bn_state["bn_steps"]) == 1.0
        assert not np.array_equal(before["bn0_mean"], params.bn_state["bn0_mean"])


class TestInit:
    def test_same_seed_same_checksum(self):
        cfg = ScorerConfig()
        assert init_params(100, cfg, 4).checksum() == init_params(100, cfg, 4).checksum()
        assert init_params(100, cfg, 4).checksum() != init_params(100, cfg, 5).checksum()

    def test_initial_values(self):
        params = init_params(1000, ScorerConfig(), 0)
        emb = params.weights["emb"]
        assert emb.min() >= -0.05 and emb.max() <= 0.05
        assert np.all(params.weights["fc0_a"] == 0.25)

    def test_parameter_count_by_hand(self):
        # d=24, W=10, activation unit 72->36->1, dense 264->128->64->24, 2-way head
        n = 1000
        emb = n * 24
        unit = 72 * 36 + 36 + 36 + 36 * 1 + 1
        dense = (264 * 128 + 4 * 128) + (128 * 64 + 4 * 64) + (64 * 24 + 4 * 24)
        head = 24 * 2 + 2
        assert emb + unit + dense + head == 24000 + 2701 + 44384 + 50
        for variant in VARIANTS:
            cfg = ScorerConfig(variant=variant)
            assert init_params(n, cfg, 0).n_parameters == count_parameters(cfg, n)
        assert count_parameters(ScorerConfig(), n) == emb + unit + dense + head
        # product_dnn: no unit, no candidate input, linear last layer, no head
        product = emb + (240 * 128 + 4 * 128) + (128 * 64 + 4 * 64) + (64 * 24 + 24)
        assert count_parameters(ScorerConfig(variant="product_dnn"), n) == product

    def test_product_dnn_width_check(self):
        with pytest.raises(ValueError):
            ScorerConfig(variant="product_dnn", hidden=(128, 64, 16))

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ScorerConfig(variant="wide_deep")


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip_bitwise(self, variant, tmp_path):
        params, *_ = micro_instance(variant, 3, train=False)
        params.save(tmp_path / "p.bin")
        loaded = ScorerParams.load(tmp_path / "p.bin")
        assert loaded.config == params.config
        assert loaded.checksum() == params.checksum()
        assert loaded.to_bytes() == params.to_bytes()

    def test_corruption_detected(self):
        data = bytearray(init_params(10, micro_config("dnn"), 0).to_bytes())
        data[-40] ^= 1
        with pytest.raises(CheckpointError, match="checksum"):
            ScorerParams.from_bytes(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            ScorerParams.from_bytes(b"NOPE" + bytes(100))
