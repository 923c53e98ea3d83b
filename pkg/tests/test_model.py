"""Tests for the collaborative recognition network."""

import numpy as np
import pytest

from care_lab import model as M
from care_lab import tensor as T
from care_lab.errors import DimensionError, InputError, UsageError
from care_lab.model import CareConfig, CareParams, RelevanceWeights
from care_lab.tensor import Tensor


PAPER_CONFIG = CareConfig(num_domains=4, num_classes=140,
                          input_shape=(3, 16, 180, 320),
                          base_shape=(256, 8, 23, 40),
                          elab_shape=(4, 12, 20))


@pytest.fixture(scope="module")
def tiny():
    cfg = M.tiny_config()
    return cfg, CareParams.init(cfg, seed=7)


@pytest.fixture(scope="module")
def tiny_x(tiny):
    cfg, _ = tiny
    return Tensor(np.random.default_rng(3).normal(size=cfg.input_shape))


class TestConfig:
    def test_heads_must_divide_channels(self):
        with pytest.raises(InputError):
            CareConfig(base_shape=(3, 4, 8, 8), attention_heads=2)

    def test_unreachable_elab_extent(self):
        with pytest.raises(InputError):
            CareConfig(base_shape=(16, 4, 5, 8), elab_shape=(4, 4, 4))

    def test_param_count_is_pure_function_of_config(self):
        cfg = M.tiny_config()
        a = CareParams.init(cfg, seed=1)
        b = CareParams.init(cfg, seed=2)
        assert a.num_values() == b.num_values()
        assert a.names() == b.names()

    def test_exactly_k_specific_elaborators_and_heads(self):
        cfg = M.tiny_config()
        names = CareParams.init(cfg, 0).names()
        spec = {n.split(".")[1] for n in names if n.startswith("elab.s")}
        heads = {n.split(".")[1] for n in names if n.startswith("relevance.head")}
        assert spec == {f"s{k}" for k in range(cfg.num_domains)}
        assert heads == {f"head{k}" for k in range(cfg.num_domains)}


class TestExtractBase:
    def test_zero_backbone_gives_zero_feature(self):
        cfg = M.tiny_config()
        params = CareParams.zeros(cfg)
        x = Tensor(np.random.default_rng(0).normal(size=cfg.input_shape))
        out = M.extract_base(params, x)
        np.testing.assert_array_equal(out.values, np.zeros(cfg.base_shape))

    def test_paper_config_shape(self):
        params = CareParams.init(PAPER_CONFIG, seed=0)
        x = Tensor(np.zeros(PAPER_CONFIG.input_shape))
        assert M.extract_base(params, x).shape == (256, 8, 23, 40)

    def test_deterministic(self, tiny, tiny_x):
        cfg, params = tiny
        a = M.extract_base(params, tiny_x)
        b = M.extract_base(params, tiny_x)
        assert a.values.tobytes() == b.values.tobytes()

    def test_wrong_input_shape(self, tiny):
        cfg, params = tiny
        with pytest.raises(DimensionError):
            M.extract_base(params, Tensor(np.zeros((1, 1, 4, 4))))


class TestElaborate:
    def test_parameter_tying(self, tiny, tiny_x):
        cfg, params = tiny
        tied = params.replace({f"elab.s1.{suffix}": params[f"elab.gen.{suffix}"]
                               for suffix in _elab_suffixes()})
        f_base = M.extract_base(params, tiny_x)
        gen = M.elaborate(tied, M.GENERAL, f_base)
        spec = M.elaborate(tied, ("specific", 1), f_base)
        assert gen.values.tobytes() == spec.values.tobytes()

    def test_paper_config_shape(self):
        params = CareParams.init(PAPER_CONFIG, seed=0)
        f_base = Tensor(np.random.default_rng(1).normal(size=PAPER_CONFIG.base_shape))
        assert M.elaborate(params, M.GENERAL, f_base).shape == (4, 12, 20)

    def test_attention_rows_sum_to_one(self, tiny, tiny_x):
        cfg, params = tiny
        out = M.elaborate(params, M.GENERAL, M.extract_base(params, tiny_x))
        softmax_nodes = [n for n in T.trace(out).nodes if n.op == "softmax"]
        assert len(softmax_nodes) == 2 * cfg.attention_heads
        for node in softmax_nodes:
            np.testing.assert_allclose(node.out.values.sum(axis=1), 1.0, atol=1e-12)

    def test_bad_domain_index(self, tiny, tiny_x):
        cfg, params = tiny
        f_base = M.extract_base(params, tiny_x)
        with pytest.raises(InputError):
            M.elaborate(params, ("specific", cfg.num_domains), f_base)


def _elab_suffixes():
    out = []
    for blk in range(2):
        out += [f"blk{blk}.{p}" for p in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
    return out + ["proj.w", "proj.b"]


class TestClassify:
    def test_zero_weights_zero_logits(self, tiny):
        cfg, _ = tiny
        params = CareParams.zeros(cfg)
        f = Tensor(np.ones(cfg.elab_shape))
        np.testing.assert_array_equal(M.classify(params, f, f).values,
                                      np.zeros(cfg.num_classes))

    def test_concatenation_is_ordered(self, tiny):
        cfg, params = tiny
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=cfg.elab_shape))
        b = Tensor(rng.normal(size=cfg.elab_shape))
        ab = M.classify(params, a, b).values
        ba = M.classify(params, b, a).values
        assert not np.array_equal(ab, ba)

    def test_logits_length(self, tiny):
        cfg, params = tiny
        f = Tensor(np.zeros(cfg.elab_shape))
        assert M.classify(params, f, f).shape == (cfg.num_classes,)


class TestForwardSeen:
    def test_equals_composition_bit_exactly(self, tiny, tiny_x):
        cfg, params = tiny
        via_op = M.forward_seen(params, tiny_x, 2)
        f_base = M.extract_base(params, tiny_x)
        direct = M.classify(params, M.elaborate(params, M.GENERAL, f_base),
                            M.elaborate(params, ("specific", 2), f_base))
        assert via_op.values.tobytes() == direct.values.tobytes()

    def test_k1_reduction_to_unseen_path_under_forced_unit_weight(self):
        cfg = CareConfig(num_domains=1, num_classes=4,
                         input_shape=(2, 2, 6, 6), base_shape=(2, 2, 3, 3),
                         elab_shape=(2, 3, 3), backbone_hidden=2, relevance_channels=2)
        params = CareParams.init(cfg, seed=11)
        x = Tensor(np.random.default_rng(4).normal(size=cfg.input_shape))
        f_base = M.extract_base(params, x)
        spec = [M.elaborate(params, ("specific", 0), f_base)]
        forced = RelevanceWeights(Tensor(np.ones((1,) + cfg.elab_shape[1:])), M.SPATIAL)
        f_hat = M.approximate_specific(forced, spec)  # 1/K == 1 for K=1
        via_unseen = M.classify(params, M.elaborate(params, M.GENERAL, f_base), f_hat)
        via_seen = M.forward_seen(params, x, 0)
        assert via_unseen.values.tobytes() == via_seen.values.tobytes()

    def test_every_parameter_group_receives_gradient(self, tiny, tiny_x):
        cfg, params = tiny
        fresh = params.copy()
        loss = T.cross_entropy_logits(M.forward_seen(fresh, tiny_x, 1), 0)
        T.backward(loss)
        for prefix in ("backbone.", "elab.gen.", "elab.s1.", "classifier."):
            group = [n for n in fresh.names() if n.startswith(prefix)]
            assert any(np.any(fresh[n].grad != 0) for n in group), prefix


class TestEvaluateRelevance:
    def test_entries_in_unit_interval(self, tiny, tiny_x):
        cfg, params = tiny
        f_base = M.extract_base(params, tiny_x)
        spec = [M.elaborate(params, ("specific", k), f_base)
                for k in range(cfg.num_domains)]
        w = M.evaluate_relevance(params, f_base, spec)
        assert w.values.shape == (cfg.num_domains,) + cfg.elab_shape[1:]
        assert np.all(w.values.values >= 0.0) and np.all(w.values.values <= 1.0)

    def test_zero_heads_give_half(self, tiny, tiny_x):
        cfg, params = tiny
        zeroed = params.replace({
            n: T.zeros(params[n].shape, requires_grad=True)
            for n in params.names() if n.startswith("relevance.head")})
        f_base = M.extract_base(params, tiny_x)
        spec = [M.elaborate(params, ("specific", k), f_base)
                for k in range(cfg.num_domains)]
        w = M.evaluate_relevance(zeroed, f_base, spec)
        np.testing.assert_array_equal(w.values.values, np.full(w.values.shape, 0.5))

    def test_permutation_equivariance(self, tiny, tiny_x):
        cfg, params = tiny
        f_base = M.extract_base(params, tiny_x)
        spec = [M.elaborate(params, ("specific", k), f_base)
                for k in range(cfg.num_domains)]
        w = M.evaluate_relevance(params, f_base, spec).values.values
        perm = [2, 0, 1]
        permuted_params = params.replace(
            {f"relevance.head{i}.{s}": params[f"relevance.head{p}.{s}"]
             for i, p in enumerate(perm) for s in ("w", "b")})
        w_perm = M.evaluate_relevance(permuted_params, f_base,
                                      [spec[p] for p in perm]).values.values
        np.testing.assert_array_equal(w_perm, w[perm])

    def test_wrong_list_length(self, tiny, tiny_x):
        cfg, params = tiny
        f_base = M.extract_base(params, tiny_x)
        with pytest.raises(InputError):
            M.evaluate_relevance(params, f_base, [])


class TestApproximateSpecific:
    def _feats(self, cfg, n=None):
        rng = np.random.default_rng(5)
        return [Tensor(rng.normal(size=cfg.elab_shape))
                for _ in range(n or cfg.num_domains)]

    def test_zero_weights_zero_feature(self, tiny):
        cfg, _ = tiny
        feats = self._feats(cfg)
        w = RelevanceWeights(T.zeros((cfg.num_domains,) + cfg.elab_shape[1:]), M.SPATIAL)
        out = M.approximate_specific(w, feats)
        np.testing.assert_array_equal(out.values, np.zeros(cfg.elab_shape))

    def test_one_hot_gives_feature_over_k(self, tiny):
        cfg, _ = tiny
        feats = self._feats(cfg)
        j = 1
        maps = np.zeros((cfg.num_domains,) + cfg.elab_shape[1:])
        maps[j] = 1.0
        out = M.approximate_specific(RelevanceWeights(Tensor(maps), M.SPATIAL), feats)
        np.testing.assert_array_equal(out.values, feats[j].values / cfg.num_domains)

    def test_hand_built_k2_weighted_sum(self):
        f1 = Tensor([[[1.0, 2.0], [3.0, 4.0]]])      # (1, 2, 2)
        f2 = Tensor([[[10.0, 20.0], [30.0, 40.0]]])
        w = Tensor([[[0.5, 1.0], [0.0, 0.25]],
                    [[1.0, 0.5], [0.5, 0.0]]])
        out = M.approximate_specific(RelevanceWeights(w, M.SPATIAL), [f1, f2])
        # by hand: 0.5*(w1*f1 + w2*f2)
        expect = 0.5 * np.array([[[0.5 * 1 + 1.0 * 10, 1.0 * 2 + 0.5 * 20],
                                  [0.0 * 3 + 0.5 * 30, 0.25 * 4 + 0.0 * 40]]])
        np.testing.assert_allclose(out.values, expect, rtol=1e-15)

    def test_homogeneity_in_raw_weights(self, tiny):
        cfg, _ = tiny
        feats = self._feats(cfg)
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(cfg.num_domains,) + cfg.elab_shape[1:])
        alpha = 3.7
        one = M.approximate_specific(RelevanceWeights(Tensor(raw), M.SPATIAL), feats)
        scaled = M.approximate_specific(RelevanceWeights(Tensor(alpha * raw), M.SPATIAL),
                                        feats)
        np.testing.assert_allclose(scaled.values, alpha * one.values, atol=1e-12)

    def test_scalar_equals_spatial_at_constant_maps(self, tiny):
        cfg, _ = tiny
        feats = self._feats(cfg)
        consts = np.array([0.3, 0.8, 0.1])
        scalar = M.approximate_specific(RelevanceWeights(Tensor(consts), M.SCALAR), feats)
        maps = np.broadcast_to(consts[:, None, None],
                               (cfg.num_domains,) + cfg.elab_shape[1:]).copy()
        spatial = M.approximate_specific(RelevanceWeights(Tensor(maps), M.SPATIAL), feats)
        assert scalar.values.tobytes() == spatial.values.tobytes()

    def test_mode_mismatch_raises(self, tiny):
        cfg, _ = tiny
        feats = self._feats(cfg)
        with pytest.raises(UsageError):
            M.approximate_specific(
                RelevanceWeights(T.zeros((cfg.num_domains,)), M.SPATIAL), feats)


class TestForwardUnseen:
    def test_forced_one_hot_without_scaling_matches_seen(self, tiny, tiny_x):
        cfg, params = tiny
        j = 2
        f_base = M.extract_base(params, tiny_x)
        spec = [M.elaborate(params, ("specific", k), f_base)
                for k in range(cfg.num_domains)]
        # one-hot weights with the 1/K factor removed: plain masked sum
        acc = None
        for k, f in enumerate(spec):
            term = T.mul(f, Tensor(np.full(cfg.elab_shape[1:], 1.0 if k == j else 0.0)))
            acc = term if acc is None else T.add(acc, term)
        via_unseen = M.classify(params, M.elaborate(params, M.GENERAL, f_base), acc)
        assert via_unseen.values.tobytes() == M.forward_seen(params, tiny_x, j).values.tobytes()

    def test_deterministic_and_length(self, tiny, tiny_x):
        cfg, params = tiny
        a = M.forward_unseen(params, tiny_x)
        b = M.forward_unseen(params, tiny_x)
        assert a.shape == (cfg.num_classes,)
        assert a.values.tobytes() == b.values.tobytes()

    def test_seen_path_never_touches_relevance(self, tiny, tiny_x):
        cfg, params = tiny
        fresh = params.copy()
        T.backward(T.cross_entropy_logits(M.forward_seen(fresh, tiny_x, 0), 1))
        for n in fresh.relevance_names():
            np.testing.assert_array_equal(fresh[n].grad, np.zeros(fresh[n].shape))

    def test_unseen_path_touches_every_specific_elaborator(self, tiny, tiny_x):
        cfg, params = tiny
        fresh = params.copy()
        T.backward(T.cross_entropy_logits(M.forward_unseen(fresh, tiny_x), 1))
        for k in range(cfg.num_domains):
            group = [n for n in fresh.names() if n.startswith(f"elab.s{k}.")]
            assert any(np.any(fresh[n].grad != 0) for n in group), k
        assert any(np.any(fresh[n].grad != 0) for n in fresh.relevance_names())


class TestAblatedForward:
    def test_modes_differ_structurally(self, tiny, tiny_x):
        cfg, params = tiny
        a = M.ablated_forward(params, tiny_x, M.NO_SPECIFIC)
        b = M.ablated_forward(params, tiny_x, M.NO_GENERAL)
        assert not np.array_equal(a.values, b.values)

    def test_scalar_mode_requires_scalar_params(self, tiny, tiny_x):
        cfg, params = tiny
        with pytest.raises(UsageError):
            M.ablated_forward(params, tiny_x, M.SCALAR_WEIGHTS)

    def test_scalar_mode_runs_with_scalar_params(self, tiny_x):
        cfg = M.tiny_config()
        scal = CareConfig(**{**cfg.to_dict(), "weight_mode": M.SCALAR})
        params = CareParams.init(scal, seed=3)
        out = M.ablated_forward(params, tiny_x, M.SCALAR_WEIGHTS)
        assert out.shape == (cfg.num_classes,)

    def test_dead_branch_gets_zero_gradient(self, tiny, tiny_x):
        cfg, params = tiny
        fresh = params.copy()
        T.backward(T.cross_entropy_logits(
            M.ablated_forward(fresh, tiny_x, M.NO_SPECIFIC), 0))
        dead = [n for n in fresh.names()
                if n.startswith("elab.s") or n.startswith("relevance.")]
        for n in dead:
            np.testing.assert_array_equal(fresh[n].grad, np.zeros(fresh[n].shape))

        fresh2 = params.copy()
        T.backward(T.cross_entropy_logits(
            M.ablated_forward(fresh2, tiny_x, M.NO_GENERAL), 0))
        for n in [n for n in fresh2.names() if n.startswith("elab.gen.")]:
            np.testing.assert_array_equal(fresh2[n].grad, np.zeros(fresh2[n].shape))

    def test_unknown_mode(self, tiny, tiny_x):
        cfg, params = tiny
        with pytest.raises(InputError):
            M.ablated_forward(params, tiny_x, "nope")


class TestPersistence:
    def test_blob_round_trip(self, tiny):
        cfg, params = tiny
        back = M.params_from_bytes(M.params_to_bytes(params))
        assert back.config == cfg
        for n in params.names():
            assert np.array_equal(back[n].values, params[n].values)

    def test_blob_is_deterministic(self, tiny):
        _, params = tiny
        assert M.params_to_bytes(params) == M.params_to_bytes(params)


class TestBatchedForwards:
    def test_batched_paths_match_per_sample(self, tiny):
        cfg, params = tiny
        rng = np.random.default_rng(12)
        xs = rng.normal(size=(3,) + cfg.input_shape)
        batch_seen = M.forward_seen_batch(params, Tensor(xs), 1)
        batch_unseen = M.forward_unseen_batch(params, Tensor(xs))
        for i in range(3):
            single_seen = M.forward_seen(params, Tensor(xs[i]), 1)
            single_unseen = M.forward_unseen(params, Tensor(xs[i]))
            np.testing.assert_allclose(batch_seen.values[i], single_seen.values,
                                       rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(batch_unseen.values[i], single_unseen.values,
                                       rtol=1e-12, atol=1e-14)

    def test_batched_ablations_match_per_sample(self, tiny):
        cfg, params = tiny
        rng = np.random.default_rng(13)
        xs = rng.normal(size=(2,) + cfg.input_shape)
        for mode in (M.NO_SPECIFIC, M.NO_GENERAL):
            batched = M.forward_unseen_batch(params, Tensor(xs), ablation=mode)
            for i in range(2):
                single = M.ablated_forward(params, Tensor(xs[i]), mode)
                np.testing.assert_allclose(batched.values[i], single.values,
                                           rtol=1e-12, atol=1e-14)

    def test_batched_gradients_match_per_sample(self, tiny):
        cfg, params = tiny
        rng = np.random.default_rng(14)
        xs = rng.normal(size=(2,) + cfg.input_shape)
        fresh_b = params.copy()
        logits = M.forward_unseen_batch(fresh_b, Tensor(xs))
        total = None
        for i in range(2):
            row = T.reshape(T.slice_(logits, 0, i, i + 1), (cfg.num_classes,))
            loss = T.cross_entropy_logits(row, i)
            total = loss if total is None else T.add(total, loss)
        T.backward(total)

        fresh_s = params.copy()
        total_s = None
        for i in range(2):
            loss = T.cross_entropy_logits(M.forward_unseen(fresh_s, Tensor(xs[i])), i)
            total_s = loss if total_s is None else T.add(total_s, loss)
        T.backward(total_s)
        for n in params.names():
            np.testing.assert_allclose(fresh_b[n].grad, fresh_s[n].grad,
                                       rtol=1e-9, atol=1e-12, err_msg=n)


class TestModelGradients:
    def test_spot_check_full_loss_against_finite_differences(self, tiny):
        from care_lab import gradcheck as G
        cfg, params = tiny
        x = Tensor(np.random.default_rng(9).normal(scale=G.MODEL_PROBE_SCALE,
                                                   size=cfg.input_shape))
        for name in ("backbone.conv2.w", "elab.s0.blk0.wq", "relevance.head1.w",
                     "classifier.w", "elab.gen.proj.b", "relevance.conv1.w"):
            def f(p, name=name):
                swapped = params.replace({name: p})
                return T.cross_entropy_logits(M.forward_unseen(swapped, x), 2)
            err = T.grad_check(f, params[name], step=G.MODEL_STEP)
            assert err < G.TOLERANCE, (name, err)
