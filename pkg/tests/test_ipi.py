import numpy as np
import pytest

from conftest import DATA_DIR
from oracles import naive_multihead_attention
from posekit.errors import ConfigError, ShapeError, UsageError
from posekit.ipi import (
    IpiConfig,
    IpiParams,
    encode_keypoints,
    finite_difference_grad,
    grad_check,
    init_ipi_params,
    ipi_attention_weights,
    ipi_backward,
    ipi_forward,
    ipi_forward_cached,
    multihead_attention,
    param_shapes,
    residual_inject,
    synthetic_clip_features,
    zero_grads,
)
from posekit.seeding import make_rng
from posekit.skeleton import PoseFrame, PoseSequence, stick_figure


def fixture_pose(seed=55, n_frames=5) -> PoseSequence:
    rng = make_rng(seed)
    frames = []
    for _ in range(n_frames):
        base = stick_figure(64.0, 40.0, torso=24.0)
        body = base.body.copy()
        body[:, 0] += rng.normal(0, 2.0, 18)
        body[:, 1] += rng.normal(0, 2.0, 18)
        frames.append(PoseFrame(body=body))
    return PoseSequence(tuple(frames), 128, 160, 12.0)


def zero_params(cfg: IpiConfig) -> IpiParams:
    return IpiParams(cfg, {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()})


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            IpiConfig(d_model=10, n_heads=4)

    def test_alpha_default_is_one(self):
        assert IpiConfig().alpha == 1.0

    def test_alpha_bounds(self):
        with pytest.raises(ConfigError):
            IpiConfig(alpha=1.5)


class TestEncodeKeypoints:
    def test_zero_input_zero_params_gives_zero(self):
        cfg = IpiConfig(d_model=16, n_heads=2, n_layers=1)
        pose = PoseSequence((PoseFrame(body=np.zeros((18, 3))),), 64, 64, 10.0)
        q_p = encode_keypoints(pose, zero_params(cfg), cfg)
        assert np.all(q_p == 0.0)

    def test_purity(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(1))
        pose = fixture_pose()
        a = encode_keypoints(pose, params, cfg)
        b = encode_keypoints(pose, params, cfg)
        assert np.array_equal(a, b)

    def test_output_shape_matches_learnable_queries(self):
        cfg = IpiConfig(n_learnable_queries=7)
        params = init_ipi_params(cfg, make_rng(1))
        q_p = encode_keypoints(fixture_pose(n_frames=3), params, cfg)
        assert q_p.shape == (7, cfg.d_model)

    def test_golden_output(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(2024))
        pose = fixture_pose()
        golden = np.load(DATA_DIR / "golden_ipi_qp.npy")
        assert np.allclose(encode_keypoints(pose, params, cfg), golden, atol=1e-12)


class TestAttention:
    def test_single_key_identity_projections(self):
        d = 8
        eye = np.eye(d)
        rng = make_rng(0)
        q_in = rng.normal(size=(3, d))
        kv = rng.normal(size=(1, d))
        out, weights = multihead_attention(q_in, kv, eye, eye, eye, eye, n_heads=2)
        for row in out:
            assert row == pytest.approx(kv[0].tolist(), abs=1e-12)
        assert np.all(weights == 1.0)

    def test_two_identical_keys_split_evenly(self):
        d = 8
        rng = make_rng(1)
        q_in = rng.normal(size=(4, d))
        key = rng.normal(size=d)
        kv = np.stack([key, key])
        ws = [rng.normal(size=(d, d)) for _ in range(4)]
        _, weights = multihead_attention(q_in, kv, *ws, n_heads=2)
        assert np.allclose(weights, 0.5, atol=1e-12)

    @pytest.mark.parametrize("n_q,n_k,d,heads", [
        (3, 5, 8, 2), (1, 1, 4, 1), (8, 8, 16, 4), (8, 3, 16, 2), (2, 8, 16, 4),
    ])
    def test_matches_naive_oracle(self, n_q, n_k, d, heads):
        rng = make_rng(n_q * 100 + n_k * 10 + d)
        q_in = rng.normal(size=(n_q, d))
        kv = rng.normal(size=(n_k, d))
        ws = [rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)]
        fast, _ = multihead_attention(q_in, kv, *ws, n_heads=heads)
        naive = naive_multihead_attention(q_in, kv, *ws, n_heads=heads)
        assert np.abs(fast - naive).max() <= 1e-12

    def test_rows_sum_to_one_in_full_forward(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(4))
        pose = fixture_pose()
        clip = synthetic_clip_features(pose, 6, cfg.d_model, seed=9)
        for weights in ipi_attention_weights(clip, pose, params, cfg):
            sums = weights.sum(axis=-1)
            assert np.abs(sums - 1.0).max() <= 1e-9
            assert weights.min() >= 0.0 and weights.max() <= 1.0


class TestIpiForward:
    def test_output_shape_and_golden(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(2024))
        pose = fixture_pose()
        clip = synthetic_clip_features(pose, 6, cfg.d_model, seed=9)
        f_i = ipi_forward(clip, pose, params, cfg)
        assert f_i.shape == (cfg.n_learnable_queries, cfg.d_model)
        golden = np.load(DATA_DIR / "golden_ipi_fi.npy")
        assert np.allclose(f_i, golden, atol=1e-12)

    def test_dimension_mismatch_names_both_shapes(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(0))
        with pytest.raises(ShapeError, match=r"\(3, 32\).*64"):
            ipi_forward(np.zeros((3, 32)), fixture_pose(), params, cfg)

    def test_key_permutation_leaves_output_unchanged(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(6))
        pose = fixture_pose()
        clip = synthetic_clip_features(pose, 6, cfg.d_model, seed=9)
        base = ipi_forward(clip, pose, params, cfg)
        permuted = ipi_forward(clip[::-1].copy(), pose, params, cfg)
        assert np.abs(base - permuted).max() <= 1e-12

    def test_clip_stub_is_content_keyed(self):
        pose_a = fixture_pose(seed=1)
        pose_b = fixture_pose(seed=2)
        feat_a = synthetic_clip_features(pose_a, 4, 64, seed=0)
        feat_a2 = synthetic_clip_features(pose_a, 4, 64, seed=0)
        feat_b = synthetic_clip_features(pose_b, 4, 64, seed=0)
        assert np.array_equal(feat_a, feat_a2)
        assert not np.array_equal(feat_a, feat_b)


class TestResidualInject:
    def test_alpha_zero_is_bitwise_identity(self):
        x = make_rng(0).normal(size=(4, 8))
        out = residual_inject(x, np.ones_like(x), 0.0)
        assert out is x

    def test_alpha_one_cancels_negation(self):
        x = make_rng(1).normal(size=(4, 8))
        assert np.all(residual_inject(x, -x, 1.0) == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            residual_inject(np.zeros((2, 3)), np.zeros((3, 2)), 1.0)


class TestGradCheck:
    def test_finite_difference_is_exact_for_linear_layer(self):
        rng = make_rng(0)
        w = rng.normal(size=(6, 4))
        x = rng.normal(size=6)
        c = rng.normal(size=4)

        def loss():
            return float(np.dot(x @ w, c))

        analytic = np.outer(x, c)
        # A linear map has zero truncation error, so a generous step keeps
        # the check in the rounding-free regime.
        for flat in range(w.size):
            numeric = finite_difference_grad(loss, w, flat, eps=1e-2)
            a = analytic.flat[flat]
            assert abs(a - numeric) / max(abs(a), abs(numeric), 1e-12) <= 1e-9

    def test_default_config_passes_tolerance(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(100))
        report = grad_check(params, cfg, entries_per_block=6, seed=0)
        assert report.max_rel_error <= 1e-4
        assert set(report.per_block) == set(param_shapes(cfg))

    def test_zero_input_zero_params_zero_gradients(self):
        cfg = IpiConfig(d_model=16, n_heads=2, n_layers=1)
        params = zero_params(cfg)
        pose = PoseSequence((PoseFrame(body=np.zeros((18, 3))),), 64, 64, 10.0)
        clip = np.zeros((3, cfg.d_model))
        out, cache = ipi_forward_cached(clip, pose, params, cfg)
        grads = ipi_backward(2.0 * out, cache, params, cfg)
        for name, grad in grads.items():
            assert np.all(grad == 0.0), name

    def test_backward_matches_finite_differences_on_small_config(self):
        cfg = IpiConfig(d_model=8, n_heads=2, n_layers=1, n_learnable_queries=2)
        params = init_ipi_params(cfg, make_rng(3))
        report = grad_check(params, cfg, entries_per_block=10, seed=1)
        assert report.max_rel_error <= 1e-5


class TestParams:
    def test_block_shape_validation(self):
        cfg = IpiConfig()
        blocks = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}
        blocks["q_l"] = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            IpiParams(cfg, blocks)

    def test_missing_block_rejected(self):
        cfg = IpiConfig()
        blocks = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}
        del blocks["q_l"]
        with pytest.raises(ConfigError):
            IpiParams(cfg, blocks)

    def test_copy_is_deep(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(0))
        clone = params.copy()
        clone.blocks["q_l"][0, 0] += 1.0
        assert params.blocks["q_l"][0, 0] != clone.blocks["q_l"][0, 0]

    def test_empty_sequence_rejected(self):
        cfg = IpiConfig()
        params = init_ipi_params(cfg, make_rng(0))
        seq = fixture_pose()
        hollow = seq.replace_frames(seq.frames)  # valid; now check the guard directly
        assert len(hollow.frames) > 0
        with pytest.raises(UsageError):
            # bypass PoseSequence's own guard via a stand-in object
            class Hollow:
                frames = ()
                width = 64
                height = 64
            encode_keypoints(Hollow(), params, cfg)
