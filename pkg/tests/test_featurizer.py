import numpy as np
import pytest

import gendet.numcore as nc
from gendet.featurizer import (
    FeaturizerParams,
    ModelConfig,
    encode,
    patch_embed,
    select_queries,
    sinusoidal_positions,
)

from gradcheck import fd_check_directional


def tiny_cfg(**overrides):
    base = dict(
        embed_dim=8,
        num_queries=3,
        text_tokens=3,
        decoder_layers=1,
        heads=2,
        encoder_layers=1,
        patch_size=8,
        image_size=16,
        vocab_size=5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_params(cfg, seed=0, dtype=np.float64):
    return FeaturizerParams.create(np.random.default_rng(seed), cfg, dtype=dtype)


class TestModelConfig:
    def test_defaults_validate(self):
        cfg = ModelConfig().validate()
        assert cfg.num_patches == 64 and cfg.grid == 8

    @pytest.mark.parametrize(
        "overrides",
        [
            {"image_size": 60},  # not divisible by patch
            {"heads": 5},  # d % heads != 0
            {"num_queries": 100},  # more queries than patches
            {"text_tokens": 1},
            {"decoder_layers": 0},
            {"vocab_size": 2},
        ],
    )
    def test_bad_configs_rejected(self, overrides):
        with pytest.raises(nc.ConfigError):
            tiny_cfg(**overrides).validate()


class TestPatchEmbed:
    def test_shapes(self):
        cfg = ModelConfig()
        params = make_params(cfg)
        fm = patch_embed(np.zeros((64, 64, 3)), params, cfg)
        assert fm.tokens.data.shape == (64, cfg.embed_dim)
        assert fm.positions.shape == (64, cfg.embed_dim)

    def test_zero_image_gives_bias_plus_positions(self):
        cfg = tiny_cfg()
        params = make_params(cfg)
        fm = patch_embed(np.zeros((16, 16, 3)), params, cfg)
        expected = params.patch.b.data + fm.positions
        np.testing.assert_allclose(fm.tokens.data, expected, atol=1e-12)

    def test_locality_one_patch_changes_one_token(self):
        cfg = tiny_cfg()
        params = make_params(cfg)
        rng = np.random.default_rng(1)
        img_a = rng.random((16, 16, 3))
        img_b = img_a.copy()
        img_b[8:16, 0:8] += 0.25  # patch at grid row 1, col 0 -> token index 2
        a = patch_embed(img_a, params, cfg).tokens.data
        b = patch_embed(img_b, params, cfg).tokens.data
        differs = np.abs(a - b).sum(axis=1) > 0
        assert differs.tolist() == [False, False, True, False]

    def test_batched_matches_single(self):
        cfg = tiny_cfg()
        params = make_params(cfg)
        rng = np.random.default_rng(2)
        images = rng.random((3, 16, 16, 3))
        batched = patch_embed(images, params, cfg).tokens.data
        for i in range(3):
            single = patch_embed(images[i], params, cfg).tokens.data
            np.testing.assert_array_equal(batched[i], single)

    def test_positions_deterministic(self):
        a = sinusoidal_positions(4, 4, 8)
        b = sinusoidal_positions(4, 4, 8)
        assert np.array_equal(a, b)

    def test_bad_shape_rejected(self):
        cfg = tiny_cfg()
        with pytest.raises(nc.ConfigError):
            patch_embed(np.zeros((17, 16, 3)), make_params(cfg), cfg)


class TestEncode:
    def test_output_shape_matches_input(self):
        cfg = tiny_cfg(encoder_layers=2)
        params = make_params(cfg)
        fm = patch_embed(np.random.default_rng(0).random((16, 16, 3)), params, cfg)
        out = encode(fm, params, cfg)
        assert out.data.shape == fm.tokens.data.shape

    def test_zero_layers_is_identity(self):
        cfg = tiny_cfg(encoder_layers=0)
        params = make_params(cfg)
        fm = patch_embed(np.random.default_rng(0).random((16, 16, 3)), params, cfg)
        out = encode(fm, params, cfg)
        assert out is fm.tokens

    def test_permutation_equivariance_without_positions(self):
        # with positions zeroed out of the tokens, permuting the token rows
        # permutes the encoder output the same way
        cfg = tiny_cfg(encoder_layers=2)
        params = make_params(cfg, seed=3)
        rng = np.random.default_rng(4)
        tokens = rng.standard_normal((4, cfg.embed_dim))
        perm = rng.permutation(4)

        class Plain:
            def __init__(self, t):
                self.tokens = nc.DiffArray(t)
                self.positions = np.zeros_like(t)

        base = encode(Plain(tokens), params, cfg).data
        permuted = encode(Plain(tokens[perm]), params, cfg).data
        np.testing.assert_allclose(permuted, base[perm], atol=1e-10, rtol=0)


class TestSelectQueries:
    def test_all_tokens_selected_in_descending_score_order(self):
        cfg = tiny_cfg(num_queries=4)
        params = make_params(cfg, seed=5)
        rng = np.random.default_rng(6)
        features = nc.DiffArray(rng.standard_normal((4, cfg.embed_dim)))
        _, idx = select_queries(features, params, cfg)
        scores = (features.data @ params.score.w.data + params.score.b.data).ravel()
        assert sorted(idx.tolist()) == [0, 1, 2, 3]
        assert all(scores[idx[i]] >= scores[idx[i + 1]] for i in range(3))

    def test_tie_broken_by_lower_index(self):
        cfg = tiny_cfg(num_queries=2, embed_dim=4, heads=2)
        params = make_params(cfg, seed=7)
        params.score.w.data = np.zeros((4, 1))
        params.score.b.data = np.zeros(1)
        features = nc.DiffArray(np.eye(4))
        features.data[1] *= 0.9
        features.data[3] *= 0.9
        # zero weights -> every score ties at 0 -> indices 0, 1 win
        _, idx = select_queries(features, params, cfg)
        assert idx.tolist() == [0, 1]

    def test_scores_example_with_tie(self):
        cfg = tiny_cfg(num_queries=2, embed_dim=4, heads=2)
        params = make_params(cfg, seed=8)
        params.score.w.data = np.array([[1.0], [0.0], [0.0], [0.0]])
        params.score.b.data = np.zeros(1)
        feats = np.zeros((4, 4))
        feats[:, 0] = [0.1, 0.9, 0.5, 0.9]
        _, idx = select_queries(nc.DiffArray(feats), params, cfg)
        assert set(idx.tolist()) == {1, 3} and idx.tolist() == [1, 3]

    def test_top_n_matches_sort_oracle(self):
        cfg = tiny_cfg(num_queries=2)
        params = make_params(cfg, seed=9)
        rng = np.random.default_rng(10)
        features = nc.DiffArray(rng.standard_normal((4, cfg.embed_dim)))
        _, idx = select_queries(features, params, cfg)
        scores = (features.data @ params.score.w.data + params.score.b.data).ravel()
        oracle = np.argsort(-scores, kind="stable")[:2]
        assert idx.tolist() == oracle.tolist()
        assert scores[idx].min() >= np.delete(scores, idx).max()

    def test_too_many_queries_rejected(self):
        cfg = tiny_cfg(num_queries=3)
        params = make_params(cfg)
        with pytest.raises(nc.ConfigError):
            select_queries(nc.DiffArray(np.zeros((2, cfg.embed_dim))), params, cfg)


class TestGradients:
    def test_featurizer_pipeline_finite_differences(self):
        cfg = tiny_cfg()
        params = make_params(cfg, seed=11)
        rng = np.random.default_rng(12)
        image = rng.random((16, 16, 3))
        weights = rng.standard_normal((cfg.num_queries, cfg.embed_dim))

        def build(patch_w, patch_b):
            params.patch.w = patch_w
            params.patch.b = patch_b
            fm = patch_embed(image, params, cfg)
            q, _ = select_queries(encode(fm, params, cfg), params, cfg)
            return nc.array_sum(q * weights)

        fd_check_directional(
            build,
            [params.patch.w.data.copy(), params.patch.b.data.copy()],
            rng,
            label="featurizer",
        )
