"""Contrastive and entity losses, encoder training contracts, feature export."""

import numpy as np
import pytest

from plugrank import nn
from plugrank.data import GenConfig, generate
from plugrank.encoders import (
    EncoderFeatureSource,
    EncoderTrainConfig,
    QMConfig,
    TextEncoder,
    VisionEncoder,
    encoder_version,
    ep_loss,
    export_feature_matrix,
    load_encoders,
    qm_loss,
    save_encoders,
    train_encoders,
)
from plugrank.errors import ConfigError


def embeddings(rows, seed=0, dim=4):
    return nn.Tensor(np.random.default_rng(seed).normal(size=(rows, dim)).astype(np.float32))


class TestQMLoss:
    def test_single_pair_zero(self):
        e = embeddings(1)
        assert abs(qm_loss(e, e, 0.05).item()) <= 1e-6

    def test_identical_embeddings_log_b(self):
        one = np.random.default_rng(1).normal(size=4).astype(np.float32)
        batch = nn.Tensor(np.tile(one, (6, 1)))
        assert abs(qm_loss(batch, batch, 1.0).item() - np.log(6)) <= 1e-6

    def test_two_pair_orthogonal_closed_form(self):
        # cosine matrix [[1, 0], [0, 1]] at tau=1: loss = ln(1 + e^{-1})
        q = nn.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
        expected = np.log(1 + np.exp(-1.0))
        assert qm_loss(q, q, 1.0).item() == pytest.approx(expected, abs=1e-6)

    def test_zero_norm_rejected(self):
        q = nn.Tensor(np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32))
        with pytest.raises(ConfigError, match="zero-norm"):
            qm_loss(q, q, 0.05)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(8, 4)).astype(np.float32)
        y = rng.normal(size=(8, 4)).astype(np.float32)
        base = qm_loss(nn.Tensor(q), nn.Tensor(y), 0.1).item()
        perm = rng.permutation(8)
        permuted = qm_loss(nn.Tensor(q[perm]), nn.Tensor(y[perm]), 0.1).item()
        assert abs(base - permuted) <= 1e-6

    def test_monotone_decreasing_in_positive_similarity(self):
        rng = np.random.default_rng(4)
        q = rng.normal(size=(6, 4)).astype(np.float32)
        y = rng.normal(size=(6, 4)).astype(np.float32)
        base = qm_loss(nn.Tensor(q), nn.Tensor(y), 0.5).item()
        # nudge item 0 toward its query: s_00 rises, everything else fixed
        y2 = y.copy()
        y2[0] = y2[0] / np.linalg.norm(y2[0]) + 0.5 * q[0] / np.linalg.norm(q[0])
        bumped = qm_loss(nn.Tensor(q), nn.Tensor(y2), 0.5).item()
        assert bumped < base

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        q = nn.Tensor(rng.normal(size=(5, 4)).astype(np.float32))
        point = nn.Tensor(rng.normal(size=(5, 4)).astype(np.float32))
        err = nn.grad_check(lambda y: qm_loss(q, nn.reshape(y, (5, 4)), 0.2),
                            nn.reshape(point, (20,)), h=1e-4)
        assert err <= 1e-3

    def test_batch_shape_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            qm_loss(embeddings(3), embeddings(4), 0.05)


class TestEPLoss:
    def test_uniform_logits_log_k(self):
        logits = nn.Tensor(np.zeros((5, 11), dtype=np.float32))
        assert ep_loss(logits, np.arange(5) % 11).item() == pytest.approx(np.log(11), abs=1e-6)

    def test_confident_correct_near_zero(self):
        logits = np.full((3, 4), -30.0, dtype=np.float32)
        logits[np.arange(3), [0, 1, 2]] = 30.0
        assert ep_loss(nn.Tensor(logits), np.array([0, 1, 2])).item() <= 1e-6

    def test_three_class_closed_form(self):
        # logits [2, 0, 0], true class 0: loss = ln(1 + 2 e^{-2})
        logits = nn.Tensor(np.array([[2.0, 0.0, 0.0]], dtype=np.float32))
        expected = np.log(1 + 2 * np.exp(-2.0))
        assert ep_loss(logits, np.array([0])).item() == pytest.approx(expected, abs=1e-6)

    def test_out_of_range_entity_rejected(self):
        with pytest.raises(ConfigError, match="entity id"):
            ep_loss(nn.Tensor(np.zeros((2, 3), dtype=np.float32)), np.array([0, 3]))

    def test_gradient_check(self):
        rng = np.random.default_rng(6)
        point = nn.Tensor(rng.normal(size=(4, 5)).astype(np.float32))
        targets = np.array([0, 2, 4, 1])
        err = nn.grad_check(lambda x: ep_loss(nn.reshape(x, (4, 5)), targets),
                            nn.reshape(point, (20,)), h=1e-4)
        assert err <= 1e-3


@pytest.fixture(scope="module")
def tiny_world():
    cfg = GenConfig(
        n_items=300, n_users=80, n_train=6000, n_test=1200, n_query_pairs=2000,
        n_shops=20, n_brands=15, n_categories=8, n_entities=40,
    )
    return generate(cfg, seed=5)


class TestTrainEncoders:
    def test_zero_epochs_equal_initialization(self, tiny_world):
        cfg = EncoderTrainConfig(qm_epochs=0, ep_epochs=0)
        text_enc, vision_enc, _ = train_encoders(tiny_world, cfg, seed=3)
        fresh_text = TextEncoder(tiny_world.config.vocab_size, cfg.text_dim, seed=3)
        fresh_vision = VisionEncoder(
            tiny_world.config.image_dim, cfg.vision_dim, tiny_world.config.n_entities, seed=3
        )
        for trained, fresh in ((text_enc, fresh_text), (vision_enc, fresh_vision)):
            for p in trained.pset:
                assert np.array_equal(p.data, fresh.pset[p.name].data), p.name
            assert trained.frozen

    def test_training_improves_both_objectives(self, tiny_world):
        cfg = EncoderTrainConfig(qm_epochs=3, ep_epochs=20)
        _, _, history = train_encoders(tiny_world, cfg, seed=0)
        assert history["qm_loss"][-1] < history["qm_loss"][0]
        assert history["ep_loss"][-1] < history["ep_loss"][0]
        # clearly above the 1/40 chance level even at this tiny scale
        assert history["ep_accuracy"][-1] > 0.15
        assert history["qm_retrieval"][-1] > 0.6


class TestExport:
    def test_export_contracts(self, tiny_world):
        cfg = EncoderTrainConfig(qm_epochs=0, ep_epochs=0)
        text_enc, vision_enc, _ = train_encoders(tiny_world, cfg, seed=1)
        matrix, version = export_feature_matrix(tiny_world.catalog, text_enc, vision_enc)
        assert matrix.shape == (len(tiny_world.catalog), cfg.text_dim + cfg.vision_dim)
        again, version2 = export_feature_matrix(tiny_world.catalog, text_enc, vision_enc)
        assert matrix.tobytes() == again.tobytes()
        assert version == version2 and len(version) == 32

    def test_unfrozen_encoders_rejected(self, tiny_world):
        text_enc = TextEncoder(tiny_world.config.vocab_size, 8, seed=0)
        vision_enc = VisionEncoder(tiny_world.config.image_dim, 8, tiny_world.config.n_entities, seed=0)
        with pytest.raises(ConfigError, match="frozen"):
            export_feature_matrix(tiny_world.catalog, text_enc, vision_enc)

    def test_identical_content_identical_features(self, tiny_world):
        cfg = EncoderTrainConfig(qm_epochs=0, ep_epochs=0)
        text_enc, vision_enc, _ = train_encoders(tiny_world, cfg, seed=1)
        cat = tiny_world.catalog
        # clone item 0's content onto item 1
        cat.title_tokens[1] = cat.title_tokens[0]
        cat.title_len[1] = cat.title_len[0]
        cat.image_feature[1] = cat.image_feature[0]
        matrix, _ = export_feature_matrix(cat, text_enc, vision_enc)
        assert np.array_equal(matrix[0], matrix[1])

    def test_version_tracks_weights(self, tiny_world):
        cfg = EncoderTrainConfig(qm_epochs=0, ep_epochs=0)
        text_enc, vision_enc, _ = train_encoders(tiny_world, cfg, seed=1)
        v1 = encoder_version(text_enc, vision_enc)
        text_enc.pset["text/token_embedding"].data[0, 0] += 1.0
        assert encoder_version(text_enc, vision_enc) != v1

    def test_save_load_roundtrip(self, tiny_world, tmp_path):
        cfg = EncoderTrainConfig(qm_epochs=1, ep_epochs=1)
        text_enc, vision_enc, _ = train_encoders(tiny_world, cfg, seed=2)
        save_encoders(tmp_path / "enc.ckpt", text_enc, vision_enc)
        t2, v2 = load_encoders(tmp_path / "enc.ckpt", tiny_world.config, cfg)
        assert encoder_version(t2, v2) == encoder_version(text_enc, vision_enc)

    def test_on_the_fly_source_matches_export(self, tiny_world):
        cfg = EncoderTrainConfig(qm_epochs=0, ep_epochs=0)
        text_enc, vision_enc, _ = train_encoders(tiny_world, cfg, seed=1)
        matrix, _ = export_feature_matrix(tiny_world.catalog, text_enc, vision_enc)
        source = EncoderFeatureSource(tiny_world.catalog, text_enc, vision_enc)
        ids = np.array([0, 5, 17])
        assert np.allclose(source.get_many(ids), matrix[ids], atol=1e-6)
