import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structgraph.data import SampleRecord, SynthConfig, generate_synthetic_dataset, load_manifest
from structgraph.graph import NodeLabels
from structgraph.numeric import Rng
from structgraph.sgnn import Model, ModelConfig, ModelOutputs
from structgraph.training import (
    AugmentConfig,
    AugmentParams,
    Sample,
    TrainConfig,
    apply_augment,
    augment,
    fit,
    hflip,
    joint_loss,
    rotate,
    sample_augment_params,
    total_loss,
    train_epoch,
)

SMALL = ModelConfig(image_size=32, blocks=(4, 8), hidden=8)


def outputs_from_logits(graph_logit, node_logits, explain_logits):
    sig = lambda z: 1 / (1 + np.exp(-z))
    n = len(node_logits)
    return ModelOutputs(
        node_probs=sig(node_logits), importance=sig(explain_logits), graph_logit=graph_logit,
        graph_prob=float(sig(graph_logit)), node_embeddings=np.zeros((n, 1)),
        node_logits=np.asarray(node_logits, float), explain_logits=np.asarray(explain_logits, float), graph=None,
    )


class TestLoss:
    def test_perfect(self):
        labels = np.array([1.0, 0.0, 1.0])
        z = np.where(labels > 0, 50.0, -50.0)
        loss, _ = total_loss(outputs_from_logits(50.0, z, z), 1, labels)
        assert loss < 1e-5

    def test_zero_weights(self):
        out = outputs_from_logits(0.3, np.array([0.2, -1.0]), np.array([1.0, 2.0]))
        loss, parts = total_loss(out, 1, np.array([1.0, 0.0]), 0.0, 0.0)
        assert loss == parts["graph"] == pytest.approx(math.log1p(math.exp(-0.3)), abs=1e-15)

    @pytest.mark.parametrize("ln,le", [(1.0, 1.0), (0.5, 2.0), (0.0, 3.0)])
    def test_uniform_half(self, ln, le):
        out = outputs_from_logits(0.0, np.zeros(4), np.zeros(4))
        loss, _ = total_loss(out, 0, NodeLabels(np.array([1.0, 0, 0, 1]), np.zeros(4)), ln, le)
        assert loss == pytest.approx((1 + ln + le) * math.log(2), abs=1e-12)

    def test_components(self):
        out = outputs_from_logits(-0.7, np.array([0.2, -1.0, 3.0]), np.array([1.0, 2.0, -0.5]))
        b = joint_loss(out, 1, np.array([1.0, 0.0, 0.0]), 0.3, 2.5)
        assert min(b.graph, b.node, b.explain) >= 0
        assert b.total == b.graph + 0.3 * b.node + 2.5 * b.explain

    def test_no_mask(self):
        out = outputs_from_logits(0.0, np.zeros(4), np.zeros(4))
        b = joint_loss(out, 1, None)
        assert b.node == b.explain == 0.0 and b.grad_node_logits is None

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            total_loss(outputs_from_logits(0.0, np.zeros(4), np.zeros(4)), 1, np.zeros(3))


class TestAugment:
    def test_disabled(self, rng):
        img = rng.uniform_array(64).reshape(1, 8, 8)
        out, m = augment(img, None, AugmentConfig(enabled=False), Rng(0))
        assert out is img and m is None

    def test_null_params_identity(self, rng):
        img = rng.uniform_array(256).reshape(1, 16, 16)
        mask = (rng.uniform_array(256) < 0.3).reshape(16, 16).astype(float)
        out, m = apply_augment(img, mask, AugmentParams())
        assert np.max(np.abs(out - img)) <= 1e-12
        assert np.array_equal(m, mask)
        assert np.max(np.abs(rotate(img, 0.0) - img)) <= 1e-12

    def test_double_flip(self, rng):
        img = rng.uniform_array(48).reshape(1, 6, 8)
        assert np.array_equal(hflip(hflip(img)), img)
        out, _ = apply_augment(img, None, AugmentParams(flip=True))
        assert np.array_equal(out[0, :, 0], img[0, :, -1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_jitter_stays_in_range(self, seed):
        r = Rng(seed)
        img = r.uniform_array(256).reshape(1, 16, 16)
        out, _ = augment(img, None, AugmentConfig(), r)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_params_within_config(self):
        r = Rng(1)
        cfg = AugmentConfig()
        for _ in range(200):
            p = sample_augment_params(cfg, r)
            assert -15 <= p.angle_deg <= 15 and 0.9 <= p.scale <= 1.1 and -0.05 <= p.shift <= 0.05

    def test_right_angle_rotation(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        assert np.allclose(rotate(img, 90.0), np.rot90(img, k=-1, axes=(1, 2)), atol=1e-12)
        assert np.array_equal(rotate(img, 90.0, nearest=True), np.rot90(img, k=-1, axes=(1, 2)))

    def test_mask_follows_image_geometry(self):
        img = np.zeros((1, 16, 16))
        img[0, 3:6, 10:13] = 1.0
        mask = img[0].copy()
        out, m = apply_augment(img, mask, AugmentParams(flip=True, angle_deg=10.0, scale=1.05, shift=0.02))
        assert set(np.unique(m)) <= {0.0, 1.0}
        # the mask still marks the (moved) bright region
        assert out[0][m > 0].mean() > out[0][m == 0].mean() + 0.5

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AugmentConfig(rotate_deg=-1)
        with pytest.raises(ValueError):
            AugmentConfig(jitter_scale=(0.0, 1.0))


def blob_sample(size=32, bright=True):
    img = np.full((1, size, size), 0.2)
    mask = np.zeros((size, size))
    if bright:
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (((yy - 10) ** 2 + (xx - 20) ** 2) <= 16).astype(float)
        img[0] += 0.6 * mask
    return Sample(img, mask, int(bright))


def snapshot(model):
    return [p.value.copy() for p in model.parameters()]


class TestTrainEpoch:
    def test_lr_zero(self):
        m = Model(SMALL, Rng(0))
        before = snapshot(m)
        cfg = TrainConfig(lr=0.0, batch_size=2)
        train_epoch(m, [blob_sample(), blob_sample(bright=False), blob_sample()], cfg, Rng(1), Rng(2))
        assert all(np.array_equal(a, p.value) for a, p in zip(before, m.parameters()))

    def test_deterministic(self):
        samples = [blob_sample(), blob_sample(bright=False)] * 3
        runs = []
        for _ in range(2):
            m = Model(SMALL, Rng(0))
            stats = train_epoch(m, samples, TrainConfig(lr=1e-3, batch_size=4), Rng(1), Rng(2))
            runs.append((stats, snapshot(m)))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))

    def test_empty(self):
        with pytest.raises(ValueError):
            train_epoch(Model(SMALL, Rng(0)), [], TrainConfig(), Rng(1), Rng(2))

    def test_overfit_single_sample(self):
        m = Model(SMALL, Rng(0))
        cfg = TrainConfig(lr=1e-3, augment=AugmentConfig(enabled=False))
        for _ in range(200):
            stats = train_epoch(m, [blob_sample()], cfg, Rng(1), Rng(2))
        assert stats["graph"] < 0.1

    def test_monotone_descent_frozen_backbone(self):
        m = Model(SMALL, Rng(0))
        bb = [p.value.copy() for p in m.backbone.parameters()]
        cfg = TrainConfig(lr=1e-3, batch_size=8, freeze_backbone=True, augment=AugmentConfig(enabled=False))
        batch = [blob_sample(), blob_sample(bright=False)]
        losses = [train_epoch(m, batch, cfg, Rng(1), Rng(2))["total"] for _ in range(10)]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert all(np.array_equal(a, p.value) for a, p in zip(bb, m.backbone.parameters()))


@pytest.fixture(scope="module")
def tiny_records(tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    return load_manifest(generate_synthetic_dataset(SynthConfig(n_per_class=10, image_size=32, seed=0), out))


class TestFit:
    def test_zero_epochs(self, tiny_records):
        m, hist = fit(tiny_records, TrainConfig(epochs=0, seed=3), SMALL)
        ref = Model(SMALL, Rng(3).child(1))
        assert hist == []
        assert all(np.array_equal(a.value, b.value) for a, b in zip(m.parameters(), ref.parameters()))

    def test_history_and_determinism(self, tiny_records):
        seen = []
        cfg = TrainConfig(epochs=2, lr=1e-3)
        m1, h1 = fit(tiny_records, cfg, SMALL, on_epoch=seen.append)
        m2, h2 = fit(tiny_records, cfg, SMALL)
        assert [r.epoch for r in h1] == [1, 2] and seen == h1
        assert all(r.val_auc is not None for r in h1)
        assert h1 == h2
        assert all(np.array_equal(a.value, b.value) for a, b in zip(m1.parameters(), m2.parameters()))

    def test_missing_file(self, tmp_path):
        recs = [SampleRecord(str(tmp_path / "absent.pgm"), 1, "train")]
        with pytest.raises(FileNotFoundError, match="absent.pgm"):
            fit(recs, TrainConfig(epochs=1), SMALL)

    def test_invalid_config(self):
        for kw in ({"batch_size": 0}, {"lr": -1.0}, {"lambda_node": -0.1}, {"epochs": -1}):
            with pytest.raises(ValueError):
                TrainConfig(**kw)
