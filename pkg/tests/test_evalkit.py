import numpy as np
import pytest
import torch

from mage.evalkit import (FeatureSet, ProbeConfig, few_shot_probe, fine_tune, linear_probe,
                          pooled_features_from_inputs, sample_per_class, token_marginal_tv)
from mage.model import MageConfig, MageModel
from mage.numerics import RngStream

FAST = ProbeConfig(epochs=20, batch_size=64, warmup_epochs=2)


def one_hot_set(n, classes=10):
    labels = torch.arange(n) % classes
    return FeatureSet(torch.eye(classes)[labels], labels)


def random_set(n, seed, dim=32, classes=10):
    g = RngStream(seed).torch()
    return FeatureSet(torch.randn(n, dim, generator=g), torch.arange(n) % classes)


class TestLinearProbe:
    def test_one_hot_features_are_separable(self):
        r = linear_probe(one_hot_set(200), one_hot_set(100), FAST)
        assert r.accuracy == 1.0

    def test_random_features_are_chance(self):
        accs = [linear_probe(random_set(1000, s), random_set(1000, s + 100), FAST, RngStream(s)).accuracy
                for s in range(3)]
        assert abs(np.mean(accs) - 0.1) < 0.03

    def test_train_accuracy_at_least_test(self):
        r = linear_probe(random_set(300, 0), random_set(300, 1), FAST)
        assert r.train_accuracy >= r.accuracy

    def test_history_has_one_row_per_epoch(self):
        r = linear_probe(one_hot_set(50), one_hot_set(50), FAST)
        assert [h[0] for h in r.history] == list(range(FAST.epochs))

    def test_deterministic(self):
        a = linear_probe(random_set(100, 0), random_set(100, 1), FAST, RngStream(3))
        b = linear_probe(random_set(100, 0), random_set(100, 1), FAST, RngStream(3))
        assert a.history == b.history

    def test_missing_class_rejected(self):
        train = FeatureSet(torch.randn(20, 4), torch.arange(20) % 2)
        test = FeatureSet(torch.randn(6, 4), torch.arange(6) % 3)
        with pytest.raises(ValueError):
            linear_probe(train, test, FAST)

    def test_single_class_rejected(self):
        s = FeatureSet(torch.randn(5, 4), torch.zeros(5, dtype=torch.long))
        with pytest.raises(ValueError):
            linear_probe(s, s, FAST)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            linear_probe(random_set(20, 0, dim=4), random_set(20, 0, dim=5), FAST)

    def test_invalid_samples_per_class(self):
        with pytest.raises(ValueError):
            ProbeConfig(samples_per_class=0)


class TestFewShot:
    def test_subsample_size(self):
        idx = sample_per_class(torch.arange(500) % 10, 5, RngStream(0))
        assert idx.size == 50
        assert np.bincount((torch.arange(500) % 10).numpy()[idx]).tolist() == [5] * 10

    def test_fixed_seed_fixed_subsample(self):
        labels = torch.arange(500) % 10
        assert np.array_equal(sample_per_class(labels, 7, RngStream(4)), sample_per_class(labels, 7, RngStream(4)))
        assert not np.array_equal(sample_per_class(labels, 7, RngStream(4)), sample_per_class(labels, 7, RngStream(5)))

    def test_insufficient_samples(self):
        with pytest.raises(ValueError):
            sample_per_class(torch.arange(30) % 10, 4, RngStream(0))

    def test_runs_on_one_hot(self):
        assert few_shot_probe(one_hot_set(200), one_hot_set(100), 5, FAST).accuracy == 1.0


class TestTotalVariation:
    def test_hand_example(self):
        assert token_marginal_tv(torch.tensor([0, 0, 1]), torch.tensor([0, 1, 1]), 2) == pytest.approx(1 / 3)

    def test_identical_and_disjoint(self):
        a = torch.randint(0, 8, (50, 4))
        assert token_marginal_tv(a, a) == 0.0
        assert token_marginal_tv(torch.zeros(5), torch.ones(7)) == 1.0

    def test_symmetric_and_triangle(self):
        g = RngStream(0).torch()
        a, b, c = (torch.randint(0, 6, (40,), generator=g) for _ in range(3))
        ab, bc, ac = token_marginal_tv(a, b, 6), token_marginal_tv(b, c, 6), token_marginal_tv(a, c, 6)
        assert ab == token_marginal_tv(b, a, 6)
        assert ac <= ab + bc + 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            token_marginal_tv(torch.tensor([]), torch.tensor([1]))


@pytest.fixture(scope="module")
def tiny():
    cfg = MageConfig(vocab=8, seq_len=16, width=16, dec_width=16, enc_depth=2, dec_depth=1, heads=2,
                     proj_hidden=8, proj_dim=4)
    model = MageModel(cfg, RngStream(0))
    g = RngStream(1).torch()
    labels = torch.arange(60) % 3
    # class c favours tokens {2c, 2c+1}
    toks = torch.randint(0, 2, (60, 16), generator=g) + 2 * labels[:, None]
    return model, toks, labels


class TestFeatures:
    def test_shape_and_determinism(self, tiny):
        model, toks, labels = tiny
        a = pooled_features_from_inputs(toks, labels, model)
        b = pooled_features_from_inputs(toks, labels, model)
        assert a.features.shape == (60, 16) and torch.equal(a.features, b.features)

    def test_layer_variant(self, tiny):
        model, toks, labels = tiny
        f0 = pooled_features_from_inputs(toks, labels, model, layer=0).features
        f1 = pooled_features_from_inputs(toks, labels, model, layer=1).features
        assert f0.shape == f1.shape == (60, 16) and not torch.equal(f0, f1)

    def test_leaves_training_flag(self, tiny):
        model, toks, labels = tiny
        model.train()
        pooled_features_from_inputs(toks, labels, model)
        assert model.training
        model.eval()


class TestFineTune:
    def test_frozen_reduces_to_linear_probe(self, tiny):
        model, toks, labels = tiny
        cfg = ProbeConfig(epochs=5, batch_size=16, warmup_epochs=1)
        a = fine_tune(toks, labels, toks, labels, model, cfg, RngStream(2))
        b = linear_probe(pooled_features_from_inputs(toks, labels, model),
                         pooled_features_from_inputs(toks, labels, model), cfg, RngStream(2))
        assert a.history == b.history

    def test_finetune_learns_and_leaves_model_untouched(self, tiny):
        model, toks, labels = tiny
        before = {k: v.clone() for k, v in model.state_dict().items()}
        cfg = ProbeConfig(epochs=15, batch_size=16, warmup_epochs=1, freeze_encoder=False, ft_lr=3e-3)
        r = fine_tune(toks, labels, toks, labels, model, cfg, RngStream(2))
        assert r.train_accuracy > 0.9
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
