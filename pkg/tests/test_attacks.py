import numpy as np
import pytest

import config
from schema import AggregatorConfig, AttackConfig
from simulator.aggregators import build_aggregator
from simulator.attacks import AttackContext, UnknownAttackError, alie_z, craft


@pytest.fixture
def honest(rng):
    return rng.normal(loc=2.0, size=(8, 5))


def ctx(b=2, **kwargs):
    return AttackContext(num_byzantine=b, **kwargs)


@pytest.mark.parametrize("kind", config.LABEL_FREE_ATTACKS)
def test_shape(kind, honest):
    out = craft(AttackConfig(kind=kind), honest, ctx(3))
    assert out.shape == (3, 5)
    assert np.all(np.isfinite(out))


def test_no_byzantine_nodes(honest):
    assert craft(AttackConfig(kind="alie"), honest, ctx(0)).shape == (0, 5)


def test_sign_flip_and_bit_flip(honest):
    mean = honest.mean(axis=0)
    assert np.allclose(craft(AttackConfig(kind="sign_flip"), honest, ctx()), -mean)
    assert np.allclose(craft(AttackConfig(kind="sign_flip", sign_flip_scale=3.0), honest, ctx()), -3.0 * mean)
    assert np.allclose(craft(AttackConfig(kind="bit_flip"), honest, ctx()), -mean)


def test_isolation_cancels_the_sum(honest):
    byz = craft(AttackConfig(kind="isolation"), honest, ctx(2))
    assert np.allclose(honest.sum(axis=0) + byz.sum(axis=0), 0.0)


def test_isolation_zeroes_the_mean(honest):
    mean_rule = build_aggregator(AggregatorConfig(rule="mean"), 8)
    byz = craft(AttackConfig(kind="isolation"), honest, ctx(2))
    assert np.allclose(mean_rule(np.vstack([honest, byz]), 8), 0.0, atol=1e-12)


def test_simple_attacks(honest):
    assert np.array_equal(craft(AttackConfig(kind="zero_value"), honest, ctx()), np.zeros((2, 5)))
    assert np.array_equal(craft(AttackConfig(kind="sample_duplicate"), honest, ctx()), np.tile(honest[0], (2, 1)))
    assert np.allclose(craft(AttackConfig(kind="ipm"), honest, ctx()), -0.1 * honest.mean(axis=0))
    assert np.array_equal(craft(AttackConfig(kind="none"), honest, ctx(3)), honest[:3])


def test_alie_quantile():
    # n = 10, b = 2: s = 4, (n - b - s) / (n - b) = 1/2
    assert alie_z(10, 2) == pytest.approx(0.0, abs=1e-12)
    assert alie_z(50, 10) > 0


def test_alie_uses_honest_spread(honest):
    out = craft(AttackConfig(kind="alie", alie_z=1.5), honest, ctx())
    assert np.allclose(out, honest.mean(axis=0) + 1.5 * honest.std(axis=0))


def test_gaussian_is_keyed_by_round_and_stream(honest):
    cfg = AttackConfig(kind="gaussian")
    a = craft(cfg, honest, ctx(round_index=3, seed=1))
    assert np.array_equal(a, craft(cfg, honest, ctx(round_index=3, seed=1)))
    assert not np.array_equal(a, craft(cfg, honest, ctx(round_index=4, seed=1)))
    assert not np.array_equal(a, craft(cfg, honest, ctx(round_index=3, seed=1, stream="s")))


def test_label_flip_prefers_poisoned_messages(honest):
    poisoned = np.arange(10.0).reshape(2, 5)
    out = craft(AttackConfig(kind="label_flip"), honest, ctx(poisoned=poisoned))
    assert np.array_equal(out, poisoned)


def test_label_flip_without_labels_is_rejected(honest):
    with pytest.raises(ValueError, match="label"):
        craft(AttackConfig(kind="label_flip"), honest, ctx())
    assert craft(AttackConfig(kind="label_flip"), honest, ctx(0)).shape == (0, 5)


def test_unknown_attack(honest):
    with pytest.raises(UnknownAttackError):
        craft(AttackConfig.model_construct(kind="bogus"), honest, ctx())


def test_needs_honest_messages():
    with pytest.raises(ValueError):
        craft(AttackConfig(kind="sign_flip"), np.empty((0, 3)), ctx())
