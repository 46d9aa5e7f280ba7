import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsa.autoencoder import (IN_BATCH, SINGLE_NEGATIVE, ContrastiveConfig, ModalityAutoencoder, ae_loss, aggregate,
                              contrastive_loss, draw_negatives, encode_all, reconstruction_loss)
from mmsa.tensor import ContractError, DomainError, ShapeError, Tensor, finite_diff_check

ident = lambda c: c


def test_contrastive_orthogonal_negatives():
    c = np.eye(2)
    assert contrastive_loss([c, c.copy()]).item() == pytest.approx(-2 / 3 * np.log(np.e / (np.e + 2)), abs=1e-12)
    assert contrastive_loss([c, c.copy()]).item() == pytest.approx(0.36763, abs=1e-5)


def test_contrastive_all_identical():
    c = np.ones((3, 4))
    assert contrastive_loss([c, c, c]).item() == pytest.approx(np.log(3), abs=1e-12)  # 1/6 of six ordered pairs
    assert contrastive_loss([c[:, :2], c[:, :2]]).item() == pytest.approx(0.73241, abs=1e-5)


def test_contrastive_monotone_in_positive_similarity(rng):
    neg = np.array([0.0, 0.0, 1.0])
    prev = np.inf
    for t in np.linspace(0, 1.5, 7):
        a = np.array([[1.0, 0.0, 0.0], neg])
        b = np.array([[np.cos(1.5 - t), np.sin(1.5 - t), 0.0], neg])
        val = contrastive_loss([a, b]).item()
        assert val < prev
        prev = val


def test_contrastive_errors():
    with pytest.raises(ContractError):
        contrastive_loss([np.ones((1, 3)), np.ones((1, 3))])
    with pytest.raises(ContractError):
        contrastive_loss([np.ones((4, 3))])
    with pytest.raises(ValueError):
        ContrastiveConfig("hard-negative")


def test_single_negative_mode(rng):
    neg = draw_negatives(6, np.random.default_rng(0))
    assert np.all(neg != np.arange(6)) and np.all((0 <= neg) & (neg < 6))
    cs = [rng.normal(size=(6, 5)) for _ in range(3)]
    cfg = ContrastiveConfig(SINGLE_NEGATIVE)
    a = contrastive_loss(cs, cfg, np.random.default_rng(1)).item()
    assert a == contrastive_loss(cs, cfg, np.random.default_rng(1)).item()
    # with b = 2 the single drawn negative is the whole batch
    two = [c[:2] for c in cs]
    assert contrastive_loss(two, cfg).item() == pytest.approx(contrastive_loss(two, ContrastiveConfig(IN_BATCH)).item())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_contrastive_scale_invariant(seed, k):
    r = np.random.default_rng(seed)
    cs = [r.normal(size=(4, 3)) for _ in range(3)]
    assert contrastive_loss(cs).item() == pytest.approx(contrastive_loss([c * k for c in cs]).item(), rel=1e-9)


def test_contrastive_gradients(rng):
    cs = [Tensor(rng.normal(size=(4, 5)), requires_grad=True) for _ in range(3)]
    assert finite_diff_check(lambda ps: contrastive_loss(ps), cs).max_rel_error < 1e-5


def test_reconstruction_hand_cases():
    xs = [np.array([1.0]), np.array([0.0])]
    assert reconstruction_loss(xs, xs, [ident, ident], 0.5).item() == pytest.approx(0.5)
    same = [np.array([2.0, 3.0])] * 3
    assert reconstruction_loss(same, same, [ident] * 3, 0.3).item() == 0.0
    # tau = 1: only intra terms, each counted M - 1 times
    shift = lambda c: c + 1.0
    xs3 = [np.zeros(2), np.ones(2), np.full(2, 2.0)]
    want = 2 * np.sqrt(2.0)
    assert reconstruction_loss(xs3, xs3, [shift] * 3, 1.0).item() == pytest.approx(want)
    with pytest.raises(DomainError):
        reconstruction_loss(xs, xs, [ident, ident], 1.5)


def test_reconstruction_gradients(rng):
    aes = [ModalityAutoencoder(rng, 4, 3, 5) for _ in range(3)]
    xs = [Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(3)]
    params = xs + [p for ae in aes for p in ae.parameters()]

    def f(_):
        return reconstruction_loss(xs, encode_all(xs, aes), [ae.decode for ae in aes], 0.5)
    assert finite_diff_check(f, params).max_rel_error < 1e-4


def test_ae_loss_and_aggregate():
    assert ae_loss(1.0, 2.0).item() == pytest.approx(1.4)
    assert ae_loss(1.0, 2.0, 1.0).item() == 1.0 and ae_loss(1.0, 2.0, 0.0).item() == 2.0
    with pytest.raises(DomainError):
        ae_loss(1.0, 2.0, -0.1)
    assert np.array_equal(aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])]).data, [0.5, 0.5])
    v = np.array([3.0, -1.0])
    assert np.array_equal(aggregate([v, v, v]).data, v) and np.array_equal(aggregate([v]).data, v)
    with pytest.raises(ContractError):
        aggregate([])


def test_encode_all(rng):
    aes = [ModalityAutoencoder(rng, 4, 3, 5)]
    x = rng.normal(size=4)
    (c,) = encode_all([x], aes)
    assert c.shape == (3,) and np.array_equal(c.data, encode_all([x], aes)[0].data)
    with pytest.raises(ShapeError):
        encode_all([rng.normal(size=5)], aes)
    with pytest.raises(ShapeError):
        encode_all([x, x], aes)
