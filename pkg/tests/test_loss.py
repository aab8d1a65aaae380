import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siammcvae import gradcheck
from siammcvae import tensor as T
from siammcvae.loss import DEFAULT_BETA, kl_loss, kl_minimum, recon_loss, total_loss
from siammcvae.vision import DegenerateMaskError, MaskSet, PatchGrid, compose_output, sample_mask

GRID = PatchGrid(8, 8, 3, 4)  # N = 4, 48 values per patch


def test_recon_zero_when_equal():
    R = np.random.default_rng(0).random((4, 48))
    assert recon_loss(R, R, MaskSet((1,), 4), GRID).item() == 0.0


def test_recon_single_patch_constant_difference():
    R = np.random.default_rng(1).random((4, 48))
    G = R.copy()
    G[2] += 2.0
    assert recon_loss(G, R, MaskSet((2,), 4), GRID).item() == pytest.approx(4.0, abs=1e-12)


def test_recon_equals_masked_entry_mse():
    rng = np.random.default_rng(2)
    m = MaskSet((0, 3), 4)
    R = rng.random((4, 48))
    O = rng.random((5, 48))
    G = compose_output(O, R[list(m.visible)], m).data
    brute = 0.0
    count = 0
    for j in m.masked:
        for v in range(48):
            brute += (G[j, v] - R[j, v]) ** 2
            count += 1
    assert recon_loss(G, R, m, GRID).item() == pytest.approx(brute / count, rel=1e-13)


def test_recon_ignores_visible_rows_corrupted_before_composition():
    rng = np.random.default_rng(3)
    m = MaskSet((1, 2), 4)
    R = rng.random((4, 48))
    O = rng.random((5, 48))
    vis = list(m.visible)
    base = recon_loss(compose_output(O, R[vis], m), R, m, GRID).item()
    Rc = R.copy()
    Rc[vis] = rng.normal(10, 5, size=(len(vis), 48))
    corrupted = recon_loss(compose_output(O, Rc[vis], m), Rc, m, GRID).item()
    assert corrupted == base


def test_recon_degenerate_mask():
    R = np.zeros((4, 48))
    with pytest.raises(DegenerateMaskError):
        recon_loss(R, R, MaskSet((), 4), GRID)


def test_kl_identities():
    shape = (5, 6)
    assert kl_loss(np.zeros(shape), np.ones(shape)).item() == 0.0
    assert kl_loss(np.ones(shape), np.ones(shape)).item() == pytest.approx(0.5, abs=1e-15)
    at_min = kl_loss(np.zeros(shape), np.full(shape, 1 / math.sqrt(2))).item()
    assert at_min == pytest.approx((math.log(2) - 1) / 4, abs=1e-15)
    assert kl_minimum() == pytest.approx(-0.0767132048600, abs=1e-12)


def test_kl_minimum_against_perturbations():
    rng = np.random.default_rng(4)
    shape = (3, 4)
    s_star = 1 / math.sqrt(2)
    for _ in range(1000):
        M = rng.normal(0, 0.3, shape)
        S = np.clip(s_star + rng.normal(0, 0.3, shape), 1e-3, None)
        assert kl_loss(M, S).item() >= kl_minimum() - 1e-15


def test_kl_standard_form():
    shape = (2, 3)
    assert kl_loss(np.zeros(shape), np.ones(shape), form="standard").item() == 0.0
    # standard Gaussian KL per entry: (m^2 + s^2 - 2 log s - 1) / 2
    M = np.full(shape, 0.4)
    S = np.full(shape, 1.3)
    expect = (0.16 + 1.69 - 2 * math.log(1.3) - 1) / 2
    assert kl_loss(M, S, form="standard").item() == pytest.approx(expect, rel=1e-13)


def test_kl_rejects_non_positive_scale():
    with pytest.raises(ValueError):
        kl_loss(np.zeros(3), np.array([1.0, 0.0, 1.0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(4, 5))
    S = rng.uniform(0.2, 2.0, size=(4, 5))
    perm = rng.permutation(20)
    a = kl_loss(M, S).item()
    b = kl_loss(M.ravel()[perm].reshape(4, 5), S.ravel()[perm].reshape(4, 5)).item()
    assert a == pytest.approx(b, rel=1e-13)
    assert a >= kl_minimum() - 1e-15


def test_total_combines_terms():
    rng = np.random.default_rng(5)
    m = MaskSet((0, 2), 4)
    G, R = rng.random((4, 48)), rng.random((4, 48))
    M, S = rng.normal(size=(5, 3)), rng.uniform(0.5, 1.5, (5, 3))
    rep = total_loss(G, R, m, GRID, M, S)
    assert rep.beta == DEFAULT_BETA == 0.2
    assert rep.total.item() == rep.recon.item() + 0.2 * rep.kl.item()
    rep0 = total_loss(G, R, m, GRID, M, S, beta=0.0)
    assert rep0.total.item() == rep0.recon.item()
    for beta in (0.1, 0.2, 0.25, 0.5, 1):
        total_loss(G, R, m, GRID, M, S, beta=beta)
    with pytest.raises(ValueError):
        total_loss(G, R, m, GRID, M, S, beta=-1)


def test_loss_gradients():
    rng = np.random.default_rng(6)
    m = sample_mask(0.5, 4, 0)
    R = rng.random((4, 48))
    G = T.Tensor(rng.random((4, 48)), requires_grad=True)
    M = T.Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
    S = T.Tensor(rng.uniform(0.5, 1.5, (5, 3)), requires_grad=True)
    assert gradcheck.check(lambda g: recon_loss(g, R, m, GRID), [G], samples=30) < 1e-5
    assert gradcheck.check(lambda a, b: kl_loss(a, b), [M, S]) < 1e-5
    assert gradcheck.check(lambda g, a, b: total_loss(g, R, m, GRID, a, b).total,
                           [G, M, S], samples=15) < 1e-5


def test_batched_losses_are_item_means():
    rng = np.random.default_rng(7)
    masks = [sample_mask(0.5, 4, s) for s in range(3)]
    G, R = rng.random((3, 4, 48)), rng.random((3, 4, 48))
    batched = recon_loss(G, R, masks, GRID).item()
    single = np.mean([recon_loss(G[i], R[i], masks[i], GRID).item() for i in range(3)])
    assert batched == pytest.approx(single, rel=1e-13)
