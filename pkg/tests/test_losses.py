import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dice_loss_loop, lsgan_d_loop, lsgan_g_loop
from spleenseg.losses import (
    LossConfig,
    batch_dice_loss,
    combined_generator_loss,
    gan_gate,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
)

EPS = 1e-7


def test_dice_perfect_match():
    T = np.zeros((2, 10))
    T[0, :3] = 1
    T[1, 7] = 1
    assert batch_dice_loss(T.copy(), T, EPS) == -1.0


def test_dice_all_empty():
    z = np.zeros((3, 5))
    assert batch_dice_loss(z, z, EPS) == -1.0


def test_dice_disjoint_single_voxels():
    P = np.zeros((1, 4))
    T = np.zeros((1, 4))
    P[0, 0] = 1
    T[0, 2] = 1
    assert batch_dice_loss(P, T, EPS) == pytest.approx(-(0 + 1e-7) / (2 + 1e-7), rel=1e-12)
    assert batch_dice_loss(P, T, EPS) == pytest.approx(-5.0e-8, rel=1e-6)


def test_dice_matches_loop_oracle():
    rng = np.random.default_rng(0)
    P = rng.uniform(0, 1, (3, 16))
    T = rng.integers(0, 2, (3, 16)).astype(float)
    assert batch_dice_loss(P, T, EPS) == pytest.approx(dice_loss_loop(P.tolist(), T.tolist(), EPS), rel=1e-12)


def test_dice_torch_matches_numpy():
    rng = np.random.default_rng(1)
    P = rng.uniform(0, 1, (2, 9))
    T = rng.integers(0, 2, (2, 9)).astype(float)
    got = batch_dice_loss(torch.tensor(P), torch.tensor(T), EPS)
    assert float(got) == pytest.approx(batch_dice_loss(P, T, EPS), rel=1e-14)


def test_dice_gradient_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-5
    worst = 0.0
    for _ in range(5):
        P = rng.uniform(0.05, 0.95, (2, 9))
        T = rng.integers(0, 2, (2, 9)).astype(float)
        p = torch.tensor(P, requires_grad=True)
        batch_dice_loss(p, torch.tensor(T), EPS).backward()
        analytic = p.grad.numpy()
        for idx in np.ndindex(P.shape):
            up, dn = P.copy(), P.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (batch_dice_loss(up, T, EPS) - batch_dice_loss(dn, T, EPS)) / (2 * h)
            worst = max(worst, abs(fd - analytic[idx]) / max(abs(fd), abs(analytic[idx])))
    assert worst < 1e-5


def test_dice_errors():
    with pytest.raises(ValueError):
        batch_dice_loss(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        batch_dice_loss(np.full((1, 2), 1.5), np.zeros((1, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_dice_range_and_permutation(B, N, seed):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 1, (B, N))
    T = rng.integers(0, 2, (B, N)).astype(float)
    loss = batch_dice_loss(P, T, EPS)
    assert -1.0 <= loss < 0.0
    perm = rng.permutation(B * N)
    shuffled = batch_dice_loss(P.ravel()[perm].reshape(B, N), T.ravel()[perm].reshape(B, N), EPS)
    # a global ratio of sums; float summation order can move the last bit
    assert shuffled == pytest.approx(loss, rel=1e-14)


def test_dice_minus_one_only_for_exact_match():
    T = np.zeros((2, 6))
    T[0, 1] = 1
    P = T.copy()
    P[1, 3] = 0.2
    assert batch_dice_loss(P, T, EPS) > -1.0


def test_batch_level_stable_with_empty_slice():
    # eleven well-predicted slices plus one spleen-free slice with spurious output
    rng = np.random.default_rng(3)
    T = (rng.uniform(size=(11, 64)) < 0.3).astype(float)
    P = np.clip(T * 0.95 + 0.02, 0, 1)
    base = batch_dice_loss(P, T, EPS)
    T2 = np.vstack([T, np.zeros((1, 64))])
    P2 = np.vstack([P, np.full((1, 64), 0.3)])
    with_empty = batch_dice_loss(P2, T2, EPS)
    assert np.isfinite(with_empty)
    assert abs(with_empty - base) < 0.5
    # naive per-slice averaging: the empty slice contributes ~0 regardless of the rest
    per_slice = np.mean([batch_dice_loss(P2[i : i + 1], T2[i : i + 1], EPS) for i in range(12)])
    empty_slice = batch_dice_loss(P2[-1:], T2[-1:], EPS)
    assert abs(empty_slice) < 1e-6
    assert abs(per_slice - base) > abs(with_empty - base)


def test_lsgan_closed_forms():
    ones, zeros, half = np.ones((2, 6, 6)), np.zeros((2, 6, 6)), np.full((2, 6, 6), 0.5)
    assert lsgan_discriminator_loss(ones, zeros, 0, 1) == 0.0
    assert lsgan_discriminator_loss(half, half, 0, 1) == 0.25
    assert lsgan_generator_loss(ones, 1) == 0.0
    assert lsgan_generator_loss(zeros, 1) == 0.5


def test_lsgan_oracles():
    rng = np.random.default_rng(4)
    for _ in range(20):
        real = rng.uniform(0, 1, (rng.integers(1, 4), 5, 5))
        fake = rng.uniform(0, 1, (rng.integers(1, 4), 5, 5))
        assert lsgan_discriminator_loss(real, fake, 0, 1) == pytest.approx(lsgan_d_loop(real, fake, 0, 1), rel=1e-12)
        assert lsgan_generator_loss(fake, 1) == pytest.approx(lsgan_g_loop(fake, 1), rel=1e-12)


def test_lsgan_empty():
    with pytest.raises(ValueError):
        lsgan_generator_loss(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        lsgan_discriminator_loss(torch.zeros(0), torch.zeros(3))


def test_gate():
    assert gan_gate(100, 100) == 1
    assert gan_gate(99, 100) == 0
    assert sum(gan_gate(b, 100) for b in range(1, 1001)) == 10
    with pytest.raises(ValueError):
        gan_gate(0, 100)


def test_combined_loss():
    cfg = LossConfig()
    assert combined_generator_loss(-0.9, 0.5, cfg, 100) == pytest.approx(-0.895, abs=1e-15)
    assert combined_generator_loss(-0.9, 0.5, cfg, 50) == -0.9
    off = LossConfig(lam=0.0)
    for b in (1, 50, 100, 200, 1000):
        assert combined_generator_loss(-0.7, 0.3, off, b) == -0.7


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.epsilon, cfg.lam, cfg.k, cfg.a, cfg.b, cfg.c) == (1e-7, 0.01, 100, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
    with pytest.raises(ValueError):
        LossConfig(k=0)
