"""Exit-gate checks. Each test carries an ``acceptance`` marker and its outcome
is listed in the "acceptance criteria" section of the pytest terminal summary.

The two end-to-end checks train full-width networks on a 24-phantom cohort and
take tens of minutes on one CPU core; they are also marked ``slow``.
"""

import hashlib
import itertools
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import (
    close_oracle,
    dice_loss_loop,
    dice_oracle,
    dilate_oracle,
    erode_oracle,
    fuse_oracle,
    hd_oracle,
    lsgan_d_loop,
    lsgan_g_loop,
    msd_oracle,
    open_oracle,
)
from spleenseg.experiment import METHODS, ExperimentConfig, run_experiment
from spleenseg.fusion import ball, binary_close, binary_open, dilate, erode, fuse_multiview, union_masks
from spleenseg.losses import LossConfig, batch_dice_loss, lsgan_discriminator_loss, lsgan_generator_loss
from spleenseg.metrics import dice_coefficient, hausdorff_distance, mean_surface_distance, wilcoxon_signed_rank
from spleenseg.networks import (
    DEFAULT_STAGE_CHANNELS,
    Discriminator,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    connector_parameter_count,
    count_parameters,
    generator_forward,
    score_map_side,
)
from spleenseg.phantom import PhantomSpec, generate_cohort, generate_phantom
from spleenseg.preprocess import extract_slices, make_training_stream, replicate_channels
from spleenseg.training import TrainConfig, TrainingState, derive_seeds, generator_objective, training_step

REL = 1e-12


def _detail(record, text):
    record("detail", text)
    print(text)


# -- 1 -----------------------------------------------------------------------------

@pytest.mark.acceptance("1 loss oracles")
def test_loss_oracles(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(20240101)
    eps = 1e-7
    worst = 0.0
    n = 0
    for _ in range(150):
        B, N = int(rng.integers(1, 5)), int(rng.integers(1, 65))
        P = rng.uniform(0, 1, (B, N))
        T = (rng.uniform(size=(B, N)) < rng.uniform()).astype(float)
        got = batch_dice_loss(P, T, eps)
        ref = dice_loss_loop(P.tolist(), T.tolist(), eps)
        worst = max(worst, abs(got - ref) / abs(ref))
        real = rng.uniform(0, 1, (B, int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        fake = rng.uniform(0, 1, (B, real.shape[1], real.shape[2]))
        a, b, c = 0.0, 1.0, 1.0
        d_ref = lsgan_d_loop(real, fake, a, b)
        g_ref = lsgan_g_loop(fake, c)
        worst = max(worst, abs(lsgan_discriminator_loss(real, fake, a, b) - d_ref) / abs(d_ref))
        worst = max(worst, abs(lsgan_generator_loss(fake, c) - g_ref) / abs(g_ref))
        n += 1
    assert worst < REL

    T = np.zeros((3, 40))
    T[0, :7] = 1
    T[2, 30:] = 1
    assert batch_dice_loss(T.copy(), T, eps) == -1.0
    z = np.zeros((4, 64))
    assert batch_dice_loss(z, z, eps) == -eps / eps == -1.0
    half = np.full((2, 6, 6), 0.5)
    assert lsgan_discriminator_loss(half, half, 0.0, 1.0) == 0.25
    elapsed = time.perf_counter() - start
    assert elapsed < 10
    _detail(record_property, f"{n} instances, worst rel err {worst:.2e}, {elapsed:.1f}s")


# -- 2 -----------------------------------------------------------------------------

def _gradient_batch(side=32, n=4):
    img, lab = generate_phantom(PhantomSpec(side=side, semi_axis_range=(5.0, 9.0), distractor_axis_range=(1.5, 3.0), seed=3))
    mid = side // 2
    idx = [mid - 4, mid - 2, mid, mid + 2][:n]
    images = np.stack([extract_slices(img.data, "axial")[i] for i in idx])
    masks = np.stack([extract_slices(lab.data, "axial")[i] for i in idx])
    x = torch.from_numpy(replicate_channels(images)).double().permute(0, 3, 1, 2).contiguous()
    t = torch.from_numpy(masks).double()
    return x, t


@pytest.mark.acceptance("2 gradient checks")
def test_gradient_checks(record_property):
    start = time.perf_counter()
    torch.set_grad_enabled(True)

    # dice loss w.r.t. P
    rng = np.random.default_rng(7)
    P = rng.uniform(0.05, 0.95, (3, 50))
    T = (rng.uniform(size=(3, 50)) < 0.4).astype(float)
    p = torch.tensor(P, requires_grad=True)
    batch_dice_loss(p, torch.tensor(T), 1e-7).backward()
    dice_worst = 0.0
    h = 1e-6
    for idx in np.ndindex(P.shape):
        up, dn = P.copy(), P.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (batch_dice_loss(up, T, 1e-7) - batch_dice_loss(dn, T, 1e-7)) / (2 * h)
        a = float(p.grad[idx])
        dice_worst = max(dice_worst, abs(fd - a) / max(abs(fd), abs(a)))
    assert dice_worst < 1e-3

    # full composite loss on a gated batch w.r.t. sampled generator parameters
    cfg = TrainConfig(cube_side=32, batch_size=4, seed=0)
    state = TrainingState.fresh(cfg, dtype=torch.float64)
    state.generator.train()
    state.discriminator.train()
    x, t = _gradient_batch()
    k = cfg.loss.k

    def objective():
        with torch.no_grad():
            return float(generator_objective(state, x, t, k)[0])

    total, _, gan_g, _ = generator_objective(state, x, t, k)
    assert gan_g is not None
    named = list(state.generator.named_parameters())
    grads = torch.autograd.grad(total, [q for _, q in named])
    f0 = objective()

    # a power-of-two step keeps theta +/- h exact; one-sided slopes that
    # disagree mark a ReLU / max-pool kink inside the step, where the
    # derivative is undefined, and that draw is replaced
    h = 2.0**-23
    prng = np.random.default_rng(11)
    worst, checked, kinks = 0.0, 0, 0
    while checked < 100:
        ti = int(prng.integers(len(named)))
        flat = named[ti][1].data.view(-1)
        fi = int(prng.integers(flat.numel()))
        orig = float(flat[fi])
        flat[fi] = orig + h
        up = objective()
        flat[fi] = orig - h
        dn = objective()
        flat[fi] = orig
        fwd, bwd = (up - f0) / h, (f0 - dn) / h
        if abs(fwd - bwd) > 0.1 * max(abs(fwd), abs(bwd)) and abs(fwd - bwd) > 1e-8:
            kinks += 1
            continue
        fd = (up - dn) / (2 * h)
        a = float(grads[ti].view(-1)[fi])
        denom = max(abs(fd), abs(a))
        err = 0.0 if denom == 0 else abs(fd - a) / denom
        worst = max(worst, err)
        checked += 1
    elapsed = time.perf_counter() - start
    _detail(
        record_property,
        f"dice wrt P worst {dice_worst:.1e}; composite {checked} params worst {worst:.1e} "
        f"({kinks} kink draws replaced); {elapsed:.0f}s",
    )
    assert worst < 1e-3
    assert elapsed < 300


# -- 3 -----------------------------------------------------------------------------

@pytest.mark.acceptance("3 shapes and parameter counts")
def test_shapes(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    for side in (32, 64, 96):
        g = build_generator(GeneratorConfig(input_side=side), seed=0)
        out = generator_forward(g, rng.uniform(size=(2, side, side, 3)).astype(np.float32))
        assert out.shape == (2, side, side, 2)
    d = build_discriminator(0).eval()
    with torch.no_grad():
        assert d(torch.zeros(1, 5, 512, 512)).shape == (1, 1, 62, 62)
        assert d(torch.zeros(2, 5, 64, 64)).shape == (2, 1, 6, 6)
    assert score_map_side(512) == 62 and score_map_side(64) == 6
    assert count_parameters(Discriminator()) == 2_768_577

    chans = DEFAULT_STAGE_CHANNELS
    real = build_generator(GeneratorConfig(kernel_mode="real7", input_side=32), 0)
    pseudo = build_generator(GeneratorConfig(kernel_mode="pseudo7", input_side=32), 0)
    real_lck = sum(count_parameters(m) for m in real.lck)
    pseudo_lck = sum(count_parameters(m) for m in pseudo.lck)
    assert real_lck == sum(49 * c * 2 + 2 for c in chans) == 382_602
    assert pseudo_lck == sum((7 * c * 2 + 2) + (7 * 2 * 2 + 2) for c in chans) == 54_816
    assert real_lck == sum(connector_parameter_count(c, 2, "real7") for c in chans)
    assert count_parameters(real) - count_parameters(pseudo) == real_lck - pseudo_lck
    elapsed = time.perf_counter() - start
    assert elapsed < 60
    _detail(
        record_property,
        f"real7 total {count_parameters(real):,} (connectors {real_lck:,}); "
        f"pseudo7 total {count_parameters(pseudo):,} (connectors {pseudo_lck:,}); {elapsed:.1f}s",
    )


# -- 4 -----------------------------------------------------------------------------

NARROW = (8, 16, 16, 32, 32)


def _schedule_cohort():
    spec = PhantomSpec(side=32, semi_axis_range=(5.0, 9.0), distractor_axis_range=(1.5, 3.0))
    return generate_cohort(2, spec, seed=5)


def _disc_snapshot(state):
    return torch.cat([p.detach().reshape(-1) for p in state.discriminator.parameters()]).clone()


@pytest.mark.acceptance("4 adversarial schedule")
def test_schedule(record_property):
    start = time.perf_counter()
    cohort = _schedule_cohort()
    cfg = TrainConfig(cube_side=32, batch_size=2, seed=4, encoder_stage_channels=NARROW, loss=LossConfig(k=100))
    state = TrainingState.fresh(cfg)
    stream = make_training_stream(cohort, cfg.view, cfg.batch_size, derive_seeds(cfg.seed)[2])
    d_updates, gan_terms, flagged = [], [], []
    before = _disc_snapshot(state)
    for batch in itertools.islice(stream, 1000):
        report = training_step(state, batch)
        after = _disc_snapshot(state)
        if not torch.equal(before, after):
            d_updates.append(batch.batch_index)
        if report.gan_generator_loss is not None:
            gan_terms.append(batch.batch_index)
        if report.discriminator_updated:
            flagged.append(batch.batch_index)
        before = after
    expected = list(range(100, 1001, 100))
    assert d_updates == expected
    assert gan_terms == expected
    assert flagged == expected

    # lambda ablation from one seed
    states = [TrainingState.fresh(replace(cfg, loss=LossConfig(lam=lam, k=100))) for lam in (0.0, 0.01)]
    streams = [make_training_stream(cohort, cfg.view, cfg.batch_size, derive_seeds(cfg.seed)[2]) for _ in states]
    first_divergence = None
    for b in range(1, 101):
        for s, st in zip(states, streams):
            training_step(s, next(st))
        same = all(
            torch.equal(p, q) for p, q in zip(states[0].generator.state_dict().values(), states[1].generator.state_dict().values())
        )
        if not same and first_divergence is None:
            first_divergence = b
        if b < 100:
            assert same, f"runs diverged early at batch {b}"
    assert first_divergence == 100
    elapsed = time.perf_counter() - start
    assert elapsed < 120
    _detail(record_property, f"D updates at {d_updates[0]}..{d_updates[-1]} (n={len(d_updates)}); "
            f"lambda runs diverge at batch {first_divergence}; {elapsed:.0f}s")


# -- 5 -----------------------------------------------------------------------------

@pytest.mark.acceptance("5 fusion and metric oracles")
def test_fusion_and_metric_oracles(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    se = ball(3)
    assert int(se.sum()) == 123
    n = 0
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(1, 13, 3))
        density = rng.uniform(0.2, 0.9)
        a = rng.uniform(size=shape) < density
        b = rng.uniform(size=shape) < density
        c = rng.uniform(size=shape) < density
        assert np.array_equal(erode(a, se), erode_oracle(a, 3))
        assert np.array_equal(dilate(a, se), dilate_oracle(a, 3))
        opened = binary_open(a, 3).astype(bool)
        closed = binary_close(a, 3).astype(bool)
        assert np.array_equal(opened, open_oracle(a, 3))
        assert np.array_equal(closed, close_oracle(a, 3))
        assert np.array_equal(binary_open(opened, 3).astype(bool), opened)
        assert np.array_equal(binary_close(closed, 3).astype(bool), closed)
        assert np.all(opened <= a) and np.all(a <= closed)
        union = union_masks([a, b, c]).astype(bool)
        assert np.array_equal(union, np.array([x or y or z for x, y, z in zip(a.flat, b.flat, c.flat)]).reshape(shape))
        assert np.array_equal(fuse_multiview(a, b, c).astype(bool), fuse_oracle(a, b, c, 3))
        assert dice_coefficient(a, b) == dice_oracle(a, b)
        if a.any() and b.any():
            spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5, 2.0], 3))
            assert mean_surface_distance(a, b, spacing) == msd_oracle(a, b, spacing)
            assert hausdorff_distance(a, b, spacing) == hd_oracle(a, b, spacing)
        n += 1
    x = np.linspace(0.6, 0.9, 10)
    p = wilcoxon_signed_rank(x, x + 0.03).pvalue
    assert abs(p - 0.00195) <= 1e-5
    elapsed = time.perf_counter() - start
    assert elapsed < 120
    _detail(record_property, f"{n} random pairs exact; wilcoxon p={p:.6f}; {elapsed:.0f}s")


# -- 6 and 7 ----------------------------------------------------------------------

E2E = ExperimentConfig(
    n_phantoms=24,
    cohort_seed=0,
    train=TrainConfig(learning_rate=1e-5, batch_size=12, epochs=10, cube_side=64, seed=0,
                      loss=LossConfig(lam=0.01, k=100)),
)


@pytest.fixture(scope="module")
def e2e_first(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e_a")
    return out, run_experiment(E2E, out)


@pytest.fixture(scope="module")
def e2e_second(tmp_path_factory, e2e_first):
    out = tmp_path_factory.mktemp("e2e_b")
    return out, run_experiment(E2E, out)


@pytest.mark.slow
@pytest.mark.acceptance("6 end-to-end phantom run")
def test_end_to_end(e2e_first, record_property):
    _, result = e2e_first
    assert len(result.test_ids) == 6
    medians = {m: result.median_dsc(m) for m in METHODS}
    _detail(record_property, ", ".join(f"{m} {v:.3f}" for m, v in medians.items()) + f"; {result.seconds / 60:.1f} min")
    assert medians["fused"] >= 0.80
    for view in ("axial", "coronal", "sagittal"):
        assert medians["fused"] >= medians[view] - 0.02
    assert result.seconds <= 45 * 60


def _digests(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.mark.slow
@pytest.mark.acceptance("7 determinism")
def test_determinism(e2e_first, e2e_second, record_property):
    a, b = _digests(e2e_first[0]), _digests(e2e_second[0])
    assert any(k.startswith("checkpoints/") for k in a)
    assert any(k.startswith("predictions/") for k in a)
    assert "metrics_fused.csv" in a
    assert a == b
    _detail(record_property, f"{len(a)} files bit-identical across two runs")
