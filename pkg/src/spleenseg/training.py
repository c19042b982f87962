"""Alternating generator/discriminator training, slice-wise prediction and subject-grouped folds."""

from __future__ import annotations

import contextlib
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .losses import LossConfig, batch_dice_loss, combined_generator_loss, gan_gate, lsgan_discriminator_loss, lsgan_generator_loss
from .metrics import dice_coefficient, lower_median
from .networks import (
    DEFAULT_STAGE_CHANNELS,
    Discriminator,
    Generator,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    segmentation_channels,
)
from .preprocess import SliceBatch, make_training_stream, replicate_channels, resample_to_original
from .volume import IntensityVolume, LabelVolume, VolumeError, VolumeHeader, ViewAxis

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 12
    epochs: int = 50
    loss: LossConfig = field(default_factory=LossConfig)
    view: str = "axial"
    seed: int = 0
    cube_side: int = 512
    kernel_mode: str = "real7"
    encoder_stage_channels: tuple[int, ...] = DEFAULT_STAGE_CHANNELS

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        object.__setattr__(self, "view", ViewAxis.parse(self.view).value)
        object.__setattr__(self, "encoder_stage_channels", tuple(int(c) for c in self.encoder_stage_channels))

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            kernel_mode=self.kernel_mode,
            input_side=self.cube_side,
            encoder_stage_channels=self.encoder_stage_channels,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_stage_channels"] = list(self.encoder_stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass(frozen=True)
class StepReport:
    batch_index: int
    dice_loss: float
    gan_generator_loss: float | None = None
    discriminator_loss: float | None = None
    discriminator_updated: bool = False

    def log_line(self) -> str:
        def fmt(v):
            return "NA" if v is None else repr(v)

        return (
            f"STEP batch_index={self.batch_index} dice_loss={fmt(self.dice_loss)} "
            f"gan_generator_loss={fmt(self.gan_generator_loss)} "
            f"discriminator_loss={fmt(self.discriminator_loss)} "
            f"discriminator_updated={int(self.discriminator_updated)}"
        )


def derive_seeds(seed: int, n: int = 3) -> list[int]:
    """Independent integer seeds for generator init, discriminator init and the slice stream."""
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


@dataclass
class TrainingState:
    generator: Generator
    discriminator: Discriminator
    config: TrainConfig
    opt_g: torch.optim.Optimizer = None
    opt_d: torch.optim.Optimizer = None
    batches: int = 0
    epoch: int = 0

    def __post_init__(self):
        lr = self.config.learning_rate
        if self.opt_g is None:
            self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
        if self.opt_d is None:
            self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)

    @classmethod
    def fresh(cls, config: TrainConfig, dtype: torch.dtype = torch.float32) -> "TrainingState":
        g_seed, d_seed, _ = derive_seeds(config.seed)
        gen = build_generator(config.generator_config(), g_seed).to(dtype)
        disc = build_discriminator(d_seed).to(dtype)
        return cls(gen, disc, config)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.generator, self.discriminator, self.config.to_dict(), self.epoch, self.batches)


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Forward through ``module`` without recording parameter grads or touching its buffers."""
    flags = [p.requires_grad for p in module.parameters()]
    norms = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    # zero momentum keeps running stats bit-unchanged; they are saved for
    # backward, so they must not be restored in place afterwards
    momenta = [m.momentum for m in norms]
    tracked = [m.num_batches_tracked.clone() for m in norms]
    for p in module.parameters():
        p.requires_grad_(False)
    for m in norms:
        m.momentum = 0.0
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)
        for m, mom, n in zip(norms, momenta, tracked):
            m.momentum = mom
            m.num_batches_tracked.copy_(n)


def _batch_tensors(batch: SliceBatch, dtype):
    x = torch.from_numpy(np.ascontiguousarray(batch.images)).to(dtype).permute(0, 3, 1, 2).contiguous()
    t = torch.from_numpy(np.ascontiguousarray(batch.masks)).to(dtype)
    return x, t


def _check_finite(value: torch.Tensor, what: str, batch_index: int) -> float:
    v = float(value.detach())
    if not np.isfinite(v):
        raise FloatingPointError(f"non-finite {what} at batch_index={batch_index}: {v}")
    return v


def generator_objective(state: TrainingState, x, t, batch_index: int):
    """Forward pass and gated dice+adversarial composite for one batch, without any optimizer step.

    Returns (total, dice, gan_g, fg) with ``gan_g`` None when the gate is closed.
    Shared by :func:`training_step` and the gradient checks.
    """
    lcfg = state.config.loss
    logits = state.generator(x)
    if not bool(torch.isfinite(logits).all()):
        raise FloatingPointError(f"non-finite generator output at batch_index={batch_index}")
    fg = torch.softmax(logits, dim=1)[:, 1]
    B = fg.shape[0]
    dice = batch_dice_loss(fg.reshape(B, -1), t.reshape(B, -1), lcfg.epsilon)
    if not gan_gate(batch_index, lcfg.k):
        return dice, dice, None, fg
    with frozen(state.discriminator) as disc:
        scores = disc(torch.cat([x, segmentation_channels(fg)], dim=1))
    gan_g = lsgan_generator_loss(scores, lcfg.c)
    return combined_generator_loss(dice, gan_g, lcfg, batch_index), dice, gan_g, fg


def training_step(state: TrainingState, batch: SliceBatch) -> StepReport:
    """One generator Adam step; on gated batches a discriminator step first."""
    cfg = state.config
    lcfg = cfg.loss
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()
    dtype = next(gen.parameters()).dtype
    x, t = _batch_tensors(batch, dtype)
    b = batch.batch_index
    gated = bool(gan_gate(b, lcfg.k))

    d_value = None
    if gated:
        # critic update on the current generator's soft prediction, held constant
        with torch.no_grad(), frozen(gen):
            fake = torch.softmax(gen(x), dim=1)[:, 1]
        state.opt_d.zero_grad(set_to_none=True)
        real_scores = disc(torch.cat([x, segmentation_channels(t)], dim=1))
        fake_scores = disc(torch.cat([x, segmentation_channels(fake)], dim=1))
        d_loss = lsgan_discriminator_loss(real_scores, fake_scores, lcfg.a, lcfg.b)
        d_value = _check_finite(d_loss, "discriminator_loss", b)
        d_loss.backward()
        state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    total, dice, gan_g, _ = generator_objective(state, x, t, b)
    dice_value = _check_finite(dice, "dice_loss", b)
    g_value = _check_finite(gan_g, "gan_generator_loss", b) if gan_g is not None else None
    _check_finite(total, "generator objective", b)
    total.backward()
    state.opt_g.step()
    state.batches = b
    state.epoch = batch.epoch
    return StepReport(b, dice_value, g_value, d_value, gated)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    validation_dsc: list[float] = field(default_factory=list)
    reports: list[StepReport] = field(default_factory=list)


def train_view(
    cohort: Sequence[tuple[IntensityVolume, LabelVolume]],
    cfg: TrainConfig,
    validation: Sequence[tuple[IntensityVolume, LabelVolume]] | None = None,
    on_epoch: Callable[[int, TrainingState, float | None], None] | None = None,
    keep_reports: bool = False,
) -> TrainResult:
    """Train one view's generator/discriminator pair for ``cfg.epochs`` epochs.

    When ``validation`` is given, the median cube-resolution DSC over it is
    recorded after every epoch.
    """
    if not cohort:
        raise ValueError("empty cohort")
    side = cohort[0][0].header.dims[0]
    if side != cfg.cube_side:
        raise VolumeError(f"cohort cube side {side} does not match cube_side {cfg.cube_side}")
    state = TrainingState.fresh(cfg)
    _, _, stream_seed = derive_seeds(cfg.seed)
    stream = make_training_stream(cohort, cfg.view, cfg.batch_size, stream_seed)
    result = TrainResult(checkpoint=None)
    current_epoch = 1
    for batch in stream:
        if batch.epoch != current_epoch:
            _end_epoch(state, current_epoch, validation, result, on_epoch)
            if batch.epoch > cfg.epochs:
                break
            current_epoch = batch.epoch
        report = training_step(state, batch)
        log.info(report.log_line())
        if keep_reports:
            result.reports.append(report)
    state.epoch = cfg.epochs
    result.checkpoint = state.checkpoint()
    return result


def _end_epoch(state, epoch, validation, result, on_epoch):
    state.epoch = epoch
    val = None
    if validation:
        scores = [
            dice_coefficient(predict_cube(state.generator, img, state.config.view), lab) for img, lab in validation
        ]
        val = lower_median(scores)
        result.validation_dsc.append(val)
    log.info(f"EPOCH epoch={epoch} batches={state.batches} validation_dsc={'NA' if val is None else repr(val)}")
    if on_epoch is not None:
        on_epoch(epoch, state, val)


# ---------------------------------------------------------------------------
# prediction


def predict_logits(gen: Generator, volume: IntensityVolume, view, chunk: int = 16) -> np.ndarray:
    """Per-slice inference along ``view``; returns S x S x S x num_classes logits in volume axes."""
    view = ViewAxis.parse(view)
    side = gen.config.input_side
    if volume.header.dims != (side,) * 3:
        raise VolumeError(f"volume dims {volume.header.dims} do not match generator side {side}")
    axis = view.normal_axis
    stacked = np.moveaxis(volume.data, axis, 0)
    dtype = next(gen.parameters()).dtype
    was_training = gen.training
    gen.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, side, chunk):
                x = torch.from_numpy(replicate_channels(stacked[start : start + chunk]))
                x = x.to(dtype).permute(0, 3, 1, 2).contiguous()
                out.append(gen(x).permute(0, 2, 3, 1).numpy())
    finally:
        gen.train(was_training)
    return np.moveaxis(np.concatenate(out, axis=0), 0, axis)


def logits_to_mask(logits: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties resolve to background
    return (np.argmax(logits, axis=-1) == 1).astype(np.uint8)


def predict_cube(gen: Generator, volume: IntensityVolume, view) -> LabelVolume:
    return LabelVolume(volume.header, logits_to_mask(predict_logits(gen, volume, view)))


def predict_volume(
    ckpt: Checkpoint | Generator,
    volume: IntensityVolume,
    view=None,
    original: VolumeHeader | None = None,
) -> LabelVolume:
    """Stacked slice-wise prediction, resampled to ``original`` when given."""
    gen = ckpt.generator() if isinstance(ckpt, Checkpoint) else ckpt
    if view is None:
        if not isinstance(ckpt, Checkpoint) or ckpt.view is None:
            raise ValueError("view is required")
        view = ckpt.view
    cube = predict_cube(gen, volume, view)
    return resample_to_original(cube, original) if original is not None else cube


# ---------------------------------------------------------------------------
# subject-grouped folds


@dataclass(frozen=True)
class ManifestEntry:
    scan_id: str
    subject_id: str
    modality: str


def kfold_split(manifest: Iterable, k: int, seed: int) -> list[list[str]]:
    """Partition scans into ``k`` folds keeping each subject's scans together.

    Subjects are placed largest first (seeded shuffle breaks size ties), each
    into the fold minimizing squared fold size plus squared per-modality
    counts. Fold contents keep manifest order.
    """
    entries = [e if isinstance(e, ManifestEntry) else ManifestEntry(*e) for e in manifest]
    if k < 2:
        raise ValueError("k must be >= 2")
    groups: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in entries:
        if not e.subject_id:
            raise ValueError(f"scan {e.scan_id} has no subject id")
        groups[e.subject_id].append(e)
    if k > len(groups):
        raise ValueError(f"k={k} exceeds subject count {len(groups)}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    subjects = sorted(groups)
    subjects = [subjects[i] for i in rng.permutation(len(subjects))]
    subjects.sort(key=lambda s: -len(groups[s]))
    modalities = sorted({e.modality for e in entries})
    sizes = [0] * k
    counts = [dict.fromkeys(modalities, 0) for _ in range(k)]
    fold_of: dict[str, int] = {}
    for s in subjects:
        add = defaultdict(int)
        for e in groups[s]:
            add[e.modality] += 1
        n = len(groups[s])

        def cost(f):
            return (sizes[f] + n) ** 2 + sum((counts[f][m] + add[m]) ** 2 for m in modalities)

        best = min(range(k), key=lambda f: (cost(f), f))
        fold_of[s] = best
        sizes[best] += n
        for m, c in add.items():
            counts[best][m] += c
    folds: list[list[str]] = [[] for _ in range(k)]
    for e in entries:
        folds[fold_of[e.subject_id]].append(e.scan_id)
    return folds
