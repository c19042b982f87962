"""Large-kernel FCN generator and conditional PatchGAN discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

KERNEL_MODES = ("real7", "pseudo7", "small3")
BLOCK_COUNTS = (3, 4, 6, 3)
DEFAULT_STAGE_CHANNELS = (64, 256, 512, 1024, 2048)
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 2
    kernel_mode: str = "real7"
    input_side: int = 512
    # channels after Conv1 and after Block1..4
    encoder_stage_channels: tuple[int, ...] = field(default=DEFAULT_STAGE_CHANNELS)

    def __post_init__(self):
        object.__setattr__(self, "encoder_stage_channels", tuple(int(c) for c in self.encoder_stage_channels))
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}, got {self.kernel_mode!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_side < 32 or self.input_side % 32:
            raise ValueError(f"input_side must be a positive multiple of 32, got {self.input_side}")
        chans = self.encoder_stage_channels
        if len(chans) != 5 or any(c < 1 for c in chans):
            raise ValueError(f"encoder_stage_channels needs 5 positive ints, got {chans}")
        if any(c % 4 for c in chans[1:]):
            raise ValueError("bottleneck stage channels must be divisible by 4")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_stage_channels"] = list(self.encoder_stage_channels)
        return d


# ---------------------------------------------------------------------------
# building blocks


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = out_ch // 4
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid, momentum=BN_MOMENTUM)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


def _stage(in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(in_ch, out_ch, stride)]
    layers += [Bottleneck(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class LargeKernelConnector(nn.Module):
    """Skip connector projecting encoder features to class channels."""

    def __init__(self, in_ch: int, out_ch: int, mode: str):
        super().__init__()
        self.mode = mode
        if mode == "real7":
            self.conv = nn.Conv2d(in_ch, out_ch, 7, padding=3)
        elif mode == "pseudo7":
            self.conv = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, (7, 1), padding=(3, 0)),
                nn.Conv2d(out_ch, out_ch, (1, 7), padding=(0, 3)),
            )
        elif mode == "small3":
            self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        else:
            raise ValueError(f"unknown kernel mode {mode!r}")

    def forward(self, x):
        return self.conv(x)


def connector_parameter_count(in_ch: int, out_ch: int, mode: str) -> int:
    """Closed-form weight+bias count of one skip connector."""
    if mode == "real7":
        return 49 * in_ch * out_ch + out_ch
    if mode == "pseudo7":
        return (7 * in_ch * out_ch + out_ch) + (7 * out_ch * out_ch + out_ch)
    if mode == "small3":
        return 9 * in_ch * out_ch + out_ch
    raise ValueError(f"unknown kernel mode {mode!r}")


class Refine(nn.Module):
    """Size-preserving residual boundary refinement: x + conv(relu(conv(x)))."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def _upsample_to(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# networks


class Generator(nn.Module):
    """ResNet-style bottleneck encoder, five skip connectors and a refine/upsample decoder.

    ``forward`` works on N x 3 x H x W tensors and returns class logits at
    input resolution; :func:`generator_forward` is the channels-last wrapper.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c0, c1, c2, c3, c4 = config.encoder_stage_channels
        nc = config.num_classes
        self.conv1 = nn.Conv2d(3, c0, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(c0, momentum=BN_MOMENTUM)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.block1 = _stage(c0, c1, BLOCK_COUNTS[0], 1)
        self.block2 = _stage(c1, c2, BLOCK_COUNTS[1], 2)
        self.block3 = _stage(c2, c3, BLOCK_COUNTS[2], 2)
        self.block4 = _stage(c3, c4, BLOCK_COUNTS[3], 2)
        self.lck = nn.ModuleList(LargeKernelConnector(c, nc, config.kernel_mode) for c in (c0, c1, c2, c3, c4))
        # one (pre-add, post-add) refine pair per merge, then two upsample stages
        self.refine_pre = nn.ModuleList(Refine(nc) for _ in range(4))
        self.refine_post = nn.ModuleList(Refine(nc) for _ in range(4))
        self.refine_up = nn.ModuleList(Refine(nc) for _ in range(2))
        self.classifier = nn.Conv2d(nc, nc, 1)

    def encode(self, x):
        c = F.relu(self.bn1(self.conv1(x)))
        p = self.maxpool(c)
        f1 = self.block1(p)
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        f4 = self.block4(f3)
        return [p, f1, f2, f3, f4]

    def forward(self, x):
        if x.shape[-1] != self.config.input_side or x.shape[-2] != self.config.input_side:
            raise ValueError(f"expected {self.config.input_side}^2 input, got {tuple(x.shape[-2:])}")
        feats = self.encode(x)
        skips = [conn(f) for conn, f in zip(self.lck, feats)]
        y = skips[4]
        for i, skip in enumerate(reversed(skips[:4])):
            y = self.refine_pre[i](y)
            # pooled Conv1 and Block1 share a resolution: that merge adds without resizing
            y = _upsample_to(y, skip.shape[-2:]) + skip
            y = self.refine_post[i](y)
        for refine in self.refine_up:
            y = refine(F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False))
        return self.classifier(y)


class Discriminator(nn.Module):
    """Five-layer conditional PatchGAN over image (3 ch) + segmentation (2 ch)."""

    in_channels = 5

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(5, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),
            nn.BatchNorm2d(128, momentum=BN_MOMENTUM),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(128, 256, 4, stride=2, padding=1),
            nn.BatchNorm2d(256, momentum=BN_MOMENTUM),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(256, 512, 4, stride=1, padding=1),
            nn.BatchNorm2d(512, momentum=BN_MOMENTUM),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Conv2d(512, 1, 4, stride=1, padding=1),
            nn.Sigmoid(),
        )

    @property
    def final_conv(self) -> nn.Conv2d:
        return self.net[-2]

    def forward(self, x):
        side = min(x.shape[-2:])
        if score_map_side(side) < 1:
            raise ValueError(f"input side {side} too small for the patch discriminator")
        return self.net(x)


DISCRIMINATOR_LAYERS = ((5, 64, 2, False), (64, 128, 2, True), (128, 256, 2, True), (256, 512, 1, True), (512, 1, 1, False))


def score_map_side(side: int) -> int:
    """Output side of the patch discriminator for a square input."""
    for _, _, stride, _ in DISCRIMINATOR_LAYERS:
        side = (side + 2 * 1 - 4) // stride + 1
    return side


def discriminator_parameter_count() -> int:
    total = 0
    for cin, cout, _, has_bn in DISCRIMINATOR_LAYERS:
        total += 16 * cin * cout + cout
        if has_bn:
            total += 2 * cout
    return total


def _init_weights(module: nn.Module, seed: int, nonlinearity: str, a: float = 0.0) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=a, mode="fan_in", nonlinearity=nonlinearity, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _init_decoder(g: "Generator", seed: int) -> None:
    # decoder convs feed sums or logits, not a ReLU: unit (linear) gain, and
    # each refine branch starts at zero so the block is the identity
    gen = torch.Generator().manual_seed(int(seed) + 1)
    linear = [m for conn in g.lck for m in conn.modules() if isinstance(m, nn.Conv2d)] + [g.classifier]
    for m in linear:
        nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="linear", generator=gen)
    for refine in [*g.refine_pre, *g.refine_post, *g.refine_up]:
        nn.init.zeros_(refine.conv2.weight)


def build_generator(config: GeneratorConfig, seed: int) -> Generator:
    g = Generator(config)
    _init_weights(g, seed, "relu")
    _init_decoder(g, seed)
    return g


def build_discriminator(seed: int) -> Discriminator:
    d = Discriminator()
    _init_weights(d, seed, "leaky_relu", a=LEAKY_SLOPE)
    return d


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# channels-last functional surface


def _to_nchw(x, dtype) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.to(dtype).permute(0, 3, 1, 2).contiguous()


def _module_dtype(m: nn.Module) -> torch.dtype:
    return next(m.parameters()).dtype


def generator_forward(g: Generator, images) -> np.ndarray | torch.Tensor:
    """Inference-mode logits, B x H x W x 3 -> B x H x W x num_classes.

    NumPy input gives NumPy output; tensors stay tensors.
    """
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"images must be B x H x W x 3, got {tuple(images.shape)}")
    was_training = g.training
    g.eval()
    try:
        with torch.no_grad():
            out = g(_to_nchw(images, _module_dtype(g))).permute(0, 2, 3, 1)
    finally:
        g.train(was_training)
    return out.numpy() if isinstance(images, np.ndarray) else out


def foreground_probability(logits):
    """Softmax over the class axis (last), foreground channel."""
    if logits.shape[-1] != 2:
        raise ValueError(f"foreground_probability needs 2 classes, got {logits.shape[-1]}")
    if isinstance(logits, np.ndarray):
        # stable two-class softmax: sigmoid of the logit difference
        diff = logits[..., 1].astype(np.float64) - logits[..., 0]
        return (0.5 * (1.0 + np.tanh(0.5 * diff))).astype(logits.dtype)
    return torch.softmax(logits, dim=-1)[..., 1]


def segmentation_channels(fg) -> torch.Tensor:
    """Foreground map B x H x W -> two channels (1 - P, P) as N x 2 x H x W."""
    return torch.stack([1 - fg, fg], dim=1)


def discriminator_forward(d: Discriminator, images, seg) -> np.ndarray | torch.Tensor:
    """Patch scores for B x H x W x 3 images conditioned on B x H x W x 2 segmentations."""
    if images.shape[:3] != seg.shape[:3] or images.shape[-1] != 3 or seg.shape[-1] != 2:
        raise ValueError(f"shape mismatch: images {tuple(images.shape)}, seg {tuple(seg.shape)}")
    dtype = _module_dtype(d)
    x = torch.cat([_to_nchw(images, dtype), _to_nchw(seg, dtype)], dim=1)
    with torch.no_grad():
        out = d(x)[:, 0]
    return out.numpy() if isinstance(images, np.ndarray) else out
