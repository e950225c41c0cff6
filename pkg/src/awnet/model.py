"""Attention W-Net: two chained U-Nets with shared-weight residual blocks and
attention-gated skip connections in both decoder branches.
"""
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ATTENTION_TYPES = ("none", "type1", "type2")
RESBLOCK_VARIANTS = ("shared", "plain", "unshared")


class ConfigurationError(ValueError):
    """Raised when tensors or parameters do not match the configured shapes."""


class InputSizeError(ValueError):
    """Raised when an input's spatial size cannot pass through every level."""


@dataclass
class ModelConfig:
    levels: int = 5
    in_channels: int = 1
    base_channels: int = 10
    dropout_rate: float = 0.25
    attention_type: str = "type2"
    resblock: str = "shared"
    kernel_size: int = 3
    # two logits z0, z1 with vessel probability sigmoid(z1 - z0); 1 gives a plain sigmoid head
    head_channels: int = 2
    gate_batchnorm: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigurationError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        self.attention_type = normalize_attention_type(self.attention_type)
        if self.resblock not in RESBLOCK_VARIANTS:
            raise ConfigurationError(f"resblock must be one of {RESBLOCK_VARIANTS}, got {self.resblock!r}")
        if self.head_channels not in (1, 2):
            raise ConfigurationError("head_channels must be 1 or 2")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd")

    @property
    def channels(self):
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def normalize_attention_type(value):
    aliases = {None: "none", "none": "none", "0": "none", "1": "type1", "2": "type2",
               "type1": "type1", "type2": "type2", "type-1": "type1", "type-2": "type2"}
    key = value if value is None else str(value).lower()
    if key not in aliases:
        raise ConfigurationError(f"attention_type must be one of {ATTENTION_TYPES}, got {value!r}")
    return aliases[key]


class ResidualBlock(nn.Module):
    """Residual unit that applies one convolution kernel twice.

    ``shared``: conv -> bn1 -> ReLU -> dropout -> same conv -> bn2, plus the
    identity, then ReLU.  ``plain`` is the original LadderNet unit (biased
    shared conv, no BatchNorm).  ``unshared`` uses two independent kernels
    and exists for the weight-sharing ablation.
    """

    def __init__(self, channels, dropout_rate=0.25, kernel_size=3, variant="shared"):
        super().__init__()
        if variant not in RESBLOCK_VARIANTS:
            raise ConfigurationError(f"unknown residual block variant {variant!r}")
        self.channels = channels
        self.variant = variant
        pad = kernel_size // 2
        use_bn = variant != "plain"
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=pad, bias=not use_bn)
        self.conv2 = (nn.Conv2d(channels, channels, kernel_size, padding=pad, bias=False)
                      if variant == "unshared" else None)
        self.bn1 = nn.BatchNorm2d(channels) if use_bn else nn.Identity()
        self.bn2 = nn.BatchNorm2d(channels) if use_bn else nn.Identity()
        self.drop = nn.Dropout2d(dropout_rate)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ConfigurationError(
                f"residual block expects N x {self.channels} x H x W input, got {tuple(x.shape)}")
        second = self.conv2 if self.conv2 is not None else self.conv
        out = F.relu(self.bn1(self.conv(x)))
        out = self.drop(out)
        out = self.bn2(second(out))
        return F.relu(out + x)


class AttentionBlock(nn.Module):
    """Gate computing p = sigmoid(psi(ReLU(W1 g + W2 x))) over a FeaturePair.

    ``g`` is the encoder (skip) feature and ``x`` the upsampled decoder
    feature.  Type-2 returns ``g * p + x``; Type-1 returns ``p * x``.
    """

    def __init__(self, channels, kind="type2", batchnorm=True):
        super().__init__()
        kind = normalize_attention_type(kind)
        if kind == "none":
            raise ConfigurationError("attention block needs kind type1 or type2")
        self.channels = channels
        self.kind = kind

        def branch(c_out):
            layers = [nn.Conv2d(channels, c_out, 1, bias=True)]
            if batchnorm:
                layers.append(nn.BatchNorm2d(c_out))
            return nn.Sequential(*layers)

        self.W1 = branch(channels)
        self.W2 = branch(channels)
        self.psi = branch(1)

    def attention_map(self, g, x):
        if g.shape != x.shape:
            raise ConfigurationError(f"encoder/decoder shapes differ: {tuple(g.shape)} vs {tuple(x.shape)}")
        if g.shape[1] != self.channels:
            raise ConfigurationError(f"attention block expects {self.channels} channels, got {g.shape[1]}")
        return torch.sigmoid(self.psi(F.relu(self.W1(g) + self.W2(x))))

    def forward(self, g, x):
        p = self.attention_map(g, x)
        if self.kind == "type2":
            return g * p + x
        return p * x


class UBranch(nn.Module):
    """One encoder/decoder pass of the ladder."""

    def __init__(self, config):
        super().__init__()
        ch = config.channels
        k = config.kernel_size
        block = lambda c: ResidualBlock(c, config.dropout_rate, k, config.resblock)  # noqa: E731
        self.enc = nn.ModuleList([block(c) for c in ch])
        self.down = nn.ModuleList(
            [nn.Conv2d(ch[i], ch[i + 1], k, stride=2, padding=k // 2) for i in range(len(ch) - 1)])
        self.up = nn.ModuleList(
            [nn.ConvTranspose2d(ch[i + 1], ch[i], k, stride=2, padding=k // 2, output_padding=1)
             for i in range(len(ch) - 1)])
        if config.attention_type == "none":
            self.gates = None
        else:
            self.gates = nn.ModuleList(
                [AttentionBlock(ch[i], config.attention_type, config.gate_batchnorm)
                 for i in range(len(ch) - 1)])
        self.dec = nn.ModuleList([block(ch[i]) for i in range(len(ch) - 1)])

    def forward(self, h, ladder=None):
        skips = []
        for i, blk in enumerate(self.enc):
            if i > 0:
                h = F.relu(self.down[i - 1](h))
                if ladder is not None:
                    h = h + ladder[i]
            h = blk(h)
            skips.append(h)
        outs = [None] * len(self.enc)
        outs[-1] = h
        for i in reversed(range(len(self.dec))):
            x = self.up[i](h)
            g = skips[i]
            h = g + x if self.gates is None else self.gates[i](g, x)
            h = self.dec[i](F.relu(h))
            outs[i] = h
        return outs


class AttentionWNet(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        c0 = config.base_channels
        k = config.kernel_size
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, c0, k, padding=k // 2, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(),
        )
        self.branch1 = UBranch(config)
        self.branch2 = UBranch(config)
        self.head = nn.Conv2d(c0, config.head_channels, 1)

    def check_input(self, x):
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ConfigurationError(f"expected N x {cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % cfg.divisor or w % cfg.divisor:
            raise InputSizeError(
                f"spatial size {h}x{w} must be divisible by {cfg.divisor} for {cfg.levels} levels")

    def logits(self, x):
        """Vessel log-odds, N x 1 x H x W."""
        self.check_input(x)
        h = self.stem(x)
        first = self.branch1(h)
        second = self.branch2(first[0], ladder=first)
        z = self.head(second[0])
        if self.config.head_channels == 2:
            z = z[:, 1:2] - z[:, 0:1]
        return z

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_model(config=None):
    return AttentionWNet(config or ModelConfig())


def count_parameters(model):
    """Learnable scalar count; a parameter reused in several places counts once."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
