"""Network construction: translators, patch critics, and identity embedders.

Three families are built here:

* generators -- residual translation networks mapping 3xHxW -> 3xHxW in [-1,1]
* discriminators -- patch critics scoring overlapping receptive fields
* recognizers -- embedding extractors with a classification head on top

Also houses the convolution arithmetic oracle (`conv_output_size`,
`receptive_field`, `input_window`) used to verify patch-critic geometry
analytically instead of by inspection.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import torch
import torch.nn.functional as F
from torch import nn


# ---------------------------------------------------------------------------
# convolution arithmetic oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one conv layer along a single spatial axis."""

    kernel: int
    stride: int
    padding: int


def conv_output_size(size: int, spec: ConvSpec) -> int:
    return (size + 2 * spec.padding - spec.kernel) // spec.stride + 1


def stack_output_size(size: int, specs) -> int:
    return reduce(conv_output_size, specs, size)


def input_window(specs, index: int):
    """Inclusive input interval seen by output unit `index` through a conv stack.

    Coordinates may be negative or exceed the input extent: they then fall
    in the zero-padding margin.
    """
    lo = hi = index
    for spec in reversed(list(specs)):
        lo = lo * spec.stride - spec.padding
        hi = hi * spec.stride - spec.padding + spec.kernel - 1
    return lo, hi


def receptive_field(specs) -> int:
    """Analytic receptive-field size (pixels along one axis) of a conv stack."""
    lo, hi = input_window(specs, 0)
    return hi - lo + 1


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    input_channels: int = 3
    base_filters: int = 64
    num_residual_blocks: int = 9  # 9 suits 256px, 6 suits <=128px

    def __post_init__(self):
        if self.num_residual_blocks < 1:
            raise ValueError("num_residual_blocks must be >= 1")
        if self.base_filters < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")


def residual_blocks_for_size(size: int) -> int:
    return 9 if size > 128 else 6


@dataclass
class DiscriminatorConfig:
    input_channels: int = 3
    base_filters: int = 64
    num_downsampling_layers: int = 3  # defaults give a 70px receptive field

    def __post_init__(self):
        if self.num_downsampling_layers < 1:
            raise ValueError("num_downsampling_layers must be >= 1")

    def layer_specs(self):
        """ConvSpec stack implied by this config, for the arithmetic oracle."""
        return [ConvSpec(4, 2, 1)] * self.num_downsampling_layers + [ConvSpec(4, 1, 1)] * 2


@dataclass
class RecognizerConfig:
    embedding_dim: int = 128
    backbone: str = "desk-scale-cnn"  # or "vgg16-style"
    num_identities: int = 8
    # Unit-L2 embeddings keep triplet margins and perceptual distances scale-free;
    # turn off to mimic raw fc7 activations.
    normalize_embeddings: bool = True
    vgg_width: int = 64
    fc_dim: int = 4096

    def __post_init__(self):
        if self.embedding_dim < 1 or self.num_identities < 1:
            raise ValueError("embedding_dim and num_identities must be positive")
        if self.backbone not in ("desk-scale-cnn", "vgg16-style"):
            raise ValueError(f"unknown backbone {self.backbone!r}")


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Residual translator: 7x7 stem, two stride-2 downs, residual blocks,
    two stride-1/2 (transposed) ups, 7x7 head, tanh output."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c, f = config.input_channels, config.base_filters
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, f, 7),
            nn.InstanceNorm2d(f),
            nn.ReLU(inplace=True),
            nn.Conv2d(f, 2 * f, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * f),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * f, 4 * f, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * f),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * f) for _ in range(config.num_residual_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * f, 2 * f, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * f),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * f, f, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(f),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(f, c, 7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input spatial size must be divisible by 4, got {h}x{w}")
        return self.model(x)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """Patch critic: stride-2 conv blocks then two stride-1 blocks, kernel 4.

    Maps 3xHxW to a 1xhxw score map; each score sees one receptive field
    (70x70 at the default depth).  No normalization on the first layer,
    leaky slope 0.2 throughout, raw (pre-sigmoid) outputs.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        f = config.base_filters
        layers = [
            nn.Conv2d(config.input_channels, f, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        mult = 1
        for _ in range(config.num_downsampling_layers - 1):
            prev, mult = mult, min(mult * 2, 8)
            layers += [
                nn.Conv2d(f * prev, f * mult, 4, stride=2, padding=1),
                nn.InstanceNorm2d(f * mult),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        prev, mult = mult, min(mult * 2, 8)
        layers += [
            nn.Conv2d(f * prev, f * mult, 4, stride=1, padding=1),
            nn.InstanceNorm2d(f * mult),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(f * mult, 1, 4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)

    def layer_specs(self):
        return self.config.layer_specs()


# ---------------------------------------------------------------------------
# recognizers
# ---------------------------------------------------------------------------

class Recognizer(nn.Module):
    """Embedding extractor plus classification head.

    `embed` returns the penultimate (embedding-layer) activation used for
    identity distances; `classify` returns per-identity logits from the
    head that sits after the embedding layer.
    """

    def __init__(self, config: RecognizerConfig):
        super().__init__()
        self.config = config
        if config.backbone == "desk-scale-cnn":
            self.features = nn.Sequential(
                nn.Conv2d(3, 32, 3, padding=1), nn.GroupNorm(8, 32), nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
                nn.Conv2d(32, 64, 3, padding=1), nn.GroupNorm(8, 64), nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
                nn.Conv2d(64, 128, 3, padding=1), nn.GroupNorm(8, 128), nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
                nn.AdaptiveAvgPool2d(4),
                nn.Flatten(),
            )
            feat_dim = 128 * 4 * 4
            self.embedding = nn.Linear(feat_dim, config.embedding_dim)
        else:  # vgg16-style
            w = config.vgg_width
            plan = [w, w, "M", 2 * w, 2 * w, "M", 4 * w, 4 * w, 4 * w, "M",
                    8 * w, 8 * w, 8 * w, "M", 8 * w, 8 * w, 8 * w, "M"]
            layers, in_ch = [], 3
            for item in plan:
                if item == "M":
                    layers.append(nn.MaxPool2d(2))
                else:
                    layers += [nn.Conv2d(in_ch, item, 3, padding=1), nn.ReLU(inplace=True)]
                    in_ch = item
            layers += [nn.AdaptiveAvgPool2d(7), nn.Flatten(),
                       nn.Linear(in_ch * 7 * 7, config.fc_dim), nn.ReLU(inplace=True)]
            self.features = nn.Sequential(*layers)
            self.embedding = nn.Linear(config.fc_dim, config.embedding_dim)
        self.head = nn.Sequential(nn.ReLU(), nn.Linear(config.embedding_dim, config.num_identities))

    @property
    def embedding_dim(self):
        return self.config.embedding_dim

    def embed(self, x):
        e = self.embedding(self.features(x))
        if self.config.normalize_embeddings:
            e = F.normalize(e, p=2, dim=-1, eps=1e-8)
        return e

    def classify(self, x):
        return self.head(self.embedding(self.features(x)))

    def forward(self, x):
        return self.embed(x)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def build_generator(config=None, seed=None) -> Generator:
    net = Generator(config or GeneratorConfig())
    if seed is not None:
        init_parameters(net, seed)
    return net


def build_discriminator(config=None, seed=None) -> PatchDiscriminator:
    net = PatchDiscriminator(config or DiscriminatorConfig())
    if seed is not None:
        init_parameters(net, seed)
    return net


def build_recognizer(config=None, seed=None) -> Recognizer:
    net = Recognizer(config or RecognizerConfig())
    if seed is not None:
        init_parameters(net, seed)
    return net


def count_parameters(net) -> int:
    return sum(p.numel() for p in net.parameters())


def init_parameters(net, seed):
    """Deterministic init: conv/linear weights ~ N(0, 0.02), biases zero,
    affine norm weights one.  Same seed, same module layout -> bit-identical
    parameters."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                module.weight.normal_(0.0, 0.02, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.InstanceNorm2d, nn.GroupNorm, nn.BatchNorm2d)):
                if module.weight is not None:
                    module.weight.fill_(1.0)
                if module.bias is not None:
                    module.bias.zero_()
