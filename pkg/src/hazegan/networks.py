"""Generators, PatchGAN discriminators and the frozen VGG-16 feature extractor."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigError

# torchvision's published channel statistics for ImageNet-pretrained backbones
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

VGG16_WEIGHTS_ENV = "HAZEGAN_VGG16_WEIGHTS"
VGG16_DEFAULT_PATH = Path("~/.cache/torch/hub/checkpoints/vgg16-397923af.pth")

# indices into torchvision's vgg16().features
_VGG16_POOL2 = 9
_VGG16_POOL5 = 30


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    base_width: int = 64
    n_downsample: int = 2
    n_res_blocks: int = 6
    out_channels: int = 3

    def __post_init__(self):
        if self.base_width < 1 or self.n_downsample < 0 or self.n_res_blocks < 0:
            raise ConfigError(f"invalid generator spec: {self}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    base_width: int = 64
    n_strided_layers: int = 3
    scope: str = "global"

    def __post_init__(self):
        if self.scope not in ("global", "local"):
            raise ConfigError(f"discriminator scope must be 'global' or 'local', got {self.scope!r}")
        if self.base_width < 1 or self.n_strided_layers < 1:
            raise ConfigError(f"invalid discriminator spec: {self}")


class ResidualBlock(nn.Module):
    """x + f(x) with f = conv-IN-ReLU-conv-IN, reflection padded 3x3 convs."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels, affine=True),
        )

    @property
    def final_norm(self) -> nn.InstanceNorm2d:
        return self.body[-1]

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder / residual transformation / decoder generator.

    Input and output are (N, 3, H, W) tensors in [-1, 1]; H and W must be
    divisible by ``2 ** spec.n_downsample`` and at least twice that.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width

        encoder = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, w, kernel_size=7),
            nn.InstanceNorm2d(w, affine=True),
            nn.ReLU(inplace=True),
        ]
        for i in range(spec.n_downsample):
            c_in, c_out = w * 2**i, w * 2 ** (i + 1)
            encoder += [
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(c_out, affine=True),
                nn.ReLU(inplace=True),
            ]
        self.encoder = nn.Sequential(*encoder)

        width = w * 2**spec.n_downsample
        self.transform = nn.Sequential(*[ResidualBlock(width) for _ in range(spec.n_res_blocks)])

        decoder = []
        for i in range(spec.n_downsample, 0, -1):
            c_in, c_out = w * 2**i, w * 2 ** (i - 1)
            decoder += [
                nn.ConvTranspose2d(c_in, c_out, kernel_size=3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c_out, affine=True),
                nn.ReLU(inplace=True),
            ]
        decoder += [
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, spec.out_channels, kernel_size=7),
            nn.Tanh(),
        ]
        self.decoder = nn.Sequential(*decoder)

    @property
    def multiple(self) -> int:
        return 2**self.spec.n_downsample

    @property
    def final_conv(self) -> nn.Conv2d:
        return self.decoder[-2]

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if min(h, w) < 2 * self.multiple:
            raise ValueError(f"generator input {h}x{w} is too small; both sides must be at least {2 * self.multiple}")
        if h % self.multiple or w % self.multiple:
            raise ValueError(
                f"generator input spatial size {h}x{w} is not divisible by {self.multiple}; "
                "pad the image first"
            )

    def forward(self, x):
        self.check_input(x)
        return self.decoder(self.transform(self.encoder(x)))


def discriminator_layer_plan(spec: DiscriminatorSpec) -> list[tuple[int, int]]:
    """(kernel, stride) of every conv in the PatchGAN stack, input to output."""
    return [(4, 2)] * spec.n_strided_layers + [(4, 1), (4, 1)]


def receptive_field(layer_plan) -> int:
    """Receptive field of one output unit for a stack of (kernel, stride) convs."""
    field, jump = 1, 1
    for kernel, stride in layer_plan:
        field += (kernel - 1) * jump
        jump *= stride
    return field


def score_map_size(size: int, layer_plan, padding: int = 1) -> int:
    for kernel, stride in layer_plan:
        size = (size + 2 * padding - kernel) // stride + 1
    return size


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator returning a raw (N, 1, h, w) score map.

    Global and local discriminators share this layer plan; they differ only in
    what they are fed (whole images versus 64x64 crops).
    """

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [
            nn.Conv2d(spec.in_channels, w, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        c_in = w
        for i in range(1, spec.n_strided_layers):
            c_out = w * min(2**i, 8)
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                nn.InstanceNorm2d(c_out, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            c_in = c_out
        c_out = w * min(2**spec.n_strided_layers, 8)
        layers += [
            nn.Conv2d(c_in, c_out, kernel_size=4, stride=1, padding=1),
            nn.InstanceNorm2d(c_out, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c_out, 1, kernel_size=4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*layers)

    @property
    def receptive_field(self) -> int:
        return receptive_field(discriminator_layer_plan(self.spec))

    @property
    def min_input_size(self) -> int:
        plan = discriminator_layer_plan(self.spec)
        size = 1
        while score_map_size(size, plan) < 1:
            size += 1
        return size

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_input_size:
            raise ValueError(
                f"discriminator input {tuple(x.shape[-2:])} is too small: the score map would be "
                f"empty below {self.min_input_size}px (receptive field {self.receptive_field}px)"
            )
        return self.model(x)


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """N(0, 0.02) conv weights, zero biases, unit/zero norm affine. In place."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def param_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def default_vgg16_path() -> Path:
    env = os.environ.get(VGG16_WEIGHTS_ENV)
    return Path(env).expanduser() if env else VGG16_DEFAULT_PATH.expanduser()


def _vgg16_features() -> nn.Sequential:
    from torchvision.models import vgg16

    return vgg16(weights=None).features


def write_random_vgg16(path, seed: int = 0) -> Path:
    """Write a seeded, randomly initialised VGG-16 checkpoint.

    Stand-in for the ImageNet weights when they cannot be downloaded. The file
    uses torchvision's key layout, so the real checkpoint is a drop-in swap.
    """
    torch.manual_seed(seed)
    features = _vgg16_features()
    # torchvision's own VGG initialisation: He-normal (fan-out) weights, zero biases
    for m in features.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
    state = {f"features.{k}": v for k, v in features.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


class VGGFeatureExtractor(nn.Module):
    """Frozen VGG-16 returning the activations after pooling stages 2 and 5.

    Inputs are [-1, 1] images; they are mapped to [0, 1] and standardised with
    the ImageNet channel statistics before entering the backbone.
    """

    def __init__(self, weights_path=None):
        super().__init__()
        path = Path(weights_path).expanduser() if weights_path else default_vgg16_path()
        if not path.is_file():
            raise ConfigError(
                f"VGG-16 weights not found at {path}; download torchvision's vgg16-397923af.pth "
                f"there, set {VGG16_WEIGHTS_ENV}, or create a stand-in with `hazegan make-vgg`"
            )
        self.weights_path = path
        features = _vgg16_features()
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        features.load_state_dict(state)
        self.to_pool2 = features[: _VGG16_POOL2 + 1]
        self.to_pool5 = features[_VGG16_POOL2 + 1 : _VGG16_POOL5 + 1]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always inference mode
        return super().train(False)

    def preprocess(self, x):
        return ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def forward(self, x):
        x = self.preprocess(x)
        pool2 = self.to_pool2(x)
        pool5 = self.to_pool5(pool2)
        return pool2, pool5


def extract_features(fx: VGGFeatureExtractor, x):
    return fx(x)


__all__ = [
    "GeneratorSpec",
    "DiscriminatorSpec",
    "ResidualBlock",
    "Generator",
    "PatchDiscriminator",
    "VGGFeatureExtractor",
    "discriminator_layer_plan",
    "receptive_field",
    "score_map_size",
    "init_weights",
    "param_checksum",
    "write_random_vgg16",
    "default_vgg16_path",
    "extract_features",
]
