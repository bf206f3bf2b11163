"""Training objectives: LSGAN adversarial terms, cycle consistency, colour loss,
cyclic perceptual loss and their weighted total."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError

TERMS = (
    "gan_global",
    "gan_local",
    "cycle_global",
    "cycle_local",
    "cp_global",
    "cp_local",
    "color_global",
    "color_local",
)

COLOR_BLUR_KERNEL = 21
COLOR_BLUR_SIGMA = 3.0
FEATURE_NORM_EPS = 1e-5


def _require_nonempty(t: torch.Tensor, what: str) -> None:
    if t.numel() == 0:
        raise ValueError(f"{what} is empty")


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """E[(D(real) - 1)^2] + E[D(fake)^2], expectations as means over all units."""
    _require_nonempty(real_scores, "real score map")
    _require_nonempty(fake_scores, "fake score map")
    return (real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    _require_nonempty(fake_scores, "fake score map")
    return (fake_scores - 1).pow(2).mean()


def cycle_loss(x, x_reconstructed, y, y_reconstructed) -> torch.Tensor:
    """Per-element mean L1 error of both reconstructions, summed."""
    for a, b in ((x, x_reconstructed), (y, y_reconstructed)):
        if a.shape != b.shape:
            raise ValueError(f"cycle loss shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (x_reconstructed - x).abs().mean() + (y_reconstructed - y).abs().mean()


def gaussian_kernel1d(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"blur kernel size must be a positive odd integer, got {size}")
    if sigma <= 0:
        raise ValueError("blur sigma must be positive")
    r = torch.arange(size, dtype=torch.float64) - size // 2
    k = torch.exp(-(r**2) / (2 * sigma**2))
    return (k / k.sum()).to(dtype)


def gaussian_blur(img: torch.Tensor, size: int = COLOR_BLUR_KERNEL, sigma: float = COLOR_BLUR_SIGMA) -> torch.Tensor:
    """Separable, unit-sum Gaussian blur per channel with reflection borders."""
    k = gaussian_kernel1d(size, sigma, img.dtype).to(img.device)
    c = img.shape[1]
    pad = size // 2
    out = F.pad(img, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(out, k.view(1, 1, 1, size).expand(c, 1, 1, size), groups=c)
    out = F.conv2d(out, k.view(1, 1, size, 1).expand(c, 1, size, 1), groups=c)
    return out


def color_loss(a, b, blur_kernel: int = COLOR_BLUR_KERNEL, blur_sigma: float = COLOR_BLUR_SIGMA) -> torch.Tensor:
    """Mean squared difference between Gaussian-blurred images."""
    if a.shape != b.shape:
        raise ValueError(f"color loss shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (gaussian_blur(a, blur_kernel, blur_sigma) - gaussian_blur(b, blur_kernel, blur_sigma)).pow(2).mean()


def _feature_distance(fa: torch.Tensor, fb: torch.Tensor, channels: str) -> torch.Tensor:
    # squared distance of instance-normalised maps, averaged over space
    if fa.shape[-1] * fa.shape[-2] == 1:
        # instance norm of a single spatial element is identically zero
        return fa.new_zeros(())
    na = F.instance_norm(fa, eps=FEATURE_NORM_EPS)
    nb = F.instance_norm(fb, eps=FEATURE_NORM_EPS)
    sq = (na - nb).pow(2)
    if channels == "sum":
        return sq.sum(dim=1).mean()
    if channels == "mean":
        return sq.mean()
    raise ValueError(f"channel reduction must be 'sum' or 'mean', got {channels!r}")


def cyclic_perceptual_loss(fx, original: torch.Tensor, generated: torch.Tensor, channels: str = "mean") -> torch.Tensor:
    """Feature distance at the pool2 and pool5 taps of the frozen extractor.

    Each tap contributes the squared difference of instance-normalised
    feature maps averaged over W x H; ``channels`` selects whether the
    channel axis is summed (the literal per-map formula) or averaged.
    """
    if original.shape != generated.shape:
        raise ValueError(f"perceptual loss shape mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}")
    feats_o = fx(original)
    feats_g = fx(generated)
    return sum(_feature_distance(o, g, channels) for o, g in zip(feats_o, feats_g))


@dataclass(frozen=True)
class LossWeights:
    w_gan_global: float = 1.0
    w_gan_local: float = 1.0
    w_cycle_global: float = 1.0
    w_cycle_local: float = 1.0
    w_cp_global: float = 1.0
    w_cp_local: float = 1.0
    w_color_global: float = 1.0
    w_color_local: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"loss weight {f.name} must be a finite non-negative number, got {v}")

    def of(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclass
class LossReport:
    """Scalar readout of one training step.

    ``generator`` maps every term name to its value, or None when the term is
    disabled. ``discriminator`` holds the LSGAN losses of each active
    discriminator.
    """

    generator: dict[str, float | None]
    total: float
    discriminator: dict[str, float | None] = field(default_factory=dict)
    step: int | None = None

    def active_terms(self) -> dict[str, float]:
        return {k: v for k, v in self.generator.items() if v is not None}

    def to_record(self) -> dict:
        return asdict(self)


def combine(components: dict, weights: LossWeights):
    """Weighted sum of the active (non-None) components; works on tensors or floats."""
    missing = [t for t in TERMS if t not in components]
    if missing:
        raise ValueError(f"missing loss components: {missing}; pass None for disabled terms")
    total = 0.0
    for term in TERMS:
        value = components[term]
        if value is not None:
            total = total + weights.of(term) * value
    return total


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> LossReport:
    total = combine(components, weights)
    as_float = {t: (None if v is None else float(v)) for t, v in components.items() if t in TERMS}
    return LossReport(generator=as_float, total=float(total))
