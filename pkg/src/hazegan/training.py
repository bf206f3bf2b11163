"""Adversarial training over the two-generator, four-discriminator topology.

One step translates hazy -> clean with G_A and clean -> hazy with G_B, updates
both generators on the weighted generator objective, then updates every
active discriminator on pooled fakes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .imaging import UnpairedDataset, UnpairedSample, crop_at, random_offsets
from .losses import (
    LossReport,
    LossWeights,
    TERMS,
    color_loss,
    combine,
    cycle_loss,
    cyclic_perceptual_loss,
    lsgan_d_loss,
    lsgan_g_loss,
)
from .networks import (
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    PatchDiscriminator,
    VGGFeatureExtractor,
    init_weights,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_MAGIC = b"HAZEGAN-CHECKPOINT\n"

GENERATORS = ("g_a", "g_b")
DISCRIMINATORS = ("d_a_global", "d_a_local", "d_b_global", "d_b_local")


@dataclass(frozen=True)
class TrainConfig:
    epochs_total: int = 200
    epochs_constant: int = 100
    lr_initial: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    pool_size: int = 50
    seed: int = 0
    use_local_discriminators: bool = True
    use_perceptual_loss: bool = True
    use_color_loss: bool = True
    use_residual_blocks: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    crop: int = 256
    flip: bool = True
    local_patches: int = 5
    local_patch_size: int = 64
    gen_width: int = 64
    disc_width: int = 64
    n_res_blocks: int = 6
    color_blur_kernel: int = 21
    color_blur_sigma: float = 3.0
    # "self": CP(input, translated); "cycle": CP(input, reconstructed)
    perceptual_mode: str = "self"
    perceptual_channels: str = "mean"
    vgg_weights: str | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if not 0 <= self.epochs_constant <= self.epochs_total or self.epochs_total < 1:
            raise ConfigError("need 0 <= epochs_constant <= epochs_total and epochs_total >= 1")
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pool_size < 0:
            raise ConfigError("pool_size must be >= 0")
        if self.perceptual_mode not in ("self", "cycle"):
            raise ConfigError("perceptual_mode must be 'self' or 'cycle'")
        if self.perceptual_channels not in ("sum", "mean"):
            raise ConfigError("perceptual_channels must be 'sum' or 'mean'")
        if self.local_patches < 1 or self.local_patch_size < 1:
            raise ConfigError("local_patches and local_patch_size must be positive")
        if self.color_blur_kernel % 2 == 0:
            raise ConfigError("color_blur_kernel must be odd")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            base_width=self.gen_width, n_res_blocks=self.n_res_blocks if self.use_residual_blocks else 0
        )

    def discriminator_spec(self, scope: str) -> DiscriminatorSpec:
        return DiscriminatorSpec(base_width=self.disc_width, scope=scope)


# ablation settings, keyed by CLI name
ABLATIONS = {
    "cyclegan": dict(use_local_discriminators=False, use_perceptual_loss=False, use_color_loss=False),
    "w/o-color-loss": dict(use_color_loss=False),
    "w/o-perceptual-loss": dict(use_perceptual_loss=False),
    "w/o-residual-blocks": dict(use_residual_blocks=False),
    "w/o-local-discriminator": dict(use_local_discriminators=False),
    "full": {},
}
# rows run by default, in table order
ABLATION_ROWS = ("w/o-color-loss", "w/o-perceptual-loss", "w/o-residual-blocks", "w/o-local-discriminator", "full")


def ablation_config(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    base = cfg.replace(
        use_local_discriminators=True, use_perceptual_loss=True, use_color_loss=True, use_residual_blocks=True
    )
    return base.replace(**ABLATIONS[name])


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Constant for ``epochs_constant`` epochs, then linear decay to zero at ``epochs_total``."""
    if not 0 <= epoch < cfg.epochs_total:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs_total})")
    if epoch < cfg.epochs_constant:
        return cfg.lr_initial
    frac = (epoch - cfg.epochs_constant) / (cfg.epochs_total - cfg.epochs_constant)
    return cfg.lr_initial * (1.0 - frac)


class ImagePool:
    """History buffer of generated images fed to the discriminators."""

    def __init__(self, capacity: int = 50):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []

    def __len__(self):
        return len(self.images)

    def query(self, fake: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.capacity == 0:
            return fake
        out = []
        for img in fake.detach():
            img = img.unsqueeze(0).clone()
            if len(self.images) < self.capacity:
                self.images.append(img)
                out.append(img)
            elif rng.random() < 0.5:
                out.append(img)
            else:
                idx = int(rng.integers(0, self.capacity))
                out.append(self.images[idx])
                self.images[idx] = img
        return torch.cat(out, dim=0)


def query_pool(pool: ImagePool, fake: torch.Tensor, rng) -> torch.Tensor:
    return pool.query(fake, rng)


class TrainState:
    """Networks, optimisers, pools, RNG and counters of one training run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.epoch = 0
        self.global_step = 0
        self.epoch_means: list[float] = []
        self.rng = np.random.default_rng(cfg.seed)

        gspec = cfg.generator_spec
        self.nets: dict[str, torch.nn.Module] = {
            "g_a": init_weights(Generator(gspec), cfg.seed * 16 + 1),
            "g_b": init_weights(Generator(gspec), cfg.seed * 16 + 2),
        }
        for i, name in enumerate(DISCRIMINATORS):
            scope = name.rsplit("_", 1)[1]
            self.nets[name] = init_weights(PatchDiscriminator(cfg.discriminator_spec(scope)), cfg.seed * 16 + 3 + i)

        betas = (cfg.adam_beta1, cfg.adam_beta2)
        g_params = list(self.nets["g_a"].parameters()) + list(self.nets["g_b"].parameters())
        self.optimizers = {"g": torch.optim.Adam(g_params, lr=cfg.lr_initial, betas=betas)}
        for name in DISCRIMINATORS:
            self.optimizers[name] = torch.optim.Adam(self.nets[name].parameters(), lr=cfg.lr_initial, betas=betas)
        self.pools = {"a": ImagePool(cfg.pool_size), "b": ImagePool(cfg.pool_size)}
        self._fx = None

    def __getattr__(self, name):
        nets = self.__dict__.get("nets", {})
        if name in nets:
            return nets[name]
        raise AttributeError(name)

    @property
    def fx(self) -> VGGFeatureExtractor:
        if self._fx is None:
            self._fx = VGGFeatureExtractor(self.cfg.vgg_weights)
        return self._fx

    @fx.setter
    def fx(self, value):
        self._fx = value

    def active_discriminators(self) -> tuple[str, ...]:
        if self.cfg.use_local_discriminators:
            return DISCRIMINATORS
        return ("d_a_global", "d_b_global")

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    @property
    def lr(self) -> float:
        return self.optimizers["g"].param_groups[0]["lr"]


def build_state(cfg: TrainConfig) -> TrainState:
    return TrainState(cfg)


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _check_finite(terms: dict, where: str) -> None:
    bad = {k: v for k, v in terms.items() if v is not None and not math.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"non-finite {where} loss terms: {bad}; all terms: {terms}", terms)


def _crops(img, offsets, size):
    return crop_at(img, offsets, size).stacked()


def generator_losses(state: TrainState, hazy, clean, rng) -> tuple[dict, dict]:
    """Forward both cycles and compute every generator-side term (None when disabled)."""
    cfg = state.cfg
    n = state.nets
    fake_b = n["g_a"](hazy)
    fake_a = n["g_b"](clean)
    rec_a = n["g_b"](fake_b)
    rec_b = n["g_a"](fake_a)

    comps = dict.fromkeys(TERMS)
    comps["gan_global"] = lsgan_g_loss(n["d_b_global"](fake_b)) + lsgan_g_loss(n["d_a_global"](fake_a))
    comps["cycle_global"] = cycle_loss(hazy, rec_a, clean, rec_b)

    cp_a, cp_b = (fake_b, fake_a) if cfg.perceptual_mode == "self" else (rec_a, rec_b)

    def cp(original, generated):
        return cyclic_perceptual_loss(state.fx, original, generated, cfg.perceptual_channels)

    if cfg.use_perceptual_loss:
        comps["cp_global"] = cp(hazy, cp_a) + cp(clean, cp_b)
    if cfg.use_color_loss:
        comps["color_global"] = color_loss(fake_b, clean, cfg.color_blur_kernel, cfg.color_blur_sigma)

    if cfg.use_local_discriminators:
        size, k = cfg.local_patch_size, cfg.local_patches
        # offsets shared by every image of a pair
        off_a = random_offsets(*hazy.shape[-2:], k, size, rng)
        off_b = random_offsets(*clean.shape[-2:], k, size, rng)
        fake_b_p, fake_a_p = _crops(fake_b, off_a, size), _crops(fake_a, off_b, size)
        hazy_p, clean_p = _crops(hazy, off_a, size), _crops(clean, off_b, size)
        comps["gan_local"] = lsgan_g_loss(n["d_b_local"](fake_b_p)) + lsgan_g_loss(n["d_a_local"](fake_a_p))
        comps["cycle_local"] = cycle_loss(hazy_p, _crops(rec_a, off_a, size), clean_p, _crops(rec_b, off_b, size))
        if cfg.use_perceptual_loss:
            comps["cp_local"] = cp(hazy_p, _crops(cp_a, off_a, size)) + cp(clean_p, _crops(cp_b, off_b, size))
        if cfg.use_color_loss:
            comps["color_local"] = color_loss(
                fake_b_p, _crops(clean, off_a, size), cfg.color_blur_kernel, cfg.color_blur_sigma
            )
    fakes = {"fake_a": fake_a, "fake_b": fake_b, "rec_a": rec_a, "rec_b": rec_b}
    return comps, fakes


def _d_loss(disc, real, fake):
    return lsgan_d_loss(disc(real), disc(fake))


def train_step(state: TrainState, sample: UnpairedSample, cfg: TrainConfig | None = None) -> tuple[TrainState, LossReport]:
    """One generator update followed by one update per active discriminator."""
    if cfg is not None and cfg != state.cfg:
        raise ConfigError("train_step config differs from the state's config")
    cfg = state.cfg
    rng = state.rng
    n = state.nets
    hazy, clean = sample.hazy, sample.clean
    for m in n.values():
        m.train()

    discs = [n[d] for d in DISCRIMINATORS]
    _set_requires_grad(discs, False)
    comps, fakes = generator_losses(state, hazy, clean, rng)
    values = {k: (None if v is None else float(v.detach())) for k, v in comps.items()}
    _check_finite(values, "generator")
    total = combine(comps, cfg.weights)
    state.optimizers["g"].zero_grad(set_to_none=True)
    total.backward()
    state.optimizers["g"].step()
    _set_requires_grad(discs, True)

    pooled_b = state.pools["b"].query(fakes["fake_b"], rng)
    pooled_a = state.pools["a"].query(fakes["fake_a"], rng)
    d_losses = {
        "d_a_global": lambda: _d_loss(n["d_a_global"], hazy, pooled_a),
        "d_b_global": lambda: _d_loss(n["d_b_global"], clean, pooled_b),
    }
    if cfg.use_local_discriminators:
        size, k = cfg.local_patch_size, cfg.local_patches

        def local(disc, real, fake):
            real_p = _crops(real, random_offsets(*real.shape[-2:], k, size, rng), size)
            fake_p = _crops(fake, random_offsets(*fake.shape[-2:], k, size, rng), size)
            return _d_loss(disc, real_p, fake_p)

        d_losses["d_a_local"] = lambda: local(n["d_a_local"], hazy, pooled_a)
        d_losses["d_b_local"] = lambda: local(n["d_b_local"], clean, pooled_b)

    d_values = dict.fromkeys(DISCRIMINATORS)
    for name in DISCRIMINATORS:
        if name not in d_losses:
            continue
        loss = d_losses[name]()
        d_values[name] = float(loss.detach())
        _check_finite({name: d_values[name]}, "discriminator")
        opt = state.optimizers[name]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    state.global_step += 1
    report = LossReport(generator=values, total=float(total.detach()), discriminator=d_values, step=state.global_step)
    return state, report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _state_payload(state: TrainState) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "epoch_means": list(state.epoch_means),
        "models": {k: m.state_dict() for k, m in state.nets.items()},
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "rng": json.dumps(state.rng.bit_generator.state),
        "pools": {k: list(p.images) for k, p in state.pools.items()},
    }


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a single-file checkpoint: magic line, sha256 of the body, torch-serialised body."""
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    body = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(hashlib.sha256(body).hexdigest().encode() + b"\n")
        f.write(body)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    rest = raw[len(_MAGIC):]
    digest, sep, body = rest.partition(b"\n")
    if not sep or hashlib.sha256(body).hexdigest().encode() != digest:
        raise CheckpointError(f"checkpoint {path} failed its integrity check (truncated or corrupt)")
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}; this build reads {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path, vgg_weights: str | None = None) -> TrainState:
    payload = read_checkpoint(path)
    cfg_dict = dict(payload["config"])
    if vgg_weights is not None:
        cfg_dict["vgg_weights"] = vgg_weights
    cfg = TrainConfig.from_dict(cfg_dict)
    state = TrainState(cfg)
    try:
        for k, m in state.nets.items():
            m.load_state_dict(payload["models"][k])
        for k, o in state.optimizers.items():
            o.load_state_dict(payload["optimizers"][k])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match the configured architecture: {exc}") from exc
    state.epoch = payload["epoch"]
    state.global_step = payload["global_step"]
    state.epoch_means = list(payload["epoch_means"])
    state.rng.bit_generator.state = json.loads(payload["rng"])
    for k, images in payload["pools"].items():
        state.pools[k].images = list(images)
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batches(samples, batch_size: int):
    batch = []
    for s in samples:
        batch.append(s)
        if len(batch) == batch_size:
            yield _stack(batch)
            batch = []
    if batch:
        yield _stack(batch)


def _stack(batch: list[UnpairedSample]) -> UnpairedSample:
    if len(batch) == 1:
        return batch[0]
    return UnpairedSample(torch.cat([s.hazy for s in batch]), torch.cat([s.clean for s in batch]))


def write_run_metadata(cfg: TrainConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "config_sha256": cfg.digest(), "code_version": __version__, "pool_size": cfg.pool_size}
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def train(cfg: TrainConfig, data_root, out_dir, resume=None, on_epoch=None, fx=None) -> Path:
    """Train to ``cfg.epochs_total`` and return the final checkpoint path.

    Checkpoints are written every ``cfg.checkpoint_every`` epochs as
    ``epoch_XXXX.ckpt`` plus ``latest.ckpt``; per-step loss records go to
    ``losses.jsonl``. ``resume`` may name a checkpoint to continue from.
    """
    out_dir = Path(out_dir)
    dataset = UnpairedDataset(data_root, "train", cfg.crop, cfg.flip)
    if resume is not None:
        state = load_checkpoint(resume, vgg_weights=cfg.vgg_weights)
        if state.cfg.replace(vgg_weights=None) != cfg.replace(vgg_weights=None):
            log.warning("resuming with the checkpoint's stored config; the supplied config differs")
        cfg = state.cfg
    else:
        state = build_state(cfg)
    if fx is not None:
        state.fx = fx
    write_run_metadata(cfg, out_dir)
    log_path = out_dir / "losses.jsonl"

    with open(log_path, "a") as log_file:
        for epoch in range(state.epoch, cfg.epochs_total):
            state.set_lr(lr_schedule(cfg, epoch))
            totals = []
            for sample in _batches(dataset.epoch(state.rng), cfg.batch_size):
                state, report = train_step(state, sample)
                totals.append(report.total)
                log_file.write(json.dumps({"epoch": epoch, "lr": state.lr, **report.to_record()}) + "\n")
            log_file.flush()
            state.epoch = epoch + 1
            state.epoch_means.append(float(np.mean(totals)) if totals else math.nan)
            if on_epoch is not None:
                on_epoch(epoch, state)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs_total:
                save_checkpoint(state, out_dir / f"epoch_{state.epoch:04d}.ckpt")
                save_checkpoint(state, out_dir / "latest.ckpt")
    final = out_dir / "final.ckpt"
    save_checkpoint(state, final)
    return final
