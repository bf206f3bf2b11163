"""Command-line entry point: ``hazegan {train,infer,eval,synth,ablate,make-vgg}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .errors import CheckpointError, ConfigError, DataError
from .imaging import (
    HazeParams,
    as_rng,
    denormalize,
    list_images,
    normalize,
    read_rgb,
    synthesize_haze,
    synthetic_depth,
    transmission_from_depth,
    write_png,
)
from .losses import LossWeights
from .metrics import evaluate_folder, format_table
from .networks import Generator, write_random_vgg16
from .training import ABLATION_ROWS, ABLATIONS, TrainConfig, ablation_config, load_checkpoint, train

log = logging.getLogger("hazegan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

_WEIGHT_KEYS = set(LossWeights.__dataclass_fields__)
_PATH_KEYS = {"data", "out", "resume"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict:
    """Flat key-value YAML or JSON mapping."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError(f"config file {path} must be a flat key-value mapping")
    return data


def resolve_config(file_values: dict, overrides: dict) -> tuple[TrainConfig, dict]:
    """Merge defaults < config file < CLI flags. Returns the config and the path keys."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    for k, v in overrides.items():
        if v is not None and k in file_values and file_values[k] != v:
            log.info("override %s: %r (file) -> %r (flag)", k, file_values[k], v)
    paths = {k: merged.pop(k) for k in list(merged) if k in _PATH_KEYS}
    weights = {k: merged.pop(k) for k in list(merged) if k in _WEIGHT_KEYS}
    try:
        cfg = TrainConfig.from_dict({**merged, "weights": LossWeights(**weights)})
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return cfg, paths


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _train_overrides(args) -> dict:
    o = {
        "data": args.data,
        "out": args.out,
        "epochs_total": args.epochs,
        "epochs_constant": args.epochs_constant,
        "lr_initial": args.lr,
        "seed": args.seed,
        "crop": args.crop,
        "batch_size": args.batch_size,
        "pool_size": args.pool_size,
        "gen_width": args.gen_width,
        "disc_width": args.disc_width,
        "vgg_weights": args.vgg_weights,
        "checkpoint_every": args.checkpoint_every,
    }
    if args.epochs is not None and args.epochs_constant is None:
        o["epochs_constant"] = args.epochs // 2
    for flag, key in (
        ("no_local_disc", "use_local_discriminators"),
        ("no_perceptual", "use_perceptual_loss"),
        ("no_color", "use_color_loss"),
        ("no_residual", "use_residual_blocks"),
    ):
        if getattr(args, flag, False):
            o[key] = False
    o.update(_parse_set(args.set))
    return o


def _add_train_flags(p):
    p.add_argument("--config", help="flat YAML/JSON file of config keys")
    p.add_argument("--data", help="dataset root with trainA/trainB (testA/testB for ablate)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int, help="total epochs (constant-lr phase defaults to half)")
    p.add_argument("--epochs-constant", type=int, help="epochs before linear lr decay starts")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--gen-width", type=int)
    p.add_argument("--disc-width", type=int)
    p.add_argument("--vgg-weights", help="path to VGG-16 weights (torchvision layout)")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="set any config key")


def _require(paths: dict, key: str):
    if not paths.get(key):
        raise UsageError(f"missing required setting --{key}")
    return Path(paths[key])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = _train_overrides(args)
    overrides["resume"] = args.resume
    cfg, paths = resolve_config(file_values, overrides)
    data, out = _require(paths, "data"), _require(paths, "out")

    def report(epoch, state):
        print(f"epoch {epoch + 1}/{cfg.epochs_total}  lr={state.lr:.3e}  mean generator loss={state.epoch_means[-1]:.4f}")

    final = train(cfg, data, out, resume=paths.get("resume"), on_epoch=report)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


@torch.no_grad()
def dehaze_raster(generator: Generator, raster: np.ndarray) -> np.ndarray:
    """Translate one 8-bit image of any size, reflect-padding to the generator's stride."""
    x, (h, w) = pad_to_multiple(normalize(raster), generator.multiple)
    y = generator(x)[..., :h, :w]
    return denormalize(y)


def load_generator(checkpoint) -> Generator:
    state = load_checkpoint(checkpoint)
    g = state.nets["g_a"]
    g.eval()
    return g


def run_inference(checkpoint, input_dir, output_dir) -> list[Path]:
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise DataError(f"input directory not found: {input_dir}")
    files = list_images(input_dir)
    if not files:
        log.warning("no images found in %s", input_dir)
        return []
    g = load_generator(checkpoint)
    written = []
    for path in files:
        out = output_dir / f"{path.stem}.png"
        write_png(out, dehaze_raster(g, read_rgb(path)))
        written.append(out)
    return written


def cmd_infer(args) -> int:
    written = run_inference(args.checkpoint, args.input, args.output)
    print(f"wrote {len(written)} image(s) to {args.output}")
    return EXIT_OK


def evaluate(pred_dir, gt_dir, ssim_mode="luma"):
    for d in (pred_dir, gt_dir):
        if not Path(d).is_dir():
            raise DataError(f"directory not found: {d}")
    try:
        return evaluate_folder(pred_dir, gt_dir, ssim_mode)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(args) -> int:
    report = evaluate(args.pred, args.gt, args.ssim_mode)
    if args.report:
        Path(args.report).write_text(report.to_jsonl())
    if report.unmatched:
        print(f"unmatched (excluded): {', '.join(report.unmatched)}")
    print(format_table([(Path(args.pred).name or str(args.pred), report.summary())]))
    return EXIT_OK


def synthesize_dataset(
    clean_dir, out_root, beta=1.0, airlight=0.9, seed=0, test_fraction=0.2, depth_range=(0.5, 2.0)
) -> dict:
    """Build trainA/trainB (unpaired) and testA/testB (paired) folders from clean images."""
    if beta < 0:
        raise UsageError("beta must be >= 0")
    if not 0 <= airlight <= 1:
        raise UsageError("atmospheric light must lie in [0, 1]")
    if not 0 <= test_fraction < 1:
        raise UsageError("test fraction must lie in [0, 1)")
    lo, hi = depth_range
    if not 0 <= lo <= hi:
        raise UsageError("depth range must satisfy 0 <= min <= max")
    clean_dir, out_root = Path(clean_dir), Path(out_root)
    if not clean_dir.is_dir():
        raise DataError(f"clean image directory not found: {clean_dir}")
    files = list_images(clean_dir)
    if not files:
        raise DataError(f"no images in {clean_dir}")
    rng = as_rng(seed)
    order = rng.permutation(len(files))
    n_test = int(round(len(files) * test_fraction))
    test_idx, train_idx = set(order[:n_test].tolist()), order[n_test:]

    counts = {"trainA": 0, "trainB": 0, "testA": 0, "testB": 0}
    shuffled_b = rng.permutation(len(train_idx))
    for i, path in enumerate(files):
        raw = read_rgb(path)
        depth = lo + (hi - lo) * synthetic_depth(*raw.shape[:2], rng)
        params = HazeParams(transmission_from_depth(depth, beta), airlight)
        hazy = denormalize(synthesize_haze(normalize(raw), params))
        split = "test" if i in test_idx else "train"
        write_png(out_root / f"{split}A" / f"{path.stem}.png", hazy)
        counts[f"{split}A"] += 1
        if split == "test":
            write_png(out_root / "testB" / f"{path.stem}.png", raw)
            counts["testB"] += 1
    # clean training images under anonymous shuffled names
    for new_id, j in enumerate(shuffled_b):
        write_png(out_root / "trainB" / f"b{new_id:05d}.png", read_rgb(files[train_idx[j]]))
        counts["trainB"] += 1
    meta = {"seed": seed, "beta": beta, "atmospheric_light": airlight, "depth_range": [lo, hi], **counts}
    (out_root / "synth.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def cmd_synth(args) -> int:
    meta = synthesize_dataset(
        args.clean, args.out, args.beta, args.airlight, args.seed, args.test_fraction, tuple(args.depth_range)
    )
    print(json.dumps(meta))
    return EXIT_OK


def run_ablation(cfg: TrainConfig, data, out, only=None) -> list[tuple[str, dict | None]]:
    names = list(only) if only else list(ABLATION_ROWS)
    for name in names:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    data, out = Path(data), Path(out)
    rows = []
    for name in names:
        run_dir = out / name.replace("/", "_")
        try:
            final = train(ablation_config(cfg, name), data, run_dir / "train")
            run_inference(final, data / "testA", run_dir / "pred")
            rows.append((name, evaluate(run_dir / "pred", data / "testB").summary()))
        except Exception:
            log.exception("ablation %s failed", name)
            rows.append((name, None))
    return rows


def cmd_ablate(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cfg, paths = resolve_config(file_values, _train_overrides(args))
    rows = run_ablation(cfg, _require(paths, "data"), _require(paths, "out"), args.only)
    table = format_table(rows)
    (Path(paths["out"]) / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK if all(s is not None for _, s in rows) else EXIT_RUNTIME


def cmd_make_vgg(args) -> int:
    path = write_random_vgg16(args.path, args.seed)
    print(f"wrote randomly initialised VGG-16 stand-in to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hazegan", description="Unpaired single-image dehazing with global-local cycle GANs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    _add_train_flags(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--no-local-disc", action="store_true", help="drop local discriminators and local terms")
    t.add_argument("--no-perceptual", action="store_true", help="drop cyclic perceptual loss")
    t.add_argument("--no-color", action="store_true", help="drop colour loss")
    t.add_argument("--no-residual", action="store_true", help="generator without residual blocks")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="dehaze a folder with G_A")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR / SSIM / CIEDE2000 against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--ssim-mode", choices=("luma", "rgb"), default="luma")
    e.add_argument("--report", help="write per-image JSON lines here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="synthesise a hazy dataset from clean images")
    s.add_argument("--clean", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--beta", type=float, default=1.0, help="scattering coefficient")
    s.add_argument("--airlight", type=float, default=0.9, help="atmospheric light A in [0, 1]")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--depth-range", type=float, nargs=2, default=(0.5, 2.0), metavar=("MIN", "MAX"))
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="run the ablation settings and tabulate test metrics")
    _add_train_flags(a)
    a.add_argument("--only", action="append", help=f"run a subset; one of {', '.join(ABLATIONS)}")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("make-vgg", help="write a random VGG-16 stand-in checkpoint (offline use)")
    v.add_argument("path")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_make_vgg)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
