import json

import numpy as np
import pytest
import torch

from hazegan.errors import CheckpointError, ConfigError, NonFiniteLossError
from hazegan.imaging import UnpairedSample, normalize
from hazegan.losses import LossWeights, cycle_loss
from hazegan.networks import param_checksum
from hazegan.training import (
    ABLATION_ROWS,
    ABLATIONS,
    DISCRIMINATORS,
    ImagePool,
    TrainConfig,
    ablation_config,
    build_state,
    generator_losses,
    load_checkpoint,
    lr_schedule,
    read_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
from scenes import make_scene, write_scenes


def _sample(seed, size=64):
    rng = np.random.default_rng(seed)
    return UnpairedSample(normalize(make_scene(size, rng)), normalize(make_scene(size, rng)))


def _run(state, n, offset=0):
    return [train_step(state, _sample(offset + i))[1] for i in range(n)]


def _checksums(state, names):
    return {n: param_checksum(state.nets[n]) for n in names}


class TestSchedule:
    cfg = TrainConfig()

    @pytest.mark.parametrize("epoch, lr", [(0, 2e-4), (50, 2e-4), (99, 2e-4), (100, 2e-4), (150, 1e-4), (199, 2e-6)])
    def test_values(self, epoch, lr):
        assert lr_schedule(self.cfg, epoch) == pytest.approx(lr, rel=1e-12)

    @pytest.mark.parametrize("epoch", [-1, 200])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError):
            lr_schedule(self.cfg, epoch)

    def test_nonincreasing_and_continuous(self):
        lrs = [lr_schedule(self.cfg, e) for e in range(200)]
        steps = np.diff(lrs)
        assert (steps <= 0).all()
        assert np.max(np.abs(steps)) <= 2e-6 + 1e-18

    def test_all_constant(self):
        cfg = TrainConfig(epochs_total=3, epochs_constant=3)
        assert [lr_schedule(cfg, e) for e in range(3)] == [2e-4] * 3


class TestImagePool:
    def test_first_query_stores(self):
        pool = ImagePool(50)
        x = torch.randn(1, 3, 8, 8)
        out = pool.query(x, np.random.default_rng(0))
        assert len(pool) == 1
        assert torch.equal(out, x)

    def test_never_exceeds_capacity(self):
        pool, rng = ImagePool(4), np.random.default_rng(0)
        for _ in range(20):
            pool.query(torch.randn(1, 3, 4, 4), rng)
            assert len(pool) <= 4
        assert len(pool) == 4

    def test_half_new_half_history(self):
        pool, rng = ImagePool(1), np.random.default_rng(123)
        pool.query(torch.full((1, 1, 1, 1), -1.0), rng)
        fresh = 0
        trials = 10_000
        for i in range(trials):
            x = torch.full((1, 1, 1, 1), float(i))
            fresh += int(pool.query(x, rng).item() == i)
        assert abs(fresh / trials - 0.5) <= 0.02

    def test_returned_history_is_replaced(self):
        pool, rng = ImagePool(1), np.random.default_rng(1)
        pool.query(torch.zeros(1, 1, 1, 1), rng)
        for i in range(1, 50):
            out = pool.query(torch.full((1, 1, 1, 1), float(i)), rng).item()
            if out != i:
                assert pool.images[0].item() == i
                break
        else:
            pytest.fail("history never returned")

    def test_capacity_zero_passthrough(self):
        pool = ImagePool(0)
        x = torch.randn(2, 3, 4, 4)
        assert pool.query(x, np.random.default_rng(0)) is x
        assert len(pool) == 0


class TestConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            dict(epochs_constant=300),
            dict(epochs_total=0, epochs_constant=0),
            dict(lr_initial=0),
            dict(batch_size=0),
            dict(pool_size=-1),
            dict(perceptual_mode="both"),
            dict(perceptual_channels="max"),
            dict(color_blur_kernel=20),
            dict(weights={"w_cp_global": -1.0}),
        ],
    )
    def test_rejected(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    def test_dict_round_trip(self):
        cfg = TrainConfig(seed=7, weights=LossWeights(w_color_local=0.5))
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg
        assert again.digest() == cfg.digest()

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr_initial, cfg.adam_beta1, cfg.pool_size, cfg.epochs_total, cfg.epochs_constant) == (2e-4, 0.5, 50, 200, 100)
        assert all(cfg.weights.of(t) == 1.0 for t in ("gan_global", "cp_local"))


class TestAblations:
    def test_rows(self):
        assert ABLATION_ROWS == (
            "w/o-color-loss",
            "w/o-perceptual-loss",
            "w/o-residual-blocks",
            "w/o-local-discriminator",
            "full",
        )

    @pytest.mark.parametrize("name", list(ABLATIONS))
    def test_each_disables_only_its_component(self, name):
        cfg = ablation_config(TrainConfig(use_color_loss=False), name)
        flags = {
            "w/o-color-loss": "use_color_loss",
            "w/o-perceptual-loss": "use_perceptual_loss",
            "w/o-residual-blocks": "use_residual_blocks",
            "w/o-local-discriminator": "use_local_discriminators",
        }
        off = {flags[name]} if name in flags else set()
        if name == "cyclegan":
            off = {"use_color_loss", "use_perceptual_loss", "use_local_discriminators"}
        for flag in flags.values():
            assert getattr(cfg, flag) == (flag not in off)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            ablation_config(TrainConfig(), "w/o-everything")

    def test_no_residual_blocks(self):
        cfg = ablation_config(TrainConfig(), "w/o-residual-blocks")
        assert cfg.generator_spec.n_res_blocks == 0


class TestTrainStep:
    def test_reports_every_active_term(self, tiny_cfg):
        state = build_state(tiny_cfg)
        _, report = train_step(state, _sample(0))
        assert set(report.active_terms()) == set(report.generator)
        assert all(np.isfinite(v) for v in report.active_terms().values())
        assert all(report.discriminator[d] is not None for d in DISCRIMINATORS)
        assert report.step == state.global_step == 1

    @pytest.mark.parametrize(
        "flag, terms",
        [
            ("use_color_loss", {"color_global", "color_local"}),
            ("use_perceptual_loss", {"cp_global", "cp_local"}),
            ("use_local_discriminators", {"gan_local", "cycle_local", "cp_local", "color_local"}),
        ],
    )
    def test_ablated_terms_absent(self, tiny_cfg, flag, terms):
        state = build_state(tiny_cfg.replace(**{flag: False}))
        _, report = train_step(state, _sample(0))
        assert {k for k, v in report.generator.items() if v is None} == terms

    def test_local_disabled_freezes_local_discriminators(self, tiny_cfg):
        state = build_state(tiny_cfg.replace(use_local_discriminators=False))
        local = ("d_a_local", "d_b_local")
        before = _checksums(state, local)
        global_before = _checksums(state, ("d_a_global", "d_b_global"))
        reports = _run(state, 3)
        assert _checksums(state, local) == before
        assert _checksums(state, ("d_a_global", "d_b_global")) != global_before
        assert all(r.discriminator["d_a_local"] is None for r in reports)

    def test_phase_isolation(self, tiny_cfg):
        state = build_state(tiny_cfg)
        gens, discs = ("g_a", "g_b"), DISCRIMINATORS
        seen = {}
        opt_g = state.optimizers["g"]
        original_step = opt_g.step

        def watched_step(*args, **kwargs):
            seen["discs_before_g_step"] = _checksums(state, discs)
            out = original_step(*args, **kwargs)
            seen["gens_after_g_step"] = _checksums(state, gens)
            return out

        opt_g.step = watched_step
        start = _checksums(state, discs)
        train_step(state, _sample(0))
        # the generator phase leaves the discriminators untouched
        assert seen["discs_before_g_step"] == start
        # the discriminator phase leaves the generators untouched
        assert _checksums(state, gens) == seen["gens_after_g_step"]
        assert _checksums(state, discs) != start

    def test_extractor_frozen(self, tiny_cfg):
        state = build_state(tiny_cfg)
        before = param_checksum(state.fx)
        _run(state, 2)
        assert param_checksum(state.fx) == before
        assert all(p.grad is None for p in state.fx.parameters())

    def test_local_offsets_shared_across_pair(self, tiny_cfg, monkeypatch):
        import hazegan.training as tr

        calls = []
        real = tr.crop_at

        def spy(img, offsets, size):
            calls.append((img.data_ptr(), tuple(offsets)))
            return real(img, offsets, size)

        monkeypatch.setattr(tr, "crop_at", spy)
        state = build_state(tiny_cfg)
        s = _sample(0)
        comps, fakes = generator_losses(state, s.hazy, s.clean, np.random.default_rng(0))
        by_ptr = {}
        for ptr, off in calls:
            by_ptr.setdefault(ptr, set()).add(off)
        off_hazy = by_ptr[s.hazy.data_ptr()]
        off_clean = by_ptr[s.clean.data_ptr()] - off_hazy
        assert len(off_hazy) == 1 and len(off_clean) == 1
        # the clean image is also cut at the hazy offsets for the local colour term
        assert by_ptr[s.clean.data_ptr()] == off_hazy | off_clean
        # the hazy image's translation and reconstruction are cut at the hazy offsets
        for key in ("fake_b", "rec_a"):
            assert by_ptr[fakes[key].data_ptr()] == off_hazy
        for key in ("fake_a", "rec_b"):
            assert by_ptr[fakes[key].data_ptr()] == off_clean

    def test_deterministic(self, tiny_cfg):
        a = _run(build_state(tiny_cfg), 10)
        b = _run(build_state(tiny_cfg), 10)
        assert [r.to_record() for r in a] == [r.to_record() for r in b]

    def test_seed_matters(self, tiny_cfg):
        a = _run(build_state(tiny_cfg), 1)
        b = _run(build_state(tiny_cfg.replace(seed=4)), 1)
        assert a[0].total != b[0].total

    def test_nan_input(self, tiny_cfg):
        state = build_state(tiny_cfg)
        s = _sample(0)
        bad = UnpairedSample(torch.full_like(s.hazy, float("nan")), s.clean)
        before = _checksums(state, ("g_a", "g_b"))
        with pytest.raises(NonFiniteLossError) as exc:
            train_step(state, bad)
        assert exc.value.terms["cycle_global"] != exc.value.terms["cycle_global"]
        assert _checksums(state, ("g_a", "g_b")) == before

    def test_mismatched_config(self, tiny_cfg):
        state = build_state(tiny_cfg)
        with pytest.raises(ConfigError):
            train_step(state, _sample(0), tiny_cfg.replace(seed=99))


def _cycle_only(cfg):
    weights = {f"w_{t}": 0.0 for t in ("gan_global", "gan_local", "cp_global", "cp_local", "color_global", "color_local")}
    return cfg.replace(
        use_perceptual_loss=False,
        use_color_loss=False,
        use_local_discriminators=False,
        weights=LossWeights(**weights),
    )


def test_cycle_only_step_descends(tiny_cfg):
    state = build_state(_cycle_only(tiny_cfg))
    s = _sample(0, size=32)
    g = [state.g_a, state.g_b]

    def cycle_value():
        with torch.no_grad():
            return float(cycle_loss(s.hazy, state.g_b(state.g_a(s.hazy)), s.clean, state.g_a(state.g_b(s.clean))))

    for m in g:
        m.train()
    params = [p for m in g for p in m.parameters()]
    before_params = [p.detach().clone() for p in params]
    before = cycle_value()
    train_step(state, s)
    after = cycle_value()
    assert after < before

    # the applied update is a descent direction by central differences along it
    delta = [p.detach() - q for p, q in zip(params, before_params)]
    eps = 1e-3
    values = []
    for sign in (1, -1):
        with torch.no_grad():
            for p, q, d in zip(params, before_params, delta):
                p.copy_(q + sign * eps * d)
        values.append(cycle_value())
    assert (values[0] - values[1]) / (2 * eps) < 0


class TestCheckpoint:
    def test_mid_run_resume_bit_identical(self, tiny_cfg, tmp_path):
        state = build_state(tiny_cfg)
        _run(state, 3)
        path = save_checkpoint(state, tmp_path / "mid.ckpt")
        tail = _run(state, 3, offset=3)
        resumed = load_checkpoint(path)
        resumed_tail = _run(resumed, 3, offset=3)
        assert [r.to_record() for r in tail] == [r.to_record() for r in resumed_tail]

    def test_save_load_save_identical(self, tiny_cfg, tmp_path):
        state = build_state(tiny_cfg)
        _run(state, 2)
        first = save_checkpoint(state, tmp_path / "a.ckpt")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.ckpt")
        assert first.read_bytes() == second.read_bytes()

    def test_restores_counters_and_config(self, tiny_cfg, tmp_path):
        state = build_state(tiny_cfg)
        _run(state, 2)
        state.epoch = 1
        state.epoch_means = [1.5]
        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "c.ckpt"))
        assert (loaded.epoch, loaded.global_step, loaded.epoch_means) == (1, 2, [1.5])
        assert loaded.cfg == tiny_cfg
        assert len(loaded.pools["a"]) == 2

    def test_truncated(self, tiny_cfg, tmp_path):
        path = save_checkpoint(build_state(tiny_cfg), tmp_path / "t.ckpt")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_version_mismatch(self, tiny_cfg, tmp_path, monkeypatch):
        import hazegan.training as tr

        path = save_checkpoint(build_state(tiny_cfg), tmp_path / "v.ckpt")
        monkeypatch.setattr(tr, "CHECKPOINT_VERSION", 2)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_architecture_mismatch(self, tiny_cfg, tmp_path):
        import hazegan.training as tr

        state = build_state(tiny_cfg)
        payload = tr._state_payload(state)
        payload["config"]["gen_width"] = 8
        import hashlib
        import io

        buf = io.BytesIO()
        torch.save(payload, buf)
        body = buf.getvalue()
        path = tmp_path / "m.ckpt"
        path.write_bytes(tr._MAGIC + hashlib.sha256(body).hexdigest().encode() + b"\n" + body)
        with pytest.raises(CheckpointError, match="architecture"):
            load_checkpoint(path)


@pytest.fixture
def tiny_data(tmp_path):
    write_scenes(tmp_path / "data" / "trainA", 3, size=64, seed=0)
    write_scenes(tmp_path / "data" / "trainB", 2, size=64, seed=1)
    return tmp_path / "data"


class TestTrainLoop:
    def test_smoke(self, tiny_cfg, tiny_data, tmp_path):
        epochs = []
        final = train(tiny_cfg, tiny_data, tmp_path / "run", on_epoch=lambda e, s: epochs.append((e, s.lr)))
        assert final.name == "final.ckpt"
        assert [e for e, _ in epochs] == [0, 1, 2, 3]
        assert [lr for _, lr in epochs] == pytest.approx([2e-4, 2e-4, 2e-4, 1e-4])
        lines = [json.loads(x) for x in (tmp_path / "run" / "losses.jsonl").read_text().splitlines()]
        assert len(lines) == 4 * 3
        assert all(np.isfinite(x["total"]) for x in lines)
        assert [x["step"] for x in lines] == list(range(1, 13))
        meta = json.loads((tmp_path / "run" / "run.json").read_text())
        assert meta["seed"] == tiny_cfg.seed and meta["config_sha256"] == tiny_cfg.digest()
        assert (tmp_path / "run" / "epoch_0002.ckpt").is_file()
        state = load_checkpoint(final)
        assert state.epoch == 4 and len(state.epoch_means) == 4

    def test_resume_matches_uninterrupted(self, tiny_cfg, tiny_data, tmp_path):
        full = train(tiny_cfg, tiny_data, tmp_path / "full")
        train(tiny_cfg.replace(epochs_total=2, epochs_constant=2), tiny_data, tmp_path / "half")
        # continue the two-epoch run under the four-epoch schedule
        half = load_checkpoint(tmp_path / "half" / "final.ckpt")
        half.cfg = tiny_cfg
        save_checkpoint(half, tmp_path / "half" / "cont.ckpt")
        resumed = train(tiny_cfg, tiny_data, tmp_path / "resumed", resume=tmp_path / "half" / "cont.ckpt")
        a, b = load_checkpoint(full), load_checkpoint(resumed)
        assert a.epoch_means == b.epoch_means
        assert all(param_checksum(a.nets[k]) == param_checksum(b.nets[k]) for k in a.nets)

    def test_missing_data(self, tiny_cfg, tmp_path):
        with pytest.raises(ConfigError):
            train(tiny_cfg, tmp_path / "nowhere", tmp_path / "run")
