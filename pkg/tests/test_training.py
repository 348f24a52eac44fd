import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from arinar import container
from arinar.config import TrainConfig
from arinar.data import NormStats, SyntheticProcessSpec, make_synthetic
from arinar.model import ModelConfig, init_params, inner_forward, param_manifest
from arinar.training import (Checkpoint, DivergenceError, OptimizerState, adamw_update, checkpoint_bytes,
                             compute_gradients, gradcheck, load_checkpoint, load_dataset, lr_at, nll_loss,
                             save_checkpoint, save_dataset, train, zero_gradient_tensors)

from conftest import generic_params
from reference_numpy import batch_nll


def small_batch(cfg, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, cfg.L, cfg.D)), rng.integers(0, cfg.num_classes, size=n)


class TestLoss:
    def test_frozen_standard_normal_head(self):
        cfg = ModelConfig(K=1, width=16, num_heads=2, outer_blocks=1, L=4, D=4)
        p = init_params(cfg, dtype=torch.float64)
        p["inner.head.weight"].zero_()
        p["inner.head.bias"].zero_()
        loss = nll_loss(p, cfg, np.zeros((2, 4, 4)), [0, 1])
        assert loss.item() == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-14)
        assert loss.item() == pytest.approx(0.91894, abs=1e-5)

    def test_frozen_head_is_gaussian_nll_of_data(self):
        cfg = ModelConfig(K=1, width=16, num_heads=2, outer_blocks=1, L=3, D=4)
        p = init_params(cfg, dtype=torch.float64)
        p["inner.head.weight"].zero_()
        p["inner.head.bias"].copy_(torch.tensor([0.0, 0.5, math.log(2.0)], dtype=torch.float64))
        x = np.random.default_rng(1).normal(size=(2, 3, 4))
        expected = np.mean(0.5 * ((x - 0.5) / 2.0) ** 2 + math.log(2.0) + 0.5 * math.log(2 * math.pi))
        assert nll_loss(p, cfg, x, [0, 0]).item() == pytest.approx(expected, abs=1e-13)

    def test_batch_equals_mean_of_sequences(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        x, y = small_batch(tiny_cfg, 4)
        whole = nll_loss(p, tiny_cfg, x, y).item()
        parts = np.mean([nll_loss(p, tiny_cfg, x[i:i + 1], y[i:i + 1]).item() for i in range(4)])
        assert whole == pytest.approx(parts, abs=1e-10)

    def test_matches_independent_reimplementation(self, tiny_cfg):
        p = generic_params(tiny_cfg, seed=4)
        x, y = small_batch(tiny_cfg, 2, seed=4)
        y[1] = tiny_cfg.null_class
        assert nll_loss(p, tiny_cfg, x, y).item() == pytest.approx(batch_nll(p, tiny_cfg, x, y), abs=1e-8)

    def test_matches_reimplementation_multi_block(self):
        cfg = ModelConfig(outer_blocks=2, inner_blocks=2, width=8, num_heads=4, K=4, L=3, D=4, num_classes=2)
        p = generic_params(cfg, seed=8, scale=0.3)
        x, y = small_batch(cfg, 2, seed=8)
        assert nll_loss(p, cfg, x, y).item() == pytest.approx(batch_nll(p, cfg, x, y), abs=1e-8)

    def test_label_dropout_uses_null_class(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        x, y = small_batch(tiny_cfg, 3)
        all_null = nll_loss(p, tiny_cfg, x, np.full(3, tiny_cfg.null_class))
        dropped = nll_loss(p, tiny_cfg, x, y, dropout_prob=1.0, rng=np.random.default_rng(0))
        assert all_null.item() == dropped.item()

    def test_divergence(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        p["inner.head.bias"][0] = float("nan")
        with pytest.raises(DivergenceError):
            nll_loss(p, tiny_cfg, *small_batch(tiny_cfg))


class TestGradients:
    def test_full_coverage(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        x, y = small_batch(tiny_cfg)
        _, grads = compute_gradients(p, tiny_cfg, x, y)
        assert set(grads) == {n for n, _ in param_manifest(tiny_cfg)}
        assert zero_gradient_tensors(grads) == []

    def test_outer_gradients_flow_only_through_head(self, tiny_cfg):
        p = {k: v.clone().requires_grad_(True) for k, v in generic_params(tiny_cfg).items()}
        x, y = small_batch(tiny_cfg)
        loss = nll_loss(p, tiny_cfg, x, y)
        outer = [v for k, v in p.items() if k.startswith("outer.")]
        normal = torch.autograd.grad(loss, outer, retain_graph=True)
        assert all(torch.any(g != 0) for g in normal)

        import arinar.model as model_mod

        original = model_mod.inner_forward

        def cut(params, cfg, z, features):
            out = original(params, cfg, z, features)
            out.register_hook(lambda g: torch.zeros_like(g))
            return out

        model_mod.inner_forward = cut
        try:
            loss = nll_loss(p, tiny_cfg, x, y)
            cut_grads = torch.autograd.grad(loss, outer, allow_unused=True)
        finally:
            model_mod.inner_forward = original
        assert all(g is None or not torch.any(g != 0) for g in cut_grads)

    def test_null_class_row_untouched_without_dropout(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        x, y = small_batch(tiny_cfg)
        _, grads = compute_gradients(p, tiny_cfg, x, y)
        assert torch.all(grads["outer.class_embed"][tiny_cfg.null_class] == 0)
        assert torch.any(grads["outer.class_embed"][int(y[0])] != 0)

    def test_gradcheck_tiny(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        x, y = small_batch(tiny_cfg, 2)
        assert gradcheck(p, tiny_cfg, x, y, epsilon=1e-5, n_coords=200) < 1e-4

    def test_gradcheck_deterministic(self, tiny_cfg):
        p = generic_params(tiny_cfg)
        x, y = small_batch(tiny_cfg, 2)
        assert gradcheck(p, tiny_cfg, x, y, n_coords=50, seed=3) == gradcheck(p, tiny_cfg, x, y, n_coords=50, seed=3)

    def test_quadratic_coordinate_is_exact(self):
        # with K=1 the loss is quadratic in the head's mean bias
        cfg = ModelConfig(K=1, width=8, num_heads=2, outer_blocks=1, L=2, D=3)
        p = generic_params(cfg)
        x, y = small_batch(cfg, 2)
        _, grads = compute_gradients(p, cfg, x, y)
        eps = 1e-3
        bias = p["inner.head.bias"]
        bias[1] += eps
        up = nll_loss(p, cfg, x, y).item()
        bias[1] -= 2 * eps
        down = nll_loss(p, cfg, x, y).item()
        bias[1] += eps
        assert (up - down) / (2 * eps) == pytest.approx(grads["inner.head.bias"][1].item(), rel=1e-9)

    def test_gradcheck_epsilon_range(self, tiny_cfg):
        with pytest.raises(ValueError):
            gradcheck(generic_params(tiny_cfg), tiny_cfg, *small_batch(tiny_cfg), epsilon=1e-7)


class TestAdamW:
    def test_zero_gradient_is_pure_decay(self):
        cfg = TrainConfig()
        theta = torch.tensor([1.0, -2.5, 0.3], dtype=torch.float64)
        params = {"w": theta.clone()}
        state = OptimizerState.zeros_like(params)
        adamw_update(state, params, {"w": torch.zeros(3, dtype=torch.float64)}, cfg)
        torch.testing.assert_close(params["w"], theta * (1 - 2e-6), rtol=1e-15, atol=0)

    def test_one_scalar_step(self):
        params = {"w": torch.tensor([1.0], dtype=torch.float64)}
        state = OptimizerState.zeros_like(params)
        adamw_update(state, params, {"w": torch.tensor([1.0], dtype=torch.float64)}, TrainConfig())
        assert params["w"].item() == pytest.approx(0.999898000001, abs=1e-15)
        assert state.step == 1

    def test_deterministic_trajectories(self):
        def run():
            params = {"w": torch.linspace(-1, 1, 7, dtype=torch.float64)}
            state = OptimizerState.zeros_like(params)
            for step in range(5):
                g = torch.sin(params["w"] * (step + 1))
                adamw_update(state, params, {"w": g}, TrainConfig(learning_rate=1e-2))
            return params["w"]

        assert torch.equal(run(), run())


class TestSchedule:
    def test_ramp(self):
        cfg = TrainConfig(warmup_epochs=100)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(50, cfg) == pytest.approx(5e-5, rel=1e-15)
        assert lr_at(100, cfg) == 1e-4
        assert lr_at(399, cfg) == 1e-4

    def test_paper_preset(self):
        cfg = TrainConfig.paper()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.adam_betas) == (1e-4, 0.02, (0.9, 0.95))
        assert (cfg.epochs, cfg.warmup_epochs, cfg.batch_size) == (400, 100, 256)


def tiny_training(seed=0, dropout=0.1):
    cfg = ModelConfig(outer_blocks=1, width=16, num_heads=2, K=2, L=3, D=4, num_classes=2)
    spec = SyntheticProcessSpec()
    ds = make_synthetic(spec, cfg.L, cfg.D, 40, seed=1)
    tc = TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, K=2, seed=seed, learning_rate=1e-3,
                     label_dropout_prob=dropout)
    return train(tc, cfg, ds), ds


class TestTrain:
    def test_deterministic(self):
        a, _ = tiny_training()
        b, _ = tiny_training()
        assert checkpoint_bytes(a) == checkpoint_bytes(b)

    def test_logs_and_reduces_loss(self):
        events = []
        cfg = ModelConfig(outer_blocks=1, width=16, num_heads=2, K=2, L=3, D=4, num_classes=2)
        ds = make_synthetic(SyntheticProcessSpec(), 3, 4, 64, seed=1)
        tc = TrainConfig(epochs=15, warmup_epochs=1, batch_size=16, K=2, learning_rate=3e-3, log_every=2)
        ckpt = train(tc, cfg, ds, log=events.append)
        epochs = [e for e in events if e["event"] == "epoch"]
        assert len(epochs) == 15 and any(e["event"] == "step" for e in events)
        assert set(epochs[0]) == {"event", "epoch", "step", "loss", "lr"}
        assert epochs[-1]["loss"] < epochs[0]["loss"]
        assert ckpt.opt_state.step == 15 * 4

    def test_k_mismatch(self):
        cfg = ModelConfig(K=3)
        with pytest.raises(ValueError):
            train(TrainConfig(K=4), cfg, make_synthetic(SyntheticProcessSpec(), 16, 16, 2, 0))


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    same = (a.model_cfg == b.model_cfg and a.train_cfg == b.train_cfg and a.rng == b.rng and a.meta == b.meta
            and np.array_equal(a.norm_stats.mean, b.norm_stats.mean)
            and np.array_equal(a.norm_stats.std, b.norm_stats.std))
    same &= all(torch.equal(a.params[k], b.params[k]) and a.params[k].dtype == b.params[k].dtype for k in a.params)
    if a.opt_state is None or b.opt_state is None:
        return same and a.opt_state is b.opt_state
    return same and a.opt_state.step == b.opt_state.step and all(
        torch.equal(a.opt_state.m[k], b.opt_state.m[k]) and torch.equal(a.opt_state.v[k], b.opt_state.v[k])
        for k in a.params)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ckpt, _ = tiny_training()
        ckpt.norm_stats = NormStats(np.linspace(-1, 1, 4), np.linspace(0.5, 2, 4))
        path = tmp_path / "c.arnr"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert checkpoints_equal(ckpt, back)
        assert checkpoint_bytes(back) == path.read_bytes()
        assert sum(v.numel() for v in back.params.values()) == ckpt.meta["num_parameters"]

    def test_round_trip_without_optimizer_f64(self, tmp_path):
        cfg = ModelConfig(outer_blocks=1, width=8, num_heads=2, K=2, L=2, D=3)
        ckpt = Checkpoint(cfg, TrainConfig(K=2), init_params(cfg, dtype=torch.float64), NormStats.identity(3))
        save_checkpoint(ckpt, tmp_path / "c")
        assert checkpoints_equal(ckpt, load_checkpoint(tmp_path / "c"))

    def test_header_layout(self):
        ckpt, _ = tiny_training()
        raw = checkpoint_bytes(ckpt)
        assert raw[:4] == b"ARNR"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == len(container.loads(raw))

    def test_header_flips_are_format_errors(self):
        ckpt, _ = tiny_training()
        raw = bytearray(checkpoint_bytes(ckpt))
        for pos in range(12):
            bad = bytearray(raw)
            bad[pos] ^= 0xFF
            with pytest.raises(container.FormatError):
                container.loads(bytes(bad))

    @given(st.integers(0, 10**9), st.integers(1, 255))
    @settings(max_examples=300, deadline=None)
    def test_any_single_byte_flip_never_crashes(self, where, mask):
        raw = bytearray(_CKPT_BYTES)
        # bias half the probes into the structured prefix, where names and dims live
        pos = where % 400 if where % 2 else where % len(raw)
        raw[pos] ^= mask
        from arinar.training import checkpoint_from_entries
        try:
            checkpoint_from_entries(container.loads(bytes(raw)))
        except container.FormatError:
            pass

    def test_exhaustive_prefix_flips(self):
        # every byte of the first entries (names, dtype/rank, dims, config JSON) under three masks
        from arinar.training import checkpoint_from_entries
        for pos in range(min(600, len(_CKPT_BYTES))):
            for mask in (0x01, 0x80, 0xFF):
                raw = bytearray(_CKPT_BYTES)
                raw[pos] ^= mask
                try:
                    checkpoint_from_entries(container.loads(bytes(raw)))
                except container.FormatError:
                    pass

    def test_oversized_rank_is_format_error(self):
        raw = container.dumps({"x": np.zeros((2, 3), dtype=np.float32)})
        rank_at = 12 + 2 + 1 + 1
        bad = bytearray(raw)
        bad[rank_at] = 111
        with pytest.raises(container.FormatError, match="rank"):
            container.loads(bytes(bad))
        with pytest.raises(ValueError):
            container.dumps({"x": np.zeros((1,) * 33, dtype=np.float32)})

    @given(st.integers(0, 10**9))
    @settings(max_examples=100, deadline=None)
    def test_truncation_is_format_error(self, cut):
        n = cut % len(_CKPT_BYTES)
        with pytest.raises(container.FormatError):
            container.loads(_CKPT_BYTES[:n])

    def test_trailing_bytes(self):
        with pytest.raises(container.FormatError, match="trailing"):
            container.loads(_CKPT_BYTES + b"\x00")

    def test_missing_entry_is_named(self):
        entries = container.loads(_CKPT_BYTES)
        del entries["param.inner.bot"]
        from arinar.training import checkpoint_from_entries
        with pytest.raises(container.FormatError, match="inner.bot"):
            checkpoint_from_entries(entries)

    def test_dataset_round_trip(self, tmp_path):
        ds = make_synthetic(SyntheticProcessSpec(), 4, 3, 10, seed=2)
        ds.tokens = ds.tokens.astype(np.float32)
        save_dataset(tmp_path / "d", ds, {"kind": "synthetic"})
        back, meta = load_dataset(tmp_path / "d")
        assert back.tokens.dtype == np.float32 and back.tokens.tobytes() == ds.tokens.tobytes()
        assert back.labels.tobytes() == ds.labels.astype(np.int32).tobytes()
        assert meta == {"num_classes": 2, "kind": "synthetic"}
        raw = (tmp_path / "d").read_bytes()
        assert container.dumps(container.loads(raw)) == raw


_CKPT_BYTES = checkpoint_bytes(tiny_training()[0])
