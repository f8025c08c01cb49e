import pytest
import torch

from nextx.config import parse_run_config
from nextx.data import SyntheticDataset, synth_dataset
from nextx.denoiser import DenoiserConfig, VelocityDenoiser, init_parameters
from nextx.entities import EntityKind, build_layout, batch_latent_to_tokens
from nextx.errors import DomainError, TrainingError
from nextx.flow import TimePolicy
from nextx.rngutil import derive_generator
from nextx.testing import randomize_parameters
from nextx.training import TrainConfig, lr_at, ncl_loss, train

from oracles import finite_difference_grads

LAYOUT = build_layout(EntityKind.CELL, (4, 4, 2), 2)


class _ExactVelocityStub:
    """Recovers the true velocity from the interpolant it is shown."""

    def __init__(self, clean_tokens, layout):
        self.clean = clean_tokens
        self.layout = layout

    def __call__(self, noisy, times, geom, labels=None, train_mode=False, rng=None):
        t_tok = times[:, geom.slot_ids].unsqueeze(-1)
        clean = self.clean
        if noisy.shape[1] == 2 * clean.shape[1]:  # dual stream: clean context copy
            clean = torch.cat([clean, clean], dim=1)
        safe = torch.where(t_tok > 0, t_tok, torch.ones_like(t_tok))
        v = torch.where(t_tok > 0, (noisy - clean) / safe, torch.zeros_like(noisy))
        return v


class _ZeroStub:
    def __call__(self, noisy, times, geom, labels=None, train_mode=False, rng=None):
        return torch.zeros_like(noisy)


def _batch(batch=3, seed=0):
    g = derive_generator(seed, "train-batch")
    return torch.randn(batch, LAYOUT.total_tokens, 2, generator=g)


class TestNclLoss:
    def test_exact_stub_gives_zero_loss(self):
        tokens = _batch()
        stub = _ExactVelocityStub(tokens, LAYOUT)
        loss, report = ncl_loss(stub, tokens, None, TimePolicy.RANDOM, LAYOUT,
                                derive_generator(1, 0))
        assert float(loss) < 1e-10
        assert all(v < 1e-10 for v in report.per_entity)

    def test_zero_stub_gives_velocity_norm(self):
        tokens = _batch()
        rng_a = derive_generator(2, 0)
        loss, _ = ncl_loss(_ZeroStub(), tokens, None, TimePolicy.RANDOM, LAYOUT, rng_a)
        # replay the identical draws to compute mean ||eps - X||^2 directly
        rng_b = derive_generator(2, 0)
        _ = torch.rand(3, LAYOUT.num_entities, generator=rng_b)
        eps = torch.randn(tokens.shape, generator=rng_b)
        assert float(loss) == pytest.approx(float(((eps - tokens) ** 2).mean()), rel=1e-6)

    def test_additivity_over_entities(self):
        tokens = _batch()
        loss, report = ncl_loss(_ZeroStub(), tokens, None, TimePolicy.RANDOM, LAYOUT,
                                derive_generator(3, 0))
        t = LAYOUT.total_tokens
        recombined = sum(
            v * count / t for v, (_, count) in zip(report.per_entity, LAYOUT.spans)
        )
        assert float(loss) == pytest.approx(recombined, rel=1e-6)

    def test_clean_policy_context_is_ground_truth(self):
        tokens = _batch(batch=2)
        captured = {}

        class Spy:
            def __call__(self, noisy, times, geom, labels=None, train_mode=False, rng=None):
                captured["noisy"] = noisy
                captured["times"] = times
                return torch.zeros_like(noisy)

        ncl_loss(Spy(), tokens, None, TimePolicy.CLEAN, LAYOUT, derive_generator(4, 0))
        t = LAYOUT.total_tokens
        assert torch.equal(captured["noisy"][:, :t], tokens)  # teacher-forcing degeneracy
        assert torch.equal(captured["times"][:, :LAYOUT.num_entities],
                           torch.zeros(2, LAYOUT.num_entities))

    def test_ordered_policy_context_times_sorted(self):
        tokens = _batch(batch=2)
        captured = {}

        class Spy:
            def __call__(self, noisy, times, geom, labels=None, train_mode=False, rng=None):
                captured["times"] = times
                return torch.zeros_like(noisy)

        for policy, sign in [(TimePolicy.INCREASING, 1), (TimePolicy.DECREASING, -1)]:
            ncl_loss(Spy(), tokens, None, policy, LAYOUT, derive_generator(5, 0))
            ctx = captured["times"][:, :LAYOUT.num_entities]
            diffs = sign * (ctx[:, 1:] - ctx[:, :-1])
            assert (diffs >= 0).all()
            # target-stream times are unconstrained, in [0, 1]
            tgt = captured["times"][:, LAYOUT.num_entities:]
            assert (tgt >= 0).all() and (tgt <= 1).all()

    def test_exact_stub_zero_loss_under_dual_stream(self):
        tokens = _batch()
        stub = _ExactVelocityStub(tokens, LAYOUT)
        for policy in (TimePolicy.CLEAN, TimePolicy.INCREASING, TimePolicy.DECREASING):
            loss, _ = ncl_loss(stub, tokens, None, policy, LAYOUT, derive_generator(6, 0))
            assert float(loss) < 1e-10

    def test_nan_loss_raises(self):
        class NanStub:
            def __call__(self, noisy, *a, **k):
                return torch.full_like(noisy, float("nan"))

        with pytest.raises(TrainingError):
            ncl_loss(NanStub(), _batch(), None, TimePolicy.RANDOM, LAYOUT,
                     derive_generator(7, 0))


class TestGradientCheck:
    @pytest.mark.parametrize("policy", [TimePolicy.RANDOM, TimePolicy.INCREASING])
    def test_analytic_gradients_match_finite_differences(self, policy):
        layout = build_layout(EntityKind.CELL, (2, 2, 2), 1)  # 4 token entities
        config = DenoiserConfig(
            depth=1, width=8, heads=2, token_dim=2, max_tokens=4,
            num_classes=2, max_entities=4, label_dropout=0.0,
        )
        model = VelocityDenoiser(config).double()
        init_parameters(model, derive_generator(8, 0))
        randomize_parameters(model, derive_generator(8, 1), std=0.2)
        n_params = model.num_parameters()
        assert n_params <= 5000

        tokens = torch.randn(2, 4, 2, generator=derive_generator(8, 2), dtype=torch.float64)
        labels = torch.tensor([0, 1])

        def loss_fn():
            loss, _ = ncl_loss(model, tokens, labels, policy, layout,
                               derive_generator(8, 3), train_mode=True)
            return loss

        loss = loss_fn()
        model.zero_grad()
        loss.backward()
        analytic = [p.grad.clone() for p in model.parameters()]
        numeric = finite_difference_grads(loss_fn, list(model.parameters()), h=1e-4)
        worst = 0.0
        for a, n in zip(analytic, numeric):
            rel = (a - n).abs() / (a.abs() + n.abs()).clamp(min=1e-4)
            worst = max(worst, float(rel.max()))
        assert worst <= 1e-3, f"max relative gradient error {worst:.3e}"


class TestLrSchedule:
    def test_warmup_endpoint(self):
        assert lr_at(100, 1000, 100, 4e-4, 1e-5) == 4e-4

    def test_final_endpoint(self):
        assert lr_at(1000, 1000, 100, 4e-4, 1e-5) == pytest.approx(1e-5, abs=1e-20)

    def test_cosine_midpoint(self):
        assert lr_at(550, 1000, 100, 4e-4, 1e-5) == pytest.approx((4e-4 + 1e-5) / 2)

    def test_warmup_is_linear(self):
        assert lr_at(50, 1000, 100, 4e-4, 1e-5) == pytest.approx(2e-4)

    def test_out_of_range_step(self):
        with pytest.raises(DomainError):
            lr_at(1001, 1000, 100, 4e-4, 1e-5)


def _toy_config(**overrides) -> TrainConfig:
    train = {"epochs": 2, "warmup_epochs": 1, "batch_size": 16}
    train.update(overrides)
    text = "\n".join([
        "[data]", "size = 32", "num_classes = 2", "seed = 5",
        "[denoiser]", "width = 16", "depth = 1", "heads = 2",
        "[train]", *[f"{k} = {v}" for k, v in train.items()],
    ])
    return parse_run_config(text).train


class TestTrainLoop:
    def test_zero_lr_step_leaves_parameters_bit_exact(self):
        # exactly the loop body at the lr schedule's step 0 (warmup ramp -> 0.0)
        cfg = _toy_config()
        from nextx.training import build_model

        assert lr_at(0, 4, 2, cfg.peak_lr, cfg.end_lr) == 0.0
        model = build_model(cfg)
        optimizer = torch.optim.AdamW(model.parameters(), lr=0.0,
                                      betas=cfg.betas, weight_decay=cfg.weight_decay)
        dataset = synth_dataset(cfg.data)
        layout = cfg.layout.build(cfg.data.grid_shape)
        tokens = batch_latent_to_tokens(dataset.latents[:1], layout)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        loss, _ = ncl_loss(model, tokens, dataset.labels[:1], cfg.policy, layout,
                           derive_generator(20, 0))
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        for name, after in model.state_dict().items():
            assert torch.equal(before[name], after), name

    def test_determinism_same_seed_same_weights(self):
        cfg = _toy_config()
        dataset = synth_dataset(cfg.data)
        r1 = train(cfg, dataset)
        r2 = train(cfg, dataset)
        for (name, a), (_, b) in zip(
            r1.model.state_dict().items(), r2.model.state_dict().items()
        ):
            assert torch.equal(a, b), name
        assert r1.final_loss == r2.final_loss

    def test_metrics_emitted_and_checkpoint_written(self, tmp_path):
        cfg = _toy_config()
        dataset = synth_dataset(cfg.data)
        result = train(cfg, dataset, out_dir=tmp_path)
        assert (tmp_path / "metrics.jsonl").exists()
        assert result.checkpoint_path is not None and result.checkpoint_path.exists()
        assert len(result.metrics) >= 1
        assert {"step", "loss", "lr", "grad_norm"} <= set(result.metrics[0])

    def test_empty_dataset_rejected(self):
        cfg = _toy_config()
        empty = SyntheticDataset(
            latents=torch.zeros(0, 4, 4, 2), labels=torch.zeros(0, dtype=torch.long),
            spec=cfg.data,
        )
        with pytest.raises(DomainError):
            train(cfg, empty)

    def test_divergence_aborts(self):
        import dataclasses

        cfg = _toy_config()
        # constant huge lr keeps the loss inflated (but finite) past the patience
        cfg = dataclasses.replace(cfg, peak_lr=50.0, end_lr=50.0, epochs=400,
                                  warmup_epochs=0, batch_size=32)
        dataset = synth_dataset(dataclasses.replace(cfg.data, size=32))
        with pytest.raises(TrainingError, match="diverged"):
            train(cfg, dataset)

    @pytest.mark.slow
    def test_overfits_single_latent(self):
        # Memorization sanity over 2k steps on one latent. The uniform-time
        # velocity loss has an intrinsic floor near t=0 (the clean-side map
        # needs 1/t amplification), so the loss ratio is asserted at 10x the
        # floor and memorization is verified directly: unconditional samples
        # must reproduce the single training latent.
        import dataclasses
        import statistics

        from nextx.flow import IntegratorMode
        from nextx.sampling import SampleConfig, batch_generate

        cfg = _toy_config()
        cfg = dataclasses.replace(
            cfg, epochs=2000, warmup_epochs=20, batch_size=1,
            peak_lr=5e-3, end_lr=5e-4,
            denoiser=dataclasses.replace(
                cfg.denoiser, width=64, depth=2, label_dropout=0.0
            ),
        )
        dataset = synth_dataset(dataclasses.replace(cfg.data, size=1))
        result = train(cfg, dataset)
        losses = [m["loss"] for m in result.metrics]
        tail = statistics.mean(losses[-10:])
        assert tail < 0.10 * losses[0]

        layout = cfg.layout.build(cfg.data.grid_shape)
        samples = batch_generate(
            result.model, layout, SampleConfig(steps=25, mode=IntegratorMode.ODE),
            8, derive_generator(55, 0), chunk=8,
        )
        target = dataset.latents[0]
        err = (samples - target).abs().mean(dim=(1, 2, 3))
        scale = float(target.std())
        assert float(err.max()) < 0.1 * scale


class TestTrainConfigValidation:
    def test_warmup_bound(self):
        with pytest.raises(DomainError):
            _toy_config(warmup_epochs=2, epochs=2)

    def test_lr_ordering(self):
        with pytest.raises(DomainError):
            _toy_config(peak_lr="1e-5", end_lr="4e-4")
