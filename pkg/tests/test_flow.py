"""Tests for the forward process, training loop, sampler and checkpoints."""

import csv
import json

import numpy as np
import pytest
import torch
from torch import nn

from scenario_flow.agents import annotate, default_vocabulary
from scenario_flow.common import ConfigError, DomainError, FormatError, SamplingError, ShapeError, TrainingError
from scenario_flow.denoiser import NetConfig, build_velocity_net
from scenario_flow.flow import (
    CHECKPOINT_FORMAT_VERSION,
    TrainConfig,
    Trainer,
    encoder_from_description,
    interpolate,
    load_checkpoint,
    run_sample,
    run_train,
    sample,
    sample_many,
    save_checkpoint,
    target_velocity,
    train,
)
from scenario_flow.metrics import frechet_distance, psdd
from scenario_flow.objective import flatten_gradients, freq_loss, time_loss, update_direction
from scenario_flow.scenarios import Scenario, load_dataset, save_dataset, synth_dataset
from scenario_flow.text_encoding import ReferenceEncoder, build_vocabulary

from ._fixtures import TINY_NET, TINY_NET_LIVE, loss_batch, random_embedding, tiny_net


class _ConstantField(nn.Module):
    """Velocity field that ignores its inputs."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, x_t, t, text, mask=None):
        return torch.full_like(x_t, self.value)


def _pairs(n: int = 4, seed: int = 0):
    scenarios = synth_dataset("pv", n, TINY_NET.length, seed)
    return [(s, random_embedding(3, TINY_NET.d_llm, seed=i)) for i, s in enumerate(scenarios)]


def _annotated_dataset(path, n: int = 6, length: int = 16):
    scenarios = [Scenario(s.id, s.series, s.kind, s.metadata, annotate(s))
                 for s in synth_dataset("pv", n, length, seed=0)]
    save_dataset(scenarios, path)
    return scenarios


# ---------------------------------------------------------------------------
# Forward process
# ---------------------------------------------------------------------------


def test_interpolate_examples():
    x_0, x_1 = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    assert interpolate(x_0, x_1, 0.5).x_t.tolist() == [0.5, 1.0]
    assert interpolate(x_0, x_1, 0.0).x_t.tolist() == [0.0, 0.0]
    assert interpolate(x_0, x_1, 1.0).x_t.tolist() == [1.0, 2.0]
    assert target_velocity(x_0, x_1).v_t.tolist() == [1.0, 2.0]


def test_interpolate_one_time_per_row():
    x_0 = torch.zeros(2, 3)
    x_1 = torch.ones(2, 3)
    x_t = interpolate(x_0, x_1, torch.tensor([0.25, 0.75])).x_t
    assert torch.allclose(x_t, torch.tensor([[0.25] * 3, [0.75] * 3]))


def test_interpolate_errors():
    with pytest.raises(DomainError):
        interpolate([0.0], [1.0], 1.5)
    with pytest.raises(ShapeError):
        interpolate([0.0, 0.0], [1.0], 0.5)
    with pytest.raises(ShapeError):
        interpolate(np.zeros((2, 3)), np.ones((2, 3)), np.array([0.1, 0.2, 0.3]))


def test_marginal_variance_shrinks_towards_the_data():
    rng = np.random.default_rng(0)
    x_0 = rng.standard_normal(200_000)
    x_t = interpolate(x_0, np.zeros_like(x_0), 0.3).x_t
    assert np.var(x_t) == pytest.approx(0.49, abs=0.01)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("steps", [1, 5, 50, 500])
def test_constant_field_is_integrated_exactly(steps):
    embedding = random_embedding(2, 4)
    noise = torch.randn(1, 8, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    x = sample(_ConstantField(0.25), embedding, steps, seed=7, length=8)
    assert np.allclose(x, noise[0].numpy() + 0.25, atol=1e-9)


def test_sample_is_first_row_of_sample_many():
    net = tiny_net(TINY_NET_LIVE)
    embedding = random_embedding(3, TINY_NET_LIVE.d_llm)
    many = sample_many(net, embedding, 3, steps=4, seed=11)
    assert many.shape == (3, TINY_NET_LIVE.length)
    assert many.dtype == np.float64
    assert np.allclose(sample(net, embedding, 4, seed=11), many[0], atol=1e-5)
    assert not np.array_equal(sample_many(net, embedding, 3, steps=4, seed=12), many)


def test_sampler_argument_errors():
    embedding = random_embedding(1, 4)
    with pytest.raises(ValueError):
        sample(_ConstantField(0.0), embedding, 0, seed=0, length=8)
    with pytest.raises(ValueError):
        sample(_ConstantField(0.0), embedding, 5, seed=0)


def test_sampler_reports_the_failing_step():
    with pytest.raises(SamplingError) as excinfo:
        sample(_ConstantField(float("inf")), random_embedding(1, 4), 5, seed=0, length=8)
    assert excinfo.value.step == 0


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_training_is_deterministic_in_the_seed():
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3)
    net_a, reports_a = train(_pairs(), tiny_net(), cfg)
    net_b, reports_b = train(_pairs(), tiny_net(), cfg)
    assert [r.l_time for r in reports_a] == [r.l_time for r in reports_b]
    for pa, pb in zip(net_a.parameters(), net_b.parameters(), strict=True):
        assert torch.equal(pa, pb)
    assert [r.step for r in reports_a] == [0, 1, 2, 3]


def test_static_lambda_zero_updates_along_the_time_gradient():
    trainer = Trainer(tiny_net(), TrainConfig(epochs=1, batch_size=4, mgda_enabled=False,
                                              static_lambda=0.0))
    reports = trainer.fit(_pairs())
    assert reports[0].alpha is None
    assert torch.equal(trainer.last_direction, trainer.last_gradients[0])


def test_mgda_alpha_is_logged_in_unit_interval():
    reports = Trainer(tiny_net(), TrainConfig(epochs=1, batch_size=2)).fit(_pairs())
    assert all(0.0 <= r.alpha <= 1.0 for r in reports)


@pytest.mark.filterwarnings("error::UserWarning")
def test_training_step_raises_no_warnings():
    train(_pairs(), tiny_net(), TrainConfig(epochs=1, batch_size=2))


def test_combined_direction_lowers_both_losses_on_its_batch():
    net = tiny_net(TINY_NET_LIVE, dtype=torch.float64)
    batch = loss_batch(TINY_NET_LIVE, batch=4, seed=2)
    params = list(net.parameters())

    def losses():
        v = net(batch.x_t, batch.t, batch.text, batch.mask)
        return time_loss(v, batch.v_t), freq_loss(v, batch.v_t)

    l_time, l_freq = losses()
    g_time = flatten_gradients(torch.autograd.grad(l_time, params, retain_graph=True,
                                                   allow_unused=True), params)
    g_freq = flatten_gradients(torch.autograd.grad(l_freq, params, allow_unused=True), params)
    direction, _ = update_direction(g_time, g_freq, mgda_enabled=True)
    with torch.no_grad():
        offset = 0
        for p in params:
            p -= 1e-5 * direction[offset : offset + p.numel()].view_as(p)
            offset += p.numel()
        after_time, after_freq = losses()
    assert float(after_time) < float(l_time)
    assert float(after_freq) < float(l_freq)


def test_non_finite_loss_raises_with_step():
    s = synth_dataset("pv", 1, TINY_NET.length, 0)[0]
    s.series = np.full(TINY_NET.length, np.nan)
    with pytest.raises(TrainingError) as excinfo:
        train([(s, random_embedding(2, TINY_NET.d_llm))], tiny_net(), TrainConfig(epochs=1))
    assert excinfo.value.step == 0


def test_training_rejects_mismatched_data():
    with pytest.raises(ValueError):
        train([], tiny_net(), TrainConfig())
    long = synth_dataset("pv", 1, 32, 0)[0]
    with pytest.raises(ShapeError):
        train([(long, random_embedding(2, TINY_NET.d_llm))], tiny_net(), TrainConfig())
    short = synth_dataset("pv", 1, TINY_NET.length, 0)[0]
    with pytest.raises(ShapeError):
        train([(short, random_embedding(2, 5))], tiny_net(), TrainConfig())


def test_max_steps_and_one_cycle_schedule():
    cfg = TrainConfig(epochs=50, batch_size=2, max_steps=3, lr_schedule="one_cycle",
                      optimizer="adamw")
    trainer = Trainer(tiny_net(), cfg)
    assert len(trainer.fit(_pairs())) == 3
    assert trainer.step == 3


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": 0}, {"learning_rate": 0.0}, {"optimizer": "rmsprop"}, {"static_lambda": -1.0},
     {"lr_schedule": "cosine"}, {"max_steps": 0}],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = tiny_net(TINY_NET_LIVE)
    encoder = ReferenceEncoder(default_vocabulary(), dim=TINY_NET_LIVE.d_llm, seed=2)
    path = tmp_path / "checkpoint.pt"
    save_checkpoint(path, net, seed=2, step=7, rng_state=torch.Generator().get_state(),
                    encoder=encoder.describe())

    ckpt = load_checkpoint(path)
    assert ckpt.step == 7
    assert ckpt.length == TINY_NET_LIVE.length
    assert ckpt.net_config == TINY_NET_LIVE
    assert ckpt.dtype == "float32"
    restored = ckpt.build_net()
    embedding = encoder.encode("A sunny day with stable output")
    assert np.array_equal(sample(restored, embedding, 3, seed=1), sample(net, embedding, 3, seed=1))

    rebuilt = encoder_from_description(ckpt.encoder)
    assert np.array_equal(rebuilt.encode("cloudy day").matrix, encoder.encode("cloudy day").matrix)


def test_checkpoint_version_and_garbage(tmp_path):
    path = tmp_path / "old.pt"
    torch.save({"format_version": CHECKPOINT_FORMAT_VERSION + 1}, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(garbage)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def test_run_train_then_resume(tmp_path):
    dataset = tmp_path / "annotated.jsonl"
    _annotated_dataset(dataset)
    first = tmp_path / "first"
    second = tmp_path / "second"
    first.mkdir()
    second.mkdir()

    cfg = TrainConfig(epochs=10, batch_size=2, max_steps=2)
    assert run_train(dataset, first, net_cfg=TINY_NET, train_cfg=cfg) == 0
    assert load_checkpoint(first / "checkpoint.pt").step == 2
    rows = list(csv.reader((first / "losses.csv").open()))
    assert len(rows) == 3

    cfg = TrainConfig(epochs=10, batch_size=2, max_steps=3)
    assert run_train(dataset, second, net_cfg=TINY_NET, train_cfg=cfg,
                     resume=first / "checkpoint.pt") == 0
    assert load_checkpoint(second / "checkpoint.pt").step == 5
    steps = [int(r[0]) for r in list(csv.reader((second / "losses.csv").open()))[1:]]
    assert steps == [2, 3, 4]


def test_run_train_missing_inputs(tmp_path):
    assert run_train(tmp_path / "none.jsonl", tmp_path, net_cfg=TINY_NET,
                     train_cfg=TrainConfig()) == 1


def test_run_sample_writes_generated_records(tmp_path):
    dataset = tmp_path / "annotated.jsonl"
    scenarios = _annotated_dataset(dataset, n=3)
    assert run_train(dataset, tmp_path, net_cfg=TINY_NET,
                     train_cfg=TrainConfig(epochs=1, batch_size=3)) == 0

    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    serial.mkdir()
    parallel.mkdir()
    assert run_sample(tmp_path / "checkpoint.pt", dataset, serial, steps=4, per_prompt=2,
                      seed=5) == 0
    assert run_sample(tmp_path / "checkpoint.pt", dataset, parallel, steps=4, per_prompt=2,
                      seed=5, workers=2) == 0

    text = (serial / "generated.jsonl").read_text()
    assert text == (parallel / "generated.jsonl").read_text()
    records = [json.loads(line) for line in text.splitlines()]
    assert [r["id"] for r in records[:2]] == [f"{scenarios[0].id}-g000", f"{scenarios[0].id}-g001"]
    assert records[0]["prompt_id"] == scenarios[0].id
    assert records[0]["steps"] == 4
    generated = load_dataset(serial / "generated.jsonl")
    assert len(generated) == 6
    assert all(0.0 <= g.series.min() and g.series.max() <= 1.0 for g in generated)


def test_run_sample_missing_checkpoint(tmp_path):
    dataset = tmp_path / "annotated.jsonl"
    _annotated_dataset(dataset, n=1)
    assert run_sample(tmp_path / "none.pt", dataset, tmp_path) == 1


# ---------------------------------------------------------------------------
# Desk-scale experiments
# ---------------------------------------------------------------------------




@pytest.fixture(scope="module")
def peak_model():
    """Default-size network trained on two prompts that differ only in peak."""
    encoder = ReferenceEncoder(build_vocabulary(["low", "high", "peak"]), dim=NetConfig().d_llm)
    prompts = {0.3: encoder.encode("low peak"), 0.9: encoder.encode("high peak")}
    classes = {
        peak: synth_dataset("pv", 256, 64, seed, weather="sunny", peak=peak, event_probability=0.0)
        for seed, peak in enumerate(prompts)
    }
    dataset = [(s, prompts[peak]) for peak, scenarios in classes.items() for s in scenarios]
    cfg = TrainConfig(epochs=250, batch_size=64, learning_rate=3e-3, optimizer="adamw")
    net, _ = train(dataset, build_velocity_net(NetConfig(), seed=0), cfg)
    net.eval()
    return net, prompts, classes


@pytest.mark.slow
def test_memorises_a_single_scenario():
    s = synth_dataset("pv", 1, 64, 0, weather="sunny", event_probability=0.0)[0]
    embedding = random_embedding(3, NetConfig().d_llm)
    cfg = TrainConfig(epochs=2000, batch_size=1, learning_rate=3e-3, optimizer="adamw")
    net, reports = train([(s, embedding)], build_velocity_net(NetConfig(), seed=0), cfg)
    assert len(reports) == 2000
    net.eval()
    samples = sample_many(net, embedding, 16, steps=50, seed=0)
    assert np.mean((samples - s.series) ** 2) < 1e-2


@pytest.mark.slow
def test_prompted_peak_is_reached(peak_model):
    net, prompts, _ = peak_model
    for peak, embedding in prompts.items():
        samples = sample_many(net, embedding, 100, steps=50, seed=1)
        hits = np.abs(samples.max(axis=1) - peak) <= 0.15
        assert hits.mean() >= 0.95, peak


@pytest.mark.slow
def test_five_euler_steps_stay_close_to_fifty(peak_model):
    net, prompts, classes = peak_model
    for peak, embedding in prompts.items():
        real = np.stack([s.series for s in classes[peak]])
        fd_fast = frechet_distance(real, sample_many(net, embedding, 100, steps=5, seed=2))
        fd_full = frechet_distance(real, sample_many(net, embedding, 100, steps=50, seed=2))
        assert fd_fast <= 2 * fd_full, peak


def _rippled_sunny_days(n: int, seed: int) -> list[Scenario]:
    """Sunny days plus a small oscillation at 0.4 cycles per step during daylight."""
    ripple = 0.05 * np.sin(2 * np.pi * 0.4 * np.arange(64))
    return [
        Scenario(s.id, np.clip(s.series + ripple * (s.series > 0.05), 0.0, 1.0), s.kind, s.metadata)
        for s in synth_dataset("pv", n, 64, seed, weather="sunny", event_probability=0.0)
    ]


@pytest.mark.slow
def test_gradient_balancing_keeps_the_spectrum_closer_than_time_loss_alone():
    net_cfg = NetConfig(length=64, base_channels=8, d_llm=16, d_k=8)
    embedding = random_embedding(3, net_cfg.d_llm)
    scenarios = _rippled_sunny_days(64, seed=3)
    real = np.stack([s.series for s in scenarios])

    def spectral_gap(seed: int, **options) -> float:
        cfg = TrainConfig(epochs=300, batch_size=32, learning_rate=3e-3, optimizer="adamw",
                          seed=seed, **options)
        net, _ = train([(s, embedding) for s in scenarios], build_velocity_net(net_cfg, seed=seed),
                       cfg)
        net.eval()
        return psdd(real, sample_many(net, embedding, 64, steps=50, seed=seed))

    seeds = range(5)
    balanced = [spectral_gap(seed, mgda_enabled=True) for seed in seeds]
    time_only = [spectral_gap(seed, mgda_enabled=False, static_lambda=0.0) for seed in seeds]
    assert np.median(balanced) <= np.median(time_only)
