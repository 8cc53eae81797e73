import numpy as np
import numpy.testing as npt
import pytest

from flowcritic import training as tr
from flowcritic.critics import Critic, FastCritic
from flowcritic.datapipe import synth_ring, split_and_augment
from flowcritic.flows import build_nvp
from flowcritic.training import (RunState, TrainConfig, Trainer, TrainingDiverged,
                                 critic_schedule, train_combined, train_mle, train_wgan)


def _ring_splits(n=2000, dims=2, seed=100):
    ring = synth_ring(n, seed=seed, dims=dims)
    return split_and_augment(ring.examples, (0.8, 0.1, 0.1), False, seed=seed + 1,
                             oracle_logpdf=ring.oracle_logpdf)


def _cfg(**kw):
    kw.setdefault("total_generator_steps", 10)
    kw.setdefault("batch_size", 16)
    kw.setdefault("eval_interval", 5)
    kw.setdefault("boost_updates", 8)
    kw.setdefault("boost_first_steps", 2)
    kw.setdefault("boost_every", 7)
    return TrainConfig(**kw)


def test_critic_schedule_spec_points():
    cfg = TrainConfig(total_generator_steps=1)
    assert critic_schedule(0, cfg) == 100
    assert critic_schedule(24, cfg) == 100
    assert critic_schedule(500, cfg) == 100
    assert critic_schedule(1000, cfg) == 100
    assert critic_schedule(26, cfg) == 5
    fast_cfg = TrainConfig(total_generator_steps=1, n_critic=2)
    assert critic_schedule(26, fast_cfg) == 2
    assert critic_schedule(0, fast_cfg) == 100


def test_zero_steps_leaves_model_unchanged():
    train, valid, _ = _ring_splits()
    model = build_nvp(1, 2, 8, seed=0)
    before = model.params.copy_arrays()
    rows = train_mle(model, train, valid, _cfg(total_generator_steps=0))
    assert rows == []
    for name, arr in before.items():
        npt.assert_array_equal(model.params[name].data, arr)


def test_mle_reduces_nll():
    train, valid, _ = _ring_splits()
    model = build_nvp(1, 2, 16, seed=1)
    rows = train_mle(model, train, valid, _cfg(total_generator_steps=400,
                                               batch_size=64, eval_interval=100))
    nll_valid = [r.value for r in rows if r.metric == "nll" and r.split == "valid"]
    assert nll_valid[-1] < nll_valid[0] - 0.2


def test_metrics_rows_are_deterministic():
    train, valid, _ = _ring_splits()

    def run():
        model = build_nvp(1, 2, 8, seed=2)
        return train_mle(model, train, valid, _cfg(total_generator_steps=20, seed=9))

    assert run() == run()


def test_wgan_clip_box_holds_between_steps():
    train, valid, _ = _ring_splits()
    gen = build_nvp(1, 2, 8, seed=3)
    critic = Critic(2, hidden=16, seed=4)
    cfg = _cfg(total_generator_steps=12)
    trainer = Trainer("wgan", gen, train, valid, cfg, critic=critic)
    for step in range(1, 13):
        trainer.run(until=step)
        for name in critic.clip_set:
            assert np.abs(critic.params[name].data).max() <= cfg.clip_c + 1e-18


def test_wgan_with_fast_critic_runs_and_keeps_embed_unclipped():
    train, valid, _ = _ring_splits()
    gen = build_nvp(1, 2, 8, seed=5)
    critic = FastCritic(2, hidden=16, seed=6)
    # blow the embedding weights far outside the box; training must not touch them
    critic.params["embed.proj"].data[:] = 3.0
    train_wgan(gen, critic, train, valid, _cfg(total_generator_steps=8, n_critic=2))
    assert np.abs(critic.params["embed.proj"].data).max() > 0.011
    for name in critic.clip_set:
        assert np.abs(critic.params[name].data).max() <= 0.01 + 1e-18


def test_combined_lambda_zero_matches_pure_wgan_bitwise():
    train, valid, _ = _ring_splits()
    runs = {}
    for kind in ("wgan", "combined"):
        gen = build_nvp(1, 2, 8, seed=7)
        critic = Critic(2, hidden=16, seed=8)
        cfg = _cfg(total_generator_steps=9, combined_lambda=0.0, seed=11)
        fn = train_wgan if kind == "wgan" else train_combined
        rows = fn(gen, critic, train, valid, cfg)
        runs[kind] = (gen.params.copy_arrays(), rows)
    for name, arr in runs["wgan"][0].items():
        npt.assert_array_equal(runs["combined"][0][name], arr)
    assert runs["wgan"][1] == runs["combined"][1]


def test_combined_lambda_positive_diverges_from_wgan_updates():
    train, valid, _ = _ring_splits()
    outs = {}
    for lam in (0.0, 0.5):
        gen = build_nvp(1, 2, 8, seed=12)
        critic = Critic(2, hidden=16, seed=13)
        train_combined(gen, critic, train, valid,
                       _cfg(total_generator_steps=6, combined_lambda=lam, seed=14))
        outs[lam] = gen.params.copy_arrays()
    assert any(not np.array_equal(outs[0.0][n], outs[0.5][n]) for n in outs[0.0])


def test_nan_aborts_with_state_untouched_policy():
    train, valid, _ = _ring_splits()
    model = build_nvp(1, 2, 8, seed=15)
    model.params["c00.W1"].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train_mle(model, train, valid, _cfg(total_generator_steps=3))


def test_rng_codec_roundtrip():
    state = RunState(seed=42)
    state.data.standard_normal(17)      # advance
    state.noise.integers(0, 100, 5)
    arrays = state.state_arrays()

    clone = RunState(seed=0)
    clone.load_state_arrays({k: v.copy() for k, v in arrays.items()})
    npt.assert_array_equal(clone.data.standard_normal(8), state.data.standard_normal(8))
    npt.assert_array_equal(clone.noise.integers(0, 9, 8), state.noise.integers(0, 9, 8))
    npt.assert_array_equal(clone.deq.random(4), state.deq.random(4))


def test_rng_codec_chunks_fit_f32():
    state = RunState(seed=7)
    arr = state.state_arrays()["rng.data"]
    as_f32 = arr.astype(np.float32).astype(np.float64)
    npt.assert_array_equal(as_f32, arr)


@pytest.mark.parametrize("objective", ["mle", "wgan"])
def test_resume_equals_uninterrupted(objective):
    train, valid, _ = _ring_splits()

    def make():
        gen = build_nvp(1, 2, 8, seed=16)
        critic = None if objective == "mle" else Critic(2, hidden=16, seed=17)
        cfg = _cfg(total_generator_steps=14, seed=18)
        return Trainer(objective, gen, train, valid, cfg, critic=critic)

    straight = make()
    straight.run()

    first = make()
    first.run(until=6)
    snap = first.snapshot()
    step = first.state.step

    resumed = make()
    resumed.load_snapshot({k: v.copy() for k, v in snap.items()}, step)
    resumed.run()

    for name, arr in straight.gen.params.arrays().items():
        npt.assert_array_equal(resumed.gen.params[name].data, arr)
    if objective == "wgan":
        for name, arr in straight.critic.params.arrays().items():
            npt.assert_array_equal(resumed.critic.params[name].data, arr)


def test_f32_precision_runs():
    train, valid, _ = _ring_splits()
    gen = build_nvp(1, 2, 8, seed=19, dtype="f32")
    rows = train_mle(gen, train, valid, _cfg(total_generator_steps=5, precision="f32"))
    assert gen.params["c00.W1"].data.dtype == np.float32
    assert all(np.isfinite(r.value) for r in rows)
