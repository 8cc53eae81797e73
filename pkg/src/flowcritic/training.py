"""Training loops: maximum likelihood, Wasserstein-critic adversarial, and
the combined objective.  Runs are seeded, deterministic and resumable.

The adversarial loop follows the heavy critic schedule: many critic updates
during warm-up and periodically thereafter, a handful otherwise, with the
weight box projection after every critic step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .critics import FastCritic, wgan_objective
from .optim import Adam, RMSProp, clip_to_box

EVAL_ROWS = 2048  # fixed head of each split used for metric evaluation


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the run aborts rather than re-seeding."""


@dataclass
class TrainConfig:
    total_generator_steps: int
    batch_size: int = 64
    lr_critic: float = 5e-5
    lr_gen_adv: float = 1e-3
    lr_mle: float = 1e-3
    clip_c: float = 0.01
    n_critic: int = 5
    boost_updates: int = 100
    boost_first_steps: int = 25
    boost_every: int = 500
    extra_samples: int = 64
    combined_lambda: float = 0.0
    seed: int = 0
    precision: str = "f64"
    eval_interval: int = 250

    def __post_init__(self):
        if self.total_generator_steps < 0 or self.batch_size < 1:
            raise ValueError("bad step/batch configuration")
        if self.combined_lambda < 0:
            raise ValueError("combined_lambda must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")


@dataclass
class MetricsRow:
    step: int
    wall_ms: float
    metric: str
    value: float
    split: str


def critic_schedule(step, cfg: TrainConfig):
    """Critic updates to run before generator step ``step`` (0-indexed)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.boost_first_steps or step % cfg.boost_every == 0:
        return cfg.boost_updates
    return cfg.n_critic


def _encode_rng(rng):
    """PCG64 state as 16-bit chunks, exactly representable in f32 and f64."""
    st = rng.bit_generator.state
    chunks = []
    for key in ("state", "inc"):
        v = st["state"][key]
        chunks.extend((v >> (16 * i)) & 0xFFFF for i in range(8))
    chunks.append(int(st["has_uint32"]))
    u = int(st["uinteger"])
    chunks.extend((u & 0xFFFF, (u >> 16) & 0xFFFF))
    return np.array(chunks, dtype=np.float64)


def _decode_rng(arr):
    vals = [int(round(float(x))) for x in np.asarray(arr).reshape(-1)]
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": sum(v << (16 * i) for i, v in enumerate(vals[:8])),
                  "inc": sum(v << (16 * i) for i, v in enumerate(vals[8:16]))},
        "has_uint32": vals[16],
        "uinteger": vals[17] | (vals[18] << 16),
    }
    return np.random.Generator(bg)


class RunState:
    """Step counter plus three independent seeded streams (data, noise, dequantization)."""

    def __init__(self, seed):
        self.seed = seed
        self.step = 0
        data_ss, noise_ss, deq_ss = np.random.SeedSequence(seed).spawn(3)
        self.data = np.random.default_rng(data_ss)
        self.noise = np.random.default_rng(noise_ss)
        self.deq = np.random.default_rng(deq_ss)

    def state_arrays(self):
        return {"rng.data": _encode_rng(self.data),
                "rng.noise": _encode_rng(self.noise),
                "rng.deq": _encode_rng(self.deq)}

    def load_state_arrays(self, arrays):
        self.data = _decode_rng(arrays["rng.data"])
        self.noise = _decode_rng(arrays["rng.noise"])
        self.deq = _decode_rng(arrays["rng.deq"])


def _critic_space(x, origin):
    """Critic inputs: images move from [0,1) to [-1,1]; the 2-D track passes through."""
    if origin == "idx_images":
        return 2.0 * x - 1.0
    return x


class Trainer:
    """One training run: owns models, optimizers, streams and the metric log."""

    def __init__(self, objective, gen, train_ds, valid_ds, cfg: TrainConfig, critic=None):
        if objective not in ("mle", "wgan", "combined"):
            raise ValueError(f"unknown objective {objective!r}")
        if objective != "mle" and critic is None:
            raise ValueError(f"{objective} training needs a critic")
        self.objective = objective
        self.gen = gen
        self.critic = critic
        self.train_ds = train_ds
        self.valid_ds = valid_ds
        self.cfg = cfg
        self.state = RunState(cfg.seed)
        self.dtype = ad.DTYPES[cfg.precision]
        if objective == "mle":
            self.gen_opt = Adam(gen.params, lr=cfg.lr_mle)
            self.critic_opt = None
        else:
            self.gen_opt = RMSProp(gen.params, lr=cfg.lr_gen_adv)
            self.critic_opt = RMSProp(critic.params, lr=cfg.lr_critic)
        self.rows: list[MetricsRow] = []
        self.last_w = 0.0
        self.last_gen_loss = 0.0

    # -- batches ------------------------------------------------------------

    def _data_batch(self):
        x = self.train_ds.minibatch(self.state.data, self.cfg.batch_size, self.state.deq)
        return x.astype(self.dtype, copy=False)

    def _gen_batch(self, n, taped):
        z = self.state.noise.standard_normal((n, self.gen.D)).astype(self.dtype, copy=False)
        if taped:
            return self.gen.forward(Tensor(z))[0]
        with ad.no_grad():
            return self.gen.forward(Tensor(z))[0].data

    # -- steps --------------------------------------------------------------

    def _check(self, loss):
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged(f"non-finite loss at generator step {self.state.step}")
        return loss

    def _mle_step(self):
        x = self._data_batch()
        loss = -1.0 * self.gen.log_prob(Tensor(x)).mean()
        self._check(loss)
        ad.backward(loss)
        self.gen_opt.step()
        self.gen.params.zero_grad()
        self.last_gen_loss = float(loss.data)

    def _critic_update(self):
        cfg = self.cfg
        origin = self.train_ds.origin
        x_r = _critic_space(self._data_batch(), origin)
        x_g = _critic_space(self._gen_batch(cfg.batch_size, taped=False), origin)
        if isinstance(self.critic, FastCritic):
            x_e = _critic_space(self._gen_batch(cfg.extra_samples, taped=False), origin)
            obj = wgan_objective(self.critic, x_r, x_g, x_e)
        else:
            obj = wgan_objective(self.critic, x_r, x_g)
        self._check(obj)
        ad.backward(-1.0 * obj)
        self.critic_opt.step()
        self.critic.params.zero_grad()
        clip_to_box(self.critic.params, cfg.clip_c, self.critic.clip_set)
        self.last_w = float(obj.data)

    def _generator_adversarial_step(self):
        cfg = self.cfg
        origin = self.train_ds.origin
        for _ in range(critic_schedule(self.state.step, cfg)):
            self._critic_update()
        x_g = _critic_space(self._gen_batch(cfg.batch_size, taped=True), origin)
        if isinstance(self.critic, FastCritic):
            # extra samples enter as plain arrays: no gradient reaches them
            x_e = _critic_space(self._gen_batch(cfg.extra_samples, taped=False), origin)
            score = self.critic.value(x_g, x_e=x_e)
        else:
            score = self.critic.value(x_g)
        loss = -1.0 * score.mean()
        if self.objective == "combined" and cfg.combined_lambda > 0:
            x = self._data_batch()
            nll = -1.0 * self.gen.log_prob(Tensor(x)).mean()
            loss = nll + cfg.combined_lambda * loss
        self._check(loss)
        ad.backward(loss)
        self.gen_opt.step()
        self.gen.params.zero_grad()
        self.critic.params.zero_grad()
        self.last_gen_loss = float(loss.data)

    # -- metrics ------------------------------------------------------------

    def _nll(self, ds):
        head = min(ds.n, EVAL_ROWS)
        if ds.origin == "idx_images":
            from .datapipe import dequantize, scale_to_unit
            z1, _ = scale_to_unit(dequantize(ds.pixels[:head], self.state.deq))
            x = z1
        else:
            x = ds.examples[:head]
        with ad.no_grad():
            lp = self.gen.log_prob(Tensor(x.astype(self.dtype, copy=False)))
        return float(-lp.data.mean())

    def _emit(self, sink, metric, value, split):
        row = MetricsRow(self.state.step, 0.0, metric, float(value), split)
        self.rows.append(row)
        if sink is not None:
            sink(row)

    def _evaluate(self, sink):
        nll = {"train": self._nll(self.train_ds), "valid": self._nll(self.valid_ds)}
        for split, value in nll.items():
            self._emit(sink, "nll", value, split)
        if self.objective != "mle":
            self._emit(sink, "w_critic", self.last_w, "train")
            self._emit(sink, "gen_loss", self.last_gen_loss, "train")
        if self.train_ds.origin == "idx_images":
            from .datapipe import bits_per_dim
            for split, value in nll.items():
                self._emit(sink, "bpd", bits_per_dim(-value, self.train_ds.dim), split)

    # -- driver -------------------------------------------------------------

    def run(self, until=None, sink=None, checkpoint_cb=None):
        """Advance to ``until`` (default: the configured total) generator steps."""
        cfg = self.cfg
        stop = cfg.total_generator_steps if until is None else min(until, cfg.total_generator_steps)
        while self.state.step < stop:
            try:
                if self.objective == "mle":
                    self._mle_step()
                else:
                    self._generator_adversarial_step()
            except ad.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite value at generator step {self.state.step}: {e}") from e
            self.state.step += 1
            at_eval = self.state.step % cfg.eval_interval == 0
            if at_eval or self.state.step == cfg.total_generator_steps:
                self._evaluate(sink)
                if checkpoint_cb is not None:
                    checkpoint_cb(self)
        return self.rows

    # -- persistence ----------------------------------------------------------

    def snapshot(self):
        """Everything needed to resume bit-exactly, as named arrays."""
        arrays = {f"gen.{n}": a.copy() for n, a in self.gen.params.arrays().items()}
        arrays.update({f"opt.gen.{k}": v.copy()
                       for k, v in self.gen_opt.state_arrays().items()})
        if self.critic is not None:
            arrays.update({f"critic.{n}": a.copy()
                           for n, a in self.critic.params.arrays().items()})
            arrays.update({f"opt.critic.{k}": v.copy()
                           for k, v in self.critic_opt.state_arrays().items()})
        arrays.update(self.state.state_arrays())
        arrays["meta.levels"] = np.array([self.gen.levels], dtype=np.float64)
        arrays["meta.dim"] = np.array([self.gen.D], dtype=np.float64)
        arrays["meta.hidden_width"] = np.array([self.gen.hidden_width], dtype=np.float64)
        return arrays

    def load_snapshot(self, arrays, step):
        self.gen.params.load_arrays(
            {n[len("gen."):]: a for n, a in arrays.items() if n.startswith("gen.")})
        self.gen_opt.load_state_arrays(
            {n[len("opt.gen."):]: a for n, a in arrays.items() if n.startswith("opt.gen.")})
        if self.critic is not None:
            self.critic.params.load_arrays(
                {n[len("critic."):]: a for n, a in arrays.items() if n.startswith("critic.")})
            self.critic_opt.load_state_arrays(
                {n[len("opt.critic."):]: a for n, a in arrays.items()
                 if n.startswith("opt.critic.")})
        self.state.load_state_arrays(arrays)
        self.state.step = step


def train_mle(model, train_ds, valid_ds, cfg, sink=None):
    """Minimize mean negative log-density; returns the metric rows."""
    return Trainer("mle", model, train_ds, valid_ds, cfg).run(sink=sink)


def train_wgan(gen, critic, train_ds, valid_ds, cfg, sink=None):
    """Alternate scheduled critic ascent (with clipping) and generator descent."""
    return Trainer("wgan", gen, train_ds, valid_ds, cfg, critic=critic).run(sink=sink)


def train_combined(gen, critic, train_ds, valid_ds, cfg, sink=None):
    """Generator loss = mean NLL + lambda * (-mean critic score of samples)."""
    return Trainer("combined", gen, train_ds, valid_ds, cfg, critic=critic).run(sink=sink)
