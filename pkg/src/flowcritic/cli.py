"""Command-line entry points, run configuration and on-disk artifacts.

Exit codes: 0 success, 1 bad config/usage, 2 divergence abort, 3 disk full,
4 checkpoint CRC mismatch, 5 bad checkpoint magic, 6 unsupported version.
"""

from __future__ import annotations

import argparse
import csv
import errno
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import (CheckpointCrcError, CheckpointMagicError, CheckpointVersionError,
                         load_checkpoint, save_checkpoint)
from .critics import Critic, FastCritic
from .datapipe import (bits_per_dim, dequantize, image_dataset_from_idx, scale_to_unit,
                       split_and_augment, synth_ring)
from .evaluation import (INDEP_BUDGET, dataset_source, generator_source, jacobian_rank,
                         kl_gap, latent_stats, nll_histogram, train_independent_critic, w_hat)
from .flows import build_nvp
from .training import Trainer, TrainConfig, TrainingDiverged

DATA_SEED = 1729          # dataset draws are shared across runs and seeds
SPLIT_RATIOS = (0.8, 0.1, 0.1)
SYNTH_N = 25_000
TRAIN_CRITIC_HIDDEN = 64
EVAL_NLL_ROWS = 4096
JRANK_PROBES = 5

DEFAULTS = {
    "dataset": "synth_ring",
    "levels": "1",
    "hidden_width": "32",
    "objective": "mle",
    "lambda": "0.0",
    "n_critic": "",            # empty -> 5, or 2 for objective=wgan_fast
    "total_steps": "1000",
    "seed": "0",
    "precision": "f64",
    "out_dir": "run_out",
    "clip_c": "0.01",
    "batch_size": "64",
    "eval_interval": "250",
}

OBJECTIVES = ("mle", "wgan", "combined", "wgan_fast")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def parse_config_file(path):
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def resolve_config(path=None, overrides=None):
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = str(value)
    try:
        out = {
            "dataset": cfg["dataset"],
            "levels": int(cfg["levels"]),
            "hidden_width": int(cfg["hidden_width"]),
            "objective": cfg["objective"],
            "lambda": float(cfg["lambda"]),
            "total_steps": int(cfg["total_steps"]),
            "seed": int(cfg["seed"]),
            "precision": cfg["precision"],
            "out_dir": cfg["out_dir"],
            "clip_c": float(cfg["clip_c"]),
            "batch_size": int(cfg["batch_size"]),
            "eval_interval": int(cfg["eval_interval"]),
        }
        out["n_critic"] = int(cfg["n_critic"]) if cfg["n_critic"] != "" \
            else (2 if cfg["objective"] == "wgan_fast" else 5)
    except ValueError as e:
        raise ConfigError(f"bad config value: {e}") from None
    if out["objective"] not in OBJECTIVES:
        raise ConfigError(f"unknown objective {out['objective']!r}")
    if out["precision"] not in ("f32", "f64"):
        raise ConfigError("precision must be f32 or f64")
    return out


def make_datasets(name):
    """Shared, seeded datasets; identical across runs so models are comparable."""
    if name == "synth_ring":
        ring = synth_ring(SYNTH_N, seed=DATA_SEED, dims=2)
    elif name == "synth_ring8":
        ring = synth_ring(SYNTH_N, seed=DATA_SEED, dims=8)
    elif name.endswith(".idx"):
        pixels, hw = image_dataset_from_idx(name)
        return split_and_augment(pixels / 256.0, SPLIT_RATIOS, flip_augment=True,
                                 seed=DATA_SEED + 1, origin="idx_images",
                                 pixels=pixels, image_hw=hw)
    else:
        raise ConfigError(f"unknown dataset {name!r} (synth_ring, synth_ring8 or *.idx)")
    return split_and_augment(ring.examples, SPLIT_RATIOS, flip_augment=False,
                             seed=DATA_SEED + 1, oracle_logpdf=ring.oracle_logpdf)


def build_trainer(cfg):
    train_ds, valid_ds, _ = make_datasets(cfg["dataset"])
    gen = build_nvp(cfg["levels"], train_ds.dim, cfg["hidden_width"],
                    seed=[cfg["seed"], 1], dtype=cfg["precision"])
    tc = TrainConfig(total_generator_steps=cfg["total_steps"],
                     batch_size=cfg["batch_size"], clip_c=cfg["clip_c"],
                     n_critic=cfg["n_critic"], combined_lambda=cfg["lambda"],
                     seed=cfg["seed"], precision=cfg["precision"],
                     eval_interval=cfg["eval_interval"])
    objective = cfg["objective"]
    critic = None
    if objective != "mle":
        cls = FastCritic if objective == "wgan_fast" else Critic
        critic = cls(train_ds.dim, hidden=TRAIN_CRITIC_HIDDEN, clip_c=cfg["clip_c"],
                     seed=[cfg["seed"], 2], dtype=cfg["precision"],
                     image_hw=train_ds.image_hw)
    loop = "wgan" if objective == "wgan_fast" else objective
    return Trainer(loop, gen, train_ds, valid_ds, tc, critic=critic)


class CsvSink:
    """Append-only metrics writer; floats carry 17 significant digits."""

    HEADER = ("step", "wall_ms", "metric", "value", "split")

    def __init__(self, path):
        self._f = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._f)
        self._w.writerow(self.HEADER)

    def __call__(self, row):
        self._w.writerow((row.step, f"{row.wall_ms:.17g}", row.metric,
                          f"{row.value:.17g}", row.split))
        self._f.flush()

    def close(self):
        self._f.close()


def write_pgm(path, images, image_hw):
    """P5 grid of samples; values clamp to 0..255."""
    h, w = image_hw
    n = images.shape[0]
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    px = np.clip(np.floor(images * 256.0), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = px[i].reshape(h, w)
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        f.write(grid.tobytes())


def _acquire_lock(out_dir):
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out_dir} is locked by another writer ({path})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    return path


def _trainer_checkpoint(trainer, out_dir, name=None):
    path = os.path.join(out_dir, name or f"ckpt_{trainer.state.step:08d}.rnvp")
    save_checkpoint(path, trainer.snapshot(), dtype=trainer.cfg.precision,
                    step=trainer.state.step, seed=trainer.cfg.seed)
    return path


def cmd_train(args):
    cfg = resolve_config(args.config, {
        "seed": args.seed, "out_dir": args.out, "levels": args.levels,
        "objective": args.objective, "total_steps": args.steps,
        "n_critic": args.n_critic, "lambda": getattr(args, "lambda"),
        "precision": args.precision,
    })
    os.makedirs(cfg["out_dir"], exist_ok=True)
    lock = _acquire_lock(cfg["out_dir"])
    sink = None
    last_ckpt = [None]
    try:
        trainer = build_trainer(cfg)
        sink = CsvSink(os.path.join(cfg["out_dir"], "metrics.csv"))

        def checkpoint_cb(t):
            last_ckpt[0] = _trainer_checkpoint(t, cfg["out_dir"])

        try:
            trainer.run(sink=sink, checkpoint_cb=checkpoint_cb)
        except TrainingDiverged as e:
            ref = last_ckpt[0] or "no checkpoint written yet"
            print(f"aborted: {e}; last good checkpoint: {ref}", file=sys.stderr)
            return 2
        _trainer_checkpoint(trainer, cfg["out_dir"], "ckpt_final.rnvp")
        return 0
    finally:
        if sink is not None:
            sink.close()
        os.unlink(lock)


class _UniformStub:
    """Debugging density: log-probability zero everywhere on the unit cube."""

    def __init__(self, dim):
        self.D = dim
        self.dtype = np.float64

    def log_prob(self, x):
        return Tensor(np.zeros(x.shape[0]))


def _model_from_checkpoint(path):
    if path.startswith("uniform:"):
        return _UniformStub(int(path.split(":", 1)[1])), None
    ck = load_checkpoint(path)
    gen = build_nvp(int(ck.arrays["meta.levels"][0]), int(ck.arrays["meta.dim"][0]),
                    int(ck.arrays["meta.hidden_width"][0]), seed=0, dtype=ck.dtype)
    gen.params.load_arrays({n[len("gen."):]: a for n, a in ck.arrays.items()
                            if n.startswith("gen.")})
    return gen, ck


def _eval_rows(ds, seed):
    """Deterministic z1-space rows for NLL evaluation."""
    head = min(ds.n, EVAL_NLL_ROWS)
    if ds.origin == "idx_images":
        z1, _ = scale_to_unit(dequantize(ds.pixels[:head], np.random.default_rng(seed)))
        return z1
    return ds.examples[:head]


def _mean_nll(model, rows):
    with ad.no_grad():
        lp = model.log_prob(Tensor(np.asarray(rows, dtype=np.float64)))
    return float(-lp.data.mean())


def cmd_eval(args):
    kinds = args.kinds.split(",")
    unknown = set(kinds) - {"wdist", "bpd", "latents", "nllhist", "jrank", "klgap"}
    if unknown:
        raise ConfigError(f"unknown report kinds: {sorted(unknown)}")
    model, _ = _model_from_checkpoint(args.checkpoint)
    if isinstance(model, _UniformStub) and kinds != ["bpd"]:
        raise ConfigError("the uniform stub supports only kinds=bpd")
    train_ds, valid_ds, test_ds = make_datasets(args.data)
    os.makedirs(args.out, exist_ok=True)

    def table(name, header, rows):
        with open(os.path.join(args.out, f"{name}.csv"), "w", newline="",
                  encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)

    for kind in kinds:
        if kind == "bpd":
            rows = []
            for ds in (train_ds, valid_ds):
                nll = _mean_nll(model, _eval_rows(ds, DATA_SEED + 7))
                if ds.origin == "idx_images":
                    rows.append((ds.split, f"{nll:.17g}",
                                 f"{bits_per_dim(-nll, ds.dim):.17g}", "bits_per_dim"))
                else:
                    rows.append((ds.split, f"{nll:.17g}",
                                 f"{nll / ds.dim:.17g}", "nats_per_dim"))
            table("bpd", ("split", "nll_nats", "value", "unit"), rows)
        elif kind == "wdist":
            gen_src = generator_source(model, valid_ds.origin)
            ic = train_independent_critic(dataset_source(valid_ds), gen_src,
                                          valid_ds.dim, budget=INDEP_BUDGET,
                                          seed=999, image_hw=valid_ds.image_hw)
            rows = []
            for ds in (valid_ds, train_ds, test_ds):
                est = w_hat(ic, dataset_source(ds), gen_src, seed=998)
                rows.append((ds.split, f"{est.value:.17g}", f"{est.std:.17g}", est.n))
            table("wdist", ("pair", "w_hat", "boot_std", "n"), rows)
        elif kind == "latents":
            stats = latent_stats(model, _eval_rows(valid_ds, DATA_SEED + 7))
            rows = [("mu", i, 0, f"{v:.17g}") for i, v in enumerate(stats.mu)]
            rows += [("sigma", i, 0, f"{v:.17g}") for i, v in enumerate(stats.sigma)]
            rows += [("hist2d", i, j, f"{stats.hist2d[i, j]:.17g}")
                     for i in range(stats.hist2d.shape[0])
                     for j in range(stats.hist2d.shape[1])]
            table("latents", ("record", "a", "b", "value"), rows)
        elif kind == "nllhist":
            counts, edges, _ = nll_histogram(model, _eval_rows(valid_ds, DATA_SEED + 7), 50)
            rows = [("edge", i, f"{v:.17g}") for i, v in enumerate(edges)]
            rows += [("count", i, str(int(v))) for i, v in enumerate(counts)]
            table("nllhist", ("record", "index", "value"), rows)
        elif kind == "jrank":
            probes = np.random.default_rng(777).standard_normal((JRANK_PROBES, model.D))
            report = jacobian_rank(model, probes)
            rows = [("sval", k, i, f"{report.singular_values[k, i]:.17g}")
                    for k in range(JRANK_PROBES) for i in range(model.D)]
            rows += [("rank", k, 0, str(int(report.ranks[k]))) for k in range(JRANK_PROBES)]
            table("jrank", ("record", "probe", "index", "value"), rows)
        elif kind == "klgap":
            kl_u, kl_d = kl_gap(model, n=20_000, seed=555)
            table("klgap", ("metric", "value"),
                  [("kl_unbiased", f"{kl_u:.17g}"), ("kl_disc", f"{kl_d:.17g}")])
    return 0


def cmd_sample(args):
    model, ck = _model_from_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    image_hw = None
    if args.data is not None:
        _, valid_ds, _ = make_datasets(args.data)
        image_hw = valid_ds.image_hw
    if args.mode == "fresh":
        x, logp = model.sample(args.n, seed=args.seed)
    else:
        if args.data is None:
            raise ConfigError("partial modes need --data for the input batch")
        rows = _eval_rows(valid_ds, args.seed)[:args.n]
        half = "first" if args.mode == "partial_first" else "second"
        x = model.partial_resample(rows, half, seed=[args.seed, 3])
        with ad.no_grad():
            logp = model.log_prob(Tensor(x)).data
    if image_hw is not None:
        write_pgm(os.path.join(args.out, "samples.pgm"), x, image_hw)
        rows_out = [(i, f"{v:.17g}") for i, v in enumerate(logp)]
        header = ("index", "logprob")
    else:
        rows_out = [tuple(f"{c:.17g}" for c in row) + (f"{v:.17g}",)
                    for row, v in zip(x, logp)]
        header = tuple(f"x{k}" for k in range(x.shape[1])) + ("logprob",)
    with open(os.path.join(args.out, "samples.csv"), "w", newline="",
              encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows_out)
    return 0


def _build_parser():
    p = _Parser(prog="flowcritic",
                description="Train and compare one invertible generator under "
                            "likelihood and Wasserstein-critic objectives.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training loop")
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--levels", type=int, default=None)
    t.add_argument("--objective", choices=OBJECTIVES, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--n-critic", type=int, default=None)
    t.add_argument("--lambda", type=float, default=None)
    t.add_argument("--precision", choices=("f32", "f64"), default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="write report CSVs for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--kinds", default="wdist,bpd")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="draw or partially resample examples")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("fresh", "partial_first", "partial_second"),
                   default="fresh")
    s.add_argument("--data", default=None)
    s.add_argument("--out", default="sample_out")
    s.set_defaults(fn=cmd_sample)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CheckpointCrcError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except CheckpointMagicError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except CheckpointVersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 6
    except OSError as e:
        if e.errno == errno.ENOSPC:
            print("error: disk full", file=sys.stderr)
            return 3
        raise


if __name__ == "__main__":
    sys.exit(main())
