"""Command-line entry point: ``octane {prepare,train,test,gradcheck,sweep}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O error. ``OCTANE_SEED`` overrides the configured seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (
    line_chart,
    load_model,
    save_model,
    sha256_file,
    write_csv,
    write_pgm,
)
from .autoencoder import RegWeights
from .data import (
    CorruptionSpec,
    IdxFormatError,
    ImageSet,
    corrupt,
    filter_and_split,
    load_idx,
    stack,
    synthetic_streaks,
)
from .dynamics import StepFailure
from .training import (
    TrainConfig,
    config_dict,
    gradient_check,
    memory_report,
    state_ranks,
    streak_instance,
    sweep,
    test,
    train,
)

log = logging.getLogger("octane")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SPLITS = ("train", "valid", "test")
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


# --- config files ----------------------------------------------------------

_REG_KEYS = ("lam1", "lam2", "lam3", "lam4")


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_budget(v: str):
    return v if "tau" in v else float(v)


def _parse_adjoint(v: str):
    low = v.lower()
    if low == "state":
        return "state"
    if low == "none":
        return None
    return float(v)


_PARSERS = {
    "N": int, "T": float, "m1": int, "m2": int, "seed": int, "delta": float, "batch_fraction": float,
    "grad_tol": float, "test_batch": int, "l2_measure": str, "linearize": str, "adjoint_norm": _parse_adjoint,
    "strict": _parse_bool, "scale_h0": _parse_bool, "bias_init": str, "M_s": _parse_budget, "M_r": _parse_budget,
    **{k: float for k in _REG_KEYS},
}
assert set(_PARSERS) - set(_REG_KEYS) == {f.name for f in fields(TrainConfig)} - {"reg"}


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values, reg = {}, {}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            parsed = _PARSERS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        (reg if key in _REG_KEYS else values)[key] = parsed
    try:
        if reg:
            values["reg"] = RegWeights(**{**vars(TrainConfig().reg), **reg})
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def config_lines(cfg: TrainConfig) -> str:
    out = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "reg":
            out += [f"{k} = {getattr(v, k)!r}" for k in _REG_KEYS]
        else:
            out.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(out) + "\n"


def load_config(path) -> TrainConfig:
    cfg = parse_config(Path(path).read_text(), str(path))
    env = os.environ.get("OCTANE_SEED")
    if env is not None:
        try:
            cfg = replace(cfg, seed=int(env))
        except ValueError:
            raise ConfigError(f"OCTANE_SEED must be an integer, got {env!r}") from None
    return cfg


# --- run directories -------------------------------------------------------

def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(out: Path, command: str, inputs: list, config=None, seed=None, started=None, extra=None) -> None:
    man = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "output_dir": str(out),
        "started": started,
        "finished": _now(),
    }
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def load_split(data_dir: Path, split: str):
    x_in = np.load(data_dir / f"{split}_input.npy")
    x_ref = np.load(data_dir / f"{split}_clean.npy")
    return x_in, x_ref


def _write_recons(out: Path, prefix: str, x_in, recon, x_ref, count: int) -> None:
    for i in range(min(count, x_in.shape[2])):
        for tag, arr in (("input", x_in), ("recon", recon), ("clean", x_ref)):
            write_pgm(out / f"{prefix}_{i:03d}_{tag}.pgm", arr[:, :, i])


def _rank_rows(profile, n_enc: int, n_layers: int):
    rows = []
    for j in range(n_layers + 1):
        enc = j <= n_enc
        dec = j >= n_enc
        get = lambda seq, k, ok: seq[k] if ok and seq and 0 <= k < len(seq) else None
        rows.append((j, get(profile.forward_encoder, j, enc), get(profile.forward_decoder, j - n_enc, dec),
                     get(profile.backward_encoder, j, enc), get(profile.backward_decoder, j - n_enc, dec)))
    return rows


def _rank_chart(path, rows, cols, labels, title):
    series = {}
    for c, lab in zip(cols, labels):
        xs = [r[0] for r in rows]
        ys = [float(r[c][0]) if r[c] is not None else float("nan") for r in rows]
        series[lab] = (xs, ys)
    line_chart(path, series, title, "layer", "row-mode rank", dashed=[l for l in labels if "dec" in l])


# --- commands --------------------------------------------------------------

def cmd_prepare(args) -> int:
    started = _now()
    out = Path(args.out)
    if not 0 <= args.digit <= 9:
        raise UsageError(f"digit must be in 0..9, got {args.digit}")
    seq = np.random.SeedSequence(args.seed)
    split_seed, *noise_seeds = (int(s.generate_state(1)[0]) for s in seq.spawn(4))
    counts = (args.n_train, args.n_valid, args.n_test)
    inputs = []
    if args.synthetic:
        total = sum(counts)
        pool = synthetic_streaks(total, args.size, split_seed)
        bounds = np.cumsum((0,) + counts)
        sets = [ImageSet(pool.images[a:b], None, s) for s, a, b in zip(SPLITS, bounds[:-1], bounds[1:])]
    else:
        mnist = Path(args.mnist_dir)
        paths = []
        for stem in MNIST_FILES:
            cand = [mnist / stem, mnist / f"{stem}.gz"]
            found = next((c for c in cand if c.is_file()), None)
            if found is None:
                raise FileNotFoundError(f"missing {stem}[.gz] in {mnist}")
            paths.append(found)
        inputs = paths
        sets = filter_and_split(load_idx(*paths), args.digit, *counts, split_seed)
    out.mkdir(parents=True, exist_ok=True)
    for s, ns in zip(sets, noise_seeds):
        spec = CorruptionSpec(args.task, args.noise_sigma, args.blur_sigma, None, ns, not args.no_clamp)
        np.save(out / f"{s.split}_clean.npy", stack(s))
        np.save(out / f"{s.split}_input.npy", stack(corrupt(s, spec)))
    params = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(out, "prepare", inputs, params, args.seed, started)
    print(f"wrote {', '.join(f'{s.split}={len(s)}' for s in sets)} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    data, out = Path(args.data), Path(args.out)
    x_in, x_ref = load_split(data, "train")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_lines(cfg))
    res = train(x_in, x_ref, cfg)
    model = res.model
    save_model(out / "model.npz", model)
    prof = res.profiles[-1]
    rows = _rank_rows(prof, model.params.n_enc, cfg.N)
    write_csv(out / "ranks.csv", ("layer", "r_fe", "r_fd", "r_be", "r_bd"), rows)
    write_csv(out / "metrics.csv", ("round", "alpha_train"), [(r.round, r.alpha_train) for r in res.rounds])
    ranks = state_ranks(prof)
    tt_b, dense_b, _ = memory_report(ranks, x_in.shape[:2] + (model.batch_size,))
    write_csv(out / "memory.csv", ("layer", "tt_bytes", "dense_bytes"), zip(range(len(ranks)), tt_b, dense_b))
    if (data / "valid_input.npy").is_file():
        v_in, v_ref = load_split(data, "valid")
        vt = test(model, v_in, v_ref)
        m = vt.metrics
        write_csv(out / "valid_metrics.csv", ("alpha_valid", "mse", "psnr", "ssim"),
                  [(m.alpha, m.mse, m.psnr_db, m.ssim)])
        if args.images:
            (out / "recon").mkdir(exist_ok=True)
            _write_recons(out / "recon", "valid", v_in, vt.reconstructions, v_ref, args.images)
    if not args.no_plots:
        _rank_chart(out / "ranks.svg", rows, (1, 2, 3, 4), ("f enc", "g dec", "P enc", "P~ dec"), "rank profile")
    write_manifest(out, "train", [Path(args.config), data / "train_input.npy", data / "train_clean.npy"],
                   config_dict(cfg), cfg.seed, started,
                   {"rounds": [vars(r) for r in res.rounds], "wall_time_s": res.wall_time_s})
    print(f"alpha_train per round: {', '.join(f'{a:.6g}' for a in res.alpha_train)}")
    return EXIT_OK


def cmd_test(args) -> int:
    started = _now()
    model = load_model(args.model)
    data, out = Path(args.data), Path(args.out)
    x_in, x_ref = load_split(data, args.split)
    out.mkdir(parents=True, exist_ok=True)
    res = test(model, x_in, x_ref, args.batch_size)
    m = res.metrics
    write_csv(out / "test_metrics.csv", ("alpha_test", "mse", "psnr", "ssim"), [(m.alpha, m.mse, m.psnr_db, m.ssim)])
    n_enc = model.params.n_enc
    rows = []
    for j in range(model.config.N + 1):
        enc, dec = j <= n_enc, j >= n_enc
        rows.append((j, res.encoder_ranks[j] if enc else None, res.decoder_ranks[j - n_enc] if dec else None,
                     res.prescribed_encoder[j] if enc else None, res.prescribed_decoder[j - n_enc] if dec else None))
    write_csv(out / "test_ranks.csv", ("layer", "r_fe", "r_fd", "cap_fe", "cap_fd"), rows)
    write_csv(out / "memory.csv", ("layer", "tt_bytes", "dense_bytes"),
              zip(range(len(m.tt_bytes_per_layer)), m.tt_bytes_per_layer, m.dense_bytes_per_layer))
    if args.images:
        (out / "recon").mkdir(exist_ok=True)
        _write_recons(out / "recon", args.split, x_in, res.reconstructions, x_ref, args.images)
    if not args.no_plots:
        _rank_chart(out / "test_ranks.svg", rows, (1, 2), ("f enc", "g dec"), f"{args.split} rank profile")
    write_manifest(out, "test", [Path(args.model), data / f"{args.split}_input.npy"], config_dict(model.config),
                   model.config.seed, started, {"violations": m.violations, "savings": m.savings})
    print(f"alpha_test={m.alpha:.6g} psnr={m.psnr_db:.4f} ssim={m.ssim:.4f} savings={100 * m.savings:.2f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(os.environ.get("OCTANE_SEED", args.seed))
    res = gradient_check(streak_instance(seed), seed=seed)
    write_csv(out / "gradcheck.csv", ("variable", "h", "err_fwd", "err_central"), res.rows)
    fb, cb = tuple(args.fwd_band), tuple(args.central_band)
    ok = res.passed(fb, cb)
    summary = []
    for g, (s1, s2) in res.slopes.items():
        good = fb[0] <= s1 <= fb[1] and cb[0] <= s2 <= cb[1]
        summary.append((g, s1, s2, "pass" if good else "fail"))
        print(f"{g:>3}: one-sided slope {s1:.3f}, central slope {s2:.3f} [{'pass' if good else 'FAIL'}]")
    write_csv(out / "slopes.csv", ("variable", "slope_fwd", "slope_central", "status"), summary)
    write_manifest(out, "gradcheck", [], {"fwd_band": fb, "central_band": cb}, seed, started)
    return EXIT_OK if ok else EXIT_NUMERIC


def _int_list(s: str) -> list:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _float_list(s: str) -> list:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def cmd_sweep(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    data, out = Path(args.data), Path(args.out)
    splits = {s: load_split(data, s) for s in SPLITS if (data / f"{s}_input.npy").is_file()}
    if "train" not in splits:
        raise FileNotFoundError(f"no train split in {data}")
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep(splits, args.N_list, args.T_list, cfg, args.jobs)
    header = ("N", "T", "tau", "alpha_train", "alpha_valid", "alpha_test", "psnr", "ssim")
    write_csv(out / "sweep.csv", header, [tuple(getattr(r, h) for h in header) for r in rows])
    failed = [r for r in rows if r.status != "ok"]
    for r in failed:
        log.warning("cell N=%d T=%g: %s", r.N, r.T, r.status)
    if not args.no_plots:
        for metric in ("alpha_train", "alpha_test", "psnr", "ssim"):
            series = {f"T={T:g}": ([r.N for r in rows if r.T == T], [getattr(r, metric) for r in rows if r.T == T])
                      for T in args.T_list}
            line_chart(out / f"sweep_{metric}.svg", series, f"{metric} vs N", "N", metric)
    write_manifest(out, "sweep", [Path(args.config)], config_dict(cfg), cfg.seed, started,
                   {"N_list": args.N_list, "T_list": args.T_list, "failed_cells": len(failed)})
    for r in rows:
        print(f"N={r.N:>3} T={r.T:<5g} tau={r.tau:.4g} alpha_train={r.alpha_train:.4g} alpha_test={r.alpha_test:.4g}")
    return EXIT_NUMERIC if failed and len(failed) == len(rows) else EXIT_OK


# --- parser ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="octane", description="Low-rank tensor ODE autoencoder: data prep, training, testing.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("prepare", help="build clean/corrupted split tensors")
    q.add_argument("--mnist-dir", default="data/mnist")
    q.add_argument("--digit", type=int, default=2)
    q.add_argument("--task", choices=("noise", "blur"), default="noise")
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--n-train", type=int, default=20)
    q.add_argument("--n-valid", type=int, default=20)
    q.add_argument("--n-test", type=int, default=1000)
    q.add_argument("--noise-sigma", type=float, default=0.05)
    q.add_argument("--blur-sigma", type=float, default=1.0)
    q.add_argument("--no-clamp", action="store_true", help="keep noisy values outside [0, 1]")
    q.add_argument("--synthetic", action="store_true", help="use random streak images instead of MNIST")
    q.add_argument("--size", type=int, default=8, help="image side for --synthetic")
    q.set_defaults(func=cmd_prepare)

    q = sub.add_parser("train", help="train on <data>/train_*.npy")
    q.add_argument("--config", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--images", type=int, default=5, help="reconstructions to save per split (0 for none)")
    q.add_argument("--no-plots", action="store_true")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("test", help="evaluate a trained model")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--split", choices=SPLITS, default="test")
    q.add_argument("--batch-size", type=int, default=None, help="default: test_batch from the model config (20)")
    q.add_argument("--images", type=int, default=5)
    q.add_argument("--no-plots", action="store_true")
    q.set_defaults(func=cmd_test)

    q = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.add_argument("--fwd-band", type=float, nargs=2, default=(0.8, 1.2), metavar=("LO", "HI"))
    q.add_argument("--central-band", type=float, nargs=2, default=(1.8, 2.2), metavar=("LO", "HI"))
    q.set_defaults(func=cmd_gradcheck)

    q = sub.add_parser("sweep", help="independent runs over a grid of (N, T)")
    q.add_argument("--config", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--N-list", dest="N_list", type=_int_list, required=True)
    q.add_argument("--T-list", dest="T_list", type=_float_list, required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--no-plots", action="store_true")
    q.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"octane: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StepFailure, FloatingPointError) as exc:
        print(f"octane: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IdxFormatError) as exc:
        print(f"octane: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"octane: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
