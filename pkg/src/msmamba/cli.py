"""``msmamba`` command line: train, eval, forecast, synth, gradcheck, profile, sweep-scales.

Flags are flat ``--key value`` pairs. ``--config FILE`` supplies ``key=value``
lines (keys are flag names without dashes); explicit flags win over the file.
Human-readable tables go to stdout, CSV artifacts to ``--out`` (default:
``$MSMAMBA_OUT`` or ``./msmamba_out``). Exit codes: 0 ok, 2 configuration
error, 3 data error, 4 numeric abort, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_csv, atomic_write_text
from .data import SynthSpec, TimeSeriesDataset, chronological_split, load_csv, save_csv, standardize, synth_multiscale, window
from .errors import ConfigError, DataError, DomainError, NumericError
from .model import ForecastModel, ModelConfig, cost_report, load_checkpoint, model_forward, mse_loss, save_checkpoint
from .training import TrainConfig, derive_seed, evaluate, log_scale_trajectory, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5
GRADCHECK_MAX_PARAMS = 50_000
MANIFEST_SKIP = {"command", "config", "func"}

logger = logging.getLogger("msmamba")


class GradcheckFailure(Exception):
    pass


# --------------------------------------------------------------------------
# flag parsing


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _strs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _default_out() -> str:
    return os.environ.get("MSMAMBA_OUT") or "msmamba_out"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key=value lines; explicit flags override it")
    p.add_argument("--out", default=None, help="output directory (default $MSMAMBA_OUT or ./msmamba_out)")
    p.add_argument("--seed", type=int, default=0)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default=None, help="CSV file, one row per timestep")
    p.add_argument("--resolution", default="")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic multi-period generator")
    p.add_argument("--synth-length", type=int, default=10_000)
    p.add_argument("--synth-variates", type=int, default=4)
    p.add_argument("--synth-periods", type=_floats, default=(8.0, 64.0))
    p.add_argument("--synth-amplitudes", type=_floats, default=(1.0, 1.0))
    p.add_argument("--synth-noise", type=float, default=0.1)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--split", type=_floats, default=(0.7, 0.1, 0.2))


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--L", type=int, default=96, help="lookback length")
    p.add_argument("--T", type=int, default=96, help="forecast horizon")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--scales", type=int, default=4, help="number of parallel scales n")
    p.add_argument("--strategy", choices=("fixed", "learnable", "dynamic"), default="fixed")
    p.add_argument("--alphas", type=_floats, default=None, help="fixed-strategy multipliers, e.g. 1,2,4,8")
    p.add_argument("--dynamic-hidden", type=int, default=None)
    p.add_argument("--d-state", type=int, default=8)
    p.add_argument("--conv-width", type=int, default=4)
    p.add_argument("--expand", type=int, default=2)
    p.add_argument("--dt-rank", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--dt-min", type=float, default=1e-3)
    p.add_argument("--dt-max", type=float, default=0.1)
    p.add_argument("--unidirectional", action="store_true")
    p.add_argument("--no-residual", action="store_true")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--log-interval", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msmamba", description="Multi-scale selective SSM forecaster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, history, scales, manifest")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for one or more checkpoints")
    _add_common(p), _add_data(p)
    p.add_argument("--checkpoint", type=_strs, required=False, default=None, help="comma-separated checkpoint paths")
    p.add_argument("--eval-split", choices=("train", "val", "test"), default="test")
    p.add_argument("--denormalized", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="de-normalized forecast from one origin")
    _add_common(p), _add_data(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--origin", type=int, default=None, help="index of the first input step")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("synth", help="write a synthetic multi-period CSV")
    _add_common(p), _add_data(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    _add_common(p), _add_model(p)
    p.set_defaults(L=8, T=4, d_model=16, d_state=1, scales=2)
    p.add_argument("--variates", type=int, default=3)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--strategies", type=_strs, default=("fixed", "learnable", "dynamic"))
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("profile", help="parameter / MAC / memory table over a config grid")
    _add_common(p), _add_model(p)
    p.add_argument("--scales-list", type=_ints, default=(1, 4))
    p.add_argument("--variates-list", type=_ints, default=(7,))
    p.add_argument("--d-model-list", type=_ints, default=None)
    p.add_argument("--timing", action="store_true", help="also time one batch-1 forward (after a warmup)")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sweep-scales", help="train one model per (n, seed) and compare val MSE")
    _add_common(p), _add_data(p), _add_model(p), _add_train(p)
    p.add_argument("--scales-list", type=_ints, default=(2, 3, 4, 5, 6))
    p.add_argument("--seeds", type=_ints, default=(0,))
    p.set_defaults(func=cmd_sweep_scales)
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse exposes no public accessor
        if command in action.choices:
            return action.choices[command]
    raise ConfigError(f"unknown command {command!r}")


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        file_values = read_config_file(args.config)
        sub = _subparser(parser, args.command)
        actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
        defaults = {}
        for key, value in file_values.items():
            if key in MANIFEST_SKIP:
                continue
            action = actions.get(key)
            if action is None:
                raise ConfigError(f"{args.config}: unknown key {key!r} for {args.command}")
            if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
                defaults[key] = _bool(value)
            elif value == "":
                defaults[key] = None
            else:
                defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.out is None:
        args.out = _default_out()
    return args


def write_manifest(args: argparse.Namespace, path: Path) -> None:
    lines = [f"{key}={_format_value(value)}" for key, value in sorted(vars(args).items()) if key not in MANIFEST_SKIP]
    atomic_write_text(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# builders from flags


def _synth_spec(args) -> SynthSpec:
    return SynthSpec(
        length=args.synth_length,
        n_variates=args.synth_variates,
        periods=tuple(args.synth_periods),
        amplitudes=tuple(args.synth_amplitudes),
        noise=args.synth_noise,
        seed=args.synth_seed,
    )


def load_dataset(args) -> TimeSeriesDataset:
    """Raw (un-split, un-normalized) dataset from ``--data`` or ``--synthetic``."""
    if args.synthetic and args.data:
        raise ConfigError("give either --data or --synthetic, not both")
    if args.synthetic:
        return synth_multiscale(_synth_spec(args))
    if not args.data:
        raise ConfigError("missing --data (or pass --synthetic)")
    return load_csv(args.data, resolution=args.resolution)


def prepared_dataset(args, lookback: int, horizon: int) -> TimeSeriesDataset:
    ds = chronological_split(load_dataset(args), tuple(args.split), min_length=lookback + horizon)
    return standardize(ds)


def model_config(args, n_variates: int, n_scales: int | None = None) -> ModelConfig:
    n = args.scales if n_scales is None else n_scales
    alphas = args.alphas
    if args.strategy == "fixed" and alphas is not None and n_scales is not None and len(alphas) != n:
        alphas = None  # sweeps over n fall back to the default geometric multipliers
    return ModelConfig(
        lookback=args.L,
        horizon=args.T,
        n_variates=n_variates,
        d_model=args.d_model,
        n_layers=args.layers,
        n_scales=n,
        strategy=args.strategy,
        alphas=tuple(alphas) if alphas is not None and args.strategy == "fixed" else None,
        dynamic_hidden=args.dynamic_hidden,
        d_state=args.d_state,
        conv_width=args.conv_width,
        expand=args.expand,
        dt_rank=args.dt_rank,
        d_ff=args.d_ff,
        dt_min=args.dt_min,
        dt_max=args.dt_max,
        bidirectional=not args.unidirectional,
        residual=not args.no_residual,
    )


def train_config(args, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        seed=derive_seed(args.seed if seed is None else seed, "train"),
        clip_norm=args.clip_norm,
        max_steps=args.max_steps,
        log_interval=args.log_interval,
    )


def _dataset_meta(ds: TimeSeriesDataset, split: Sequence[float]) -> dict:
    return {
        "names": list(ds.names),
        "mean": [float(v) for v in ds.mean],
        "std": [float(v) for v in ds.std],
        "split": [float(r) for r in split],
    }


def _restandardize(raw: TimeSeriesDataset, meta: dict) -> TimeSeriesDataset:
    """Apply the checkpoint's stored split ratios and normalization statistics."""
    from dataclasses import replace

    ds = chronological_split(raw, tuple(meta["split"]))
    mean, std = np.asarray(meta["mean"]), np.asarray(meta["std"])
    return replace(ds, values=(ds.values - mean) / std, mean=mean, std=std, degenerate=tuple(bool(s == 1.0) for s in std))


def _print_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    cells = [[str(h) for h in header]] + [[c if isinstance(c, str) else f"{c:.6g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for k, row in enumerate(cells):
        print("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if k == 0:
            print("  ".join("-" * w for w in widths))


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    out = Path(args.out)
    ds = prepared_dataset(args, args.L, args.T)
    config = model_config(args, ds.n_variates)
    model = ForecastModel.init(config, derive_seed(args.seed, "init"))
    model, history = train(model, ds, train_config(args))

    meta = {"dataset": _dataset_meta(ds, args.split), "best_epoch": history.best_epoch, "best_val_mse": history.best_val}
    save_checkpoint(out / "model.ckpt", model, meta)
    history.to_csv(out / "history.csv")
    if config.strategy != "fixed":
        log_scale_trajectory(history, out / "scales.csv")
    else:
        print("note: fixed strategy has no scale trajectory; scales.csv not written")
    write_manifest(args, out / "manifest.txt")

    rows = [[e + 1, tr, va, "*" if e == history.best_epoch else ""] for e, (tr, va) in enumerate(zip(history.train_mse, history.val_mse))]
    _print_table(["epoch", "train_mse", "val_mse", "best"], rows)
    print(f"params={model.num_parameters()} steps={history.steps} best_val_mse={history.best_val:.6g} out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("missing --checkpoint")
    raw = load_dataset(args)
    rows = []
    for path in args.checkpoint:
        model, meta = load_checkpoint(path)
        c = model.config
        if raw.n_variates != c.n_variates:
            raise ConfigError(f"variate mismatch: checkpoint D={c.n_variates}, dataset D={raw.n_variates}")
        ds = _restandardize(raw, meta["dataset"])
        metrics = evaluate(model, ds, args.eval_split, denormalized=args.denormalized)
        rows.append([str(path), c.horizon, metrics["mse"], metrics["mae"]] + ([metrics["mse_raw"], metrics["mae_raw"]] if args.denormalized else []))
    if len(rows) > 1:
        avg = ["Avg", ""] + [float(np.mean([r[k] for r in rows])) for k in range(2, len(rows[0]))]
        rows.append(avg)
    header = ["checkpoint", "horizon", "mse", "mae"] + (["mse_raw", "mae_raw"] if args.denormalized else [])
    atomic_write_csv(Path(args.out) / "metrics.csv", header, [[_format_value(c) for c in r] for r in rows])
    _print_table(header, rows)
    return EXIT_OK


def cmd_forecast(args) -> int:
    if not args.checkpoint:
        raise ConfigError("missing --checkpoint")
    raw = load_dataset(args)
    model, meta = load_checkpoint(args.checkpoint)
    c = model.config
    if raw.n_variates != c.n_variates:
        raise ConfigError(f"variate mismatch: checkpoint D={c.n_variates}, dataset D={raw.n_variates}")
    last = raw.n_timesteps - c.lookback
    origin = last if args.origin is None else args.origin
    if not 0 <= origin <= last:
        raise ConfigError(f"origin {origin} out of range; admissible origins are 0..{last}")
    mean, std = np.asarray(meta["dataset"]["mean"]), np.asarray(meta["dataset"]["std"])
    inputs = (raw.values[origin : origin + c.lookback] - mean) / std
    forecast = predict(model, inputs[None])[0] * std + mean
    atomic_write_csv(Path(args.out) / "forecast.csv", raw.names, ([repr(float(v)) for v in row] for row in forecast))
    _print_table(["step"] + list(raw.names), [[origin + c.lookback + t] + [float(v) for v in row] for t, row in enumerate(forecast)])
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth_multiscale(_synth_spec(args))
    path = Path(args.out) / "synthetic.csv"
    save_csv(path, ds)
    print(f"wrote {ds.n_timesteps} x {ds.n_variates} series to {path}")
    return EXIT_OK


def gradcheck_model(args, strategy: str) -> tuple[ForecastModel, Callable[[], ad.Tensor]]:
    config = ModelConfig(
        lookback=args.L,
        horizon=args.T,
        n_variates=args.variates,
        d_model=args.d_model,
        n_layers=args.layers,
        n_scales=args.scales,
        strategy=strategy,
        alphas=tuple(args.alphas) if strategy == "fixed" and args.alphas else None,
        dynamic_hidden=args.dynamic_hidden,
        d_state=args.d_state,
        conv_width=args.conv_width,
        expand=args.expand,
        dt_rank=args.dt_rank,
        d_ff=args.d_ff,
        dt_min=args.dt_min,
        dt_max=args.dt_max,
        bidirectional=not args.unidirectional,
        residual=not args.no_residual,
    )
    model = ForecastModel.init(config, derive_seed(args.seed, f"gradcheck-init-{strategy}"))
    if model.num_parameters() >= GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck needs a tiny model (< {GRADCHECK_MAX_PARAMS} params), got {model.num_parameters()}")
    rng = np.random.default_rng(derive_seed(args.seed, "gradcheck-data"))
    x = rng.standard_normal((args.batch, config.lookback, config.n_variates))
    y = rng.standard_normal((args.batch, config.horizon, config.n_variates))
    return model, lambda: mse_loss(model_forward(x, model), y)


def cmd_gradcheck(args) -> int:
    rows, failed = [], False
    for strategy in args.strategies:
        if strategy not in ("fixed", "learnable", "dynamic"):
            raise ConfigError(f"unknown strategy {strategy!r}")
        model, loss_fn = gradcheck_model(args, strategy)
        start = time.perf_counter()
        report = ad.grad_check_report(loss_fn, model.parameters(), step=args.step)
        elapsed = time.perf_counter() - start
        for group, err in report.items():
            ok = err < args.tolerance
            failed |= not ok
            rows.append([strategy, group, err, "ok" if ok else "FAIL"])
        worst = max(report.values())
        print(f"{strategy}: params={model.num_parameters()} max_rel_error={worst:.3e} time={elapsed:.1f}s")
    atomic_write_csv(Path(args.out) / "gradcheck.csv", ["strategy", "group", "max_rel_error", "status"], [[s, g, repr(e), st] for s, g, e, st in rows])
    bad = [r for r in rows if r[3] == "FAIL"]
    if bad:
        _print_table(["strategy", "group", "max_rel_error", "status"], bad)
        raise GradcheckFailure(f"{len(bad)} parameter groups exceed tolerance {args.tolerance:g}")
    return EXIT_OK


def cmd_profile(args) -> int:
    rows = []
    for d_model in args.d_model_list or (args.d_model,):
        for n_variates in args.variates_list:
            for n in args.scales_list:
                args_d = argparse.Namespace(**{**vars(args), "d_model": d_model})
                config = model_config(args_d, n_variates, n_scales=n)
                cost = cost_report(config)
                row = [f"n={n},D={n_variates},De={d_model},{config.strategy}", n, n_variates, d_model, cost.params, cost.macs, cost.memory_bytes]
                if args.timing:
                    model = ForecastModel.init(config, derive_seed(args.seed, "profile"))
                    x = np.zeros((1, config.lookback, n_variates))
                    predict(model, x)  # warmup
                    start = time.perf_counter()
                    for _ in range(args.repeats):
                        predict(model, x)
                    row.append((time.perf_counter() - start) / args.repeats * 1e3)
                rows.append(row)
    header = ["config", "n_scales", "n_variates", "d_model", "params", "macs", "memory_bytes"] + (["forward_ms"] if args.timing else [])
    atomic_write_csv(Path(args.out) / "profile.csv", header, [[_format_value(c) for c in r] for r in rows])
    _print_table(header, rows)
    return EXIT_OK


def cmd_sweep_scales(args) -> int:
    ds = prepared_dataset(args, args.L, args.T)
    train_w = window(ds, "train", args.L, args.T)
    val_w = window(ds, "val", args.L, args.T)
    rows, medians = [], []
    for n in args.scales_list:
        vals = []
        for seed in args.seeds:
            config = model_config(args, ds.n_variates, n_scales=n)
            model = ForecastModel.init(config, derive_seed(seed, "init"))
            _, history = train(model, ds, train_config(args, seed), train_w, val_w)
            vals.append(history.best_val)
            rows.append([n, str(seed), history.best_val])
        medians.append([n, "median", float(statistics.median(vals))])
    all_rows = rows + medians
    atomic_write_csv(Path(args.out) / "sweep.csv", ["n_scales", "seed", "val_mse"], [[n, s, repr(v)] for n, s, v in all_rows])
    write_manifest(args, Path(args.out) / "manifest.txt")
    _print_table(["n_scales", "seed", "val_mse"], all_rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _fail(code: int, kind: str, exc: BaseException) -> int:
    message = str(exc).replace("\n", " ")
    print(f"msmamba: error={kind} exit={code} reason={message}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(sys.argv[1:] if argv is None else list(argv))
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    except GradcheckFailure as exc:
        return _fail(EXIT_GRADCHECK, "gradcheck", exc)
    except (ConfigError, DomainError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except DataError as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)


if __name__ == "__main__":
    sys.exit(main())
