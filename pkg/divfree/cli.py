# cli.py
"""
Command-line front end: python -m divfree <command> [flags]

Commands
- generate         solve random polycrystals and write a dataset directory
- train            train one variant (pg / pi / pe), write checkpoint + history.csv
- evaluate         metrics JSON, 16-bit PGM maps, raw blobs and SVGs for a checkpoint
- diagnose-div     relative divergence of a stored stress field
- compare          train all variants with one seed and write tradeoff.csv
- verify-appendix  pass/fail table of the potential-construction identities

Default layout under --out (DIVFREE_DATA_DIR):
    dataset/            generate
    <variant>/          train (pi runs: pi_c<c_div>/)
    <variant>/eval/     evaluate
    tradeoff.csv        compare

Exit codes: 0 ok, 2 I/O, 3 numerical failure, 4 config mismatch.
"""
import argparse
import contextlib
import csv
import logging
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from divfree.common import (
    DATA_DIR,
    EXIT_IO,
    EXIT_OK,
    VARIANTS,
    ConfigError,
    DataIOError,
    DatasetConfig,
    DivfreeError,
    GridConfig,
    PreconditionError,
    RunSettings,
    parse_float,
    load_config,
    setup_logging,
)
from divfree.appendix_verification import format_table, run_verification
from divfree.figures import (
    generate_loss_svg,
    generate_map_svg,
    generate_stress_svg,
    generate_tradeoff_svg,
    write_pgm16,
)
from divfree.spectral_grid import field_div, relative_divergence
from divfree.training_harness import (
    Adam,
    componentwise_peak,
    ensure_dir,
    error_peak_boundary_distance,
    evaluate,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    normalize,
    normalize_with,
    prepare_model,
    read_history,
    save_checkpoint,
    save_dataset,
    train,
    write_blob,
    write_history,
    write_json,
)

logger = logging.getLogger(__name__)

_shutdown = threading.Event()

TRADEOFF_COLUMNS = ("variant", "c_div", "test_L_dat", "test_L_div", "rel_div_norm")
DEFAULT_C_DIV_LIST = (0.01, 0.1, 1.0, 10.0)
# seed stream of out-of-distribution samples, disjoint from the dataset stream
OOD_STREAM = 1


# =========================
#   Signals
# =========================
def _graceful_shutdown(signum, _frame):
    """SIGINT/SIGTERM: finish the current epoch, then checkpoint and exit."""
    logger.warning(f"Received signal {signum}, stopping after the current epoch")
    _shutdown.set()


@contextlib.contextmanager
def _stop_on_signals():
    _shutdown.clear()
    previous = {sig: signal.signal(sig, _graceful_shutdown) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        yield _shutdown
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


# =========================
#   Argument parsing
# =========================
def _fraction(value: str) -> float:
    try:
        return parse_float(value)
    except (ValueError, ZeroDivisionError) as e:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from e


def _common_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="YAML config (default: DIVFREE_CONFIG or built-ins)")
    p.add_argument("--out", default=None, help=f"output root (default: DIVFREE_DATA_DIR={DATA_DIR})")
    p.add_argument("--threads", type=int, default=None, help="worker cap for parallel steps")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    return p


def _data_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--n-dat", type=int, default=None, help="number of samples")
    p.add_argument("--n-tra", type=int, default=None, help="training samples (rest is test)")
    p.add_argument("--n-dis", type=int, default=None, help="grid points per axis of stored fields")
    p.add_argument("--n-res", type=int, default=None, help="solver grid (multiple of n_dis)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--s-u", type=_fraction, default=None, help="relative grain size, e.g. 1/3")
    p.add_argument("--e-range", type=float, nargs=2, default=None, metavar=("LO", "HI"), help="GPa")
    p.add_argument("--nu-range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--f22", type=float, nargs="+", default=None, help="mean stretch(es) F22")
    p.add_argument("--dataset", default=None, help="dataset directory (default: <out>/dataset)")
    return p


def _model_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--c-div", type=float, default=None, help="divergence weight of the pi loss")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, help="0 = full batch")
    p.add_argument("--modes", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None, help="number of Fourier layers")
    p.add_argument("--p-mode", choices=("component", "shared"), default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divfree", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common, data, model = _common_parent(), _data_parent(), _model_parent()

    sub.add_parser("generate", parents=[common, data], help="write a dataset directory")

    p = sub.add_parser("train", parents=[common, data, model], help="train one variant")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory (default: <out>/<variant>)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint directory")

    p = sub.add_parser("evaluate", parents=[common, data, model], help="metrics and field maps")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n-ood", type=int, default=4, help="fresh samples drawn when --s-u is given")
    p.add_argument("--max-maps", type=int, default=4, help="samples exported as maps")
    p.add_argument("--eval-dir", default=None, help="default: <checkpoint>/eval")

    p = sub.add_parser("diagnose-div", parents=[common, data], help="divergence of a stored stress field")
    p.add_argument("--field", default=None, help="raw little-endian float64 [n, n, 3, 3] blob")
    p.add_argument("--sample", type=int, default=None, help="sample index in --dataset")

    p = sub.add_parser("compare", parents=[common, data, model], help="train pg, pe and pi over c_div")
    p.add_argument("--c-div-list", type=float, nargs="+", default=list(DEFAULT_C_DIV_LIST))

    p = sub.add_parser("verify-appendix", parents=[common], help="identity checks over random fields")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-dis", type=int, default=16)
    return parser


# =========================
#   Settings
# =========================
def _given(args: argparse.Namespace, name: str):
    return getattr(args, name, None)


def apply_overrides(settings: RunSettings, args: argparse.Namespace) -> RunSettings:
    """CLI flags override the YAML values, which override the built-in defaults."""
    try:
        return _override(settings, args)
    except PreconditionError as e:
        raise ConfigError(f"invalid command-line value: {str(e)}") from e


def _override(settings: RunSettings, args: argparse.Namespace) -> RunSettings:
    grid, micro, ds = settings.grid, settings.microstructure, settings.dataset
    model, loss_cfg, train_cfg = settings.model, settings.loss, settings.training

    if _given(args, "n_dis") is not None:
        grid = replace(grid, n_dis=args.n_dis)
        if _given(args, "n_res") is None:
            ds = replace(ds, n_res=args.n_dis)
    if _given(args, "n_res") is not None:
        ds = replace(ds, n_res=args.n_res)
    if _given(args, "n_dat") is not None:
        n_tra = args.n_tra if _given(args, "n_tra") is not None else round(args.n_dat * ds.n_tra / ds.n_dat)
        ds = replace(ds, n_dat=args.n_dat, n_tra=n_tra)
    elif _given(args, "n_tra") is not None:
        ds = replace(ds, n_tra=args.n_tra)
    if _given(args, "seed") is not None:
        ds = replace(ds, seed=args.seed)
        micro = replace(micro, seed=args.seed)
        train_cfg = replace(train_cfg, seed=args.seed)
    if _given(args, "s_u") is not None and args.command != "evaluate":
        micro = replace(micro, s_U=args.s_u)
    if _given(args, "e_range") is not None:
        micro = replace(micro, E_range=tuple(args.e_range))
    if _given(args, "nu_range") is not None:
        micro = replace(micro, nu_range=tuple(args.nu_range))
    if _given(args, "f22") is not None:
        ds = replace(ds, f22=tuple(args.f22))
    if _given(args, "p_mode") is not None:
        ds = replace(ds, p_mode=args.p_mode)

    if _given(args, "variant") is not None:
        model = replace(model, variant=args.variant)
        loss_cfg = replace(loss_cfg, variant=args.variant)
    if _given(args, "c_div") is not None:
        loss_cfg = replace(loss_cfg, c_div=args.c_div)
    if _given(args, "modes") is not None:
        model = replace(model, modes=args.modes)
    if _given(args, "width") is not None:
        model = replace(model, width=args.width, n_neu=None)
    if _given(args, "depth") is not None:
        model = replace(model, n_hid=args.depth)
    if _given(args, "epochs") is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    if _given(args, "lr0") is not None:
        train_cfg = replace(train_cfg, lr0=args.lr0)
    if _given(args, "batch_size") is not None:
        train_cfg = replace(train_cfg, batch_size=args.batch_size)
    loss_cfg = replace(loss_cfg, variant=model.variant)

    return replace(
        settings,
        grid=grid, microstructure=micro, dataset=ds,
        model=model, loss=loss_cfg, training=train_cfg,
        output=args.out if _given(args, "out") is not None else settings.output,
        threads=args.threads if _given(args, "threads") is not None else settings.threads,
    )


def _dataset_dir(args, settings: RunSettings) -> Path:
    return Path(args.dataset) if _given(args, "dataset") else Path(settings.output) / "dataset"


def _run_name(variant: str, c_div: float) -> str:
    return f"pi_c{c_div:g}" if variant == "pi" else variant


def _checkpoint_dir(args, settings: RunSettings) -> Path:
    if _given(args, "checkpoint"):
        return Path(args.checkpoint)
    return Path(settings.output) / _run_name(settings.model.variant, settings.loss.c_div)


# =========================
#   Commands
# =========================
def cmd_generate(args, settings: RunSettings) -> int:
    ds = generate_dataset(settings.dataset, settings.grid, settings.microstructure,
                          settings.solver, settings.threads)
    save_dataset(ds, _dataset_dir(args, settings))
    return EXIT_OK


def _train_run(ds, settings: RunSettings, run_dir: Path, stop_event: Optional[threading.Event],
               resume: bool = False, epochs: Optional[int] = None):
    """Train one variant into run_dir; returns (TrainResult, stats, normalized data)."""
    cfg, loss_cfg, train_cfg = settings.model, settings.loss, settings.training
    if resume:
        ckpt = load_checkpoint(run_dir)
        if ckpt.model.variant != cfg.variant:
            raise ConfigError(f"checkpoint variant {ckpt.model.variant!r} differs from --variant {cfg.variant!r}")
        if ckpt.model.grid != ds.grid:
            raise ConfigError("checkpoint grid does not match the dataset")
        model, stats, optimizer, start = ckpt.model, ckpt.stats, ckpt.optimizer, ckpt.epoch
        loss_cfg, train_cfg = ckpt.loss, ckpt.training
        if epochs is not None:
            train_cfg = replace(train_cfg, epochs=epochs)
        data = normalize_with(ds, stats)
        history_path = run_dir / "history.csv"
        history = read_history(history_path) if history_path.is_file() else []
        if len(history) != start:
            logger.warning(f"history has {len(history)} rows but checkpoint epoch is {start}")
        logger.info(f"Resuming {model.variant} at epoch {start}")
    else:
        data, stats = normalize(ds)
        model = prepare_model(cfg, ds.grid, stats, train_cfg.seed)
        optimizer = Adam(train_cfg.lr0, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
        start, history = 0, []

    result = train(model, data, loss_cfg, train_cfg, optimizer, start, history, stop_event)
    ensure_dir(run_dir)
    save_checkpoint(run_dir, result.model, stats, result.epoch, result.optimizer, loss_cfg, train_cfg,
                    meta={"dataset_seed": ds.config.seed, "interrupted": result.interrupted})
    write_history(run_dir / "history.csv", result.history)
    generate_loss_svg(result.history, f"{model.variant} loss", str(run_dir))
    return result, stats, data


def cmd_train(args, settings: RunSettings) -> int:
    ds = load_dataset(_dataset_dir(args, settings))
    with _stop_on_signals() as stop_event:
        result, _, _ = _train_run(ds, settings, _checkpoint_dir(args, settings), stop_event,
                                  args.resume, args.epochs)
    if result.interrupted:
        logger.warning(f"Training stopped at epoch {result.epoch}; continue with --resume")
    return EXIT_OK


def _check_compatible(args, model, ds) -> None:
    if _given(args, "variant") is not None and args.variant != model.variant:
        raise ConfigError(f"checkpoint holds a {model.variant!r} model, --variant asks for {args.variant!r}")
    if _given(args, "n_dis") is not None and args.n_dis != model.grid.n_dis:
        raise ConfigError(f"checkpoint grid n_dis={model.grid.n_dis}, --n-dis={args.n_dis}")
    if ds.grid != model.grid:
        raise ConfigError(f"dataset grid {ds.grid} does not match checkpoint grid {model.grid}")


def _ood_dataset(args, settings: RunSettings, ckpt_grid: GridConfig, base_cfg: DatasetConfig, micro_cfg):
    micro = replace(micro_cfg, s_U=args.s_u)
    cfg = replace(base_cfg, n_dat=args.n_ood, n_tra=0)
    logger.info(f"Drawing {args.n_ood} out-of-distribution samples at s_U={args.s_u:g}")
    return generate_dataset(cfg, ckpt_grid, micro, settings.solver, settings.threads, stream=OOD_STREAM)


def _export_maps(ev, stats, samples, out_dir: Path, max_maps: int, ell_U: float) -> List[str]:
    files: List[str] = []
    for a in range(min(max_maps, ev.error_map.shape[0])):
        stem = f"{a:03d}"
        for kind, field, title in (("error", ev.error_map[a], "|P_out - P_dat|"),
                                   ("div", ell_U * ev.div_map[a], "|ell d_out|")):
            pgm, sidecar = write_pgm16(field, out_dir / f"{kind}_{stem}.pgm")
            write_blob(out_dir / f"{kind}_{stem}.f64", field)
            _, svg = generate_map_svg(field, f"{title}, sample {samples[a].index}", str(out_dir),
                                      f"{kind}_{stem}.svg", cmap="magma")
            files += [pgm.name, sidecar.name, f"{kind}_{stem}.f64", Path(svg).name]
        _, svg = generate_stress_svg(stats.denormalize_P(ev.p_out[a]), f"P_out, sample {samples[a].index}",
                                     str(out_dir), f"stress_{stem}.svg", unit="MPa")
        files.append(Path(svg).name)
    return files


def cmd_evaluate(args, settings: RunSettings) -> int:
    ckpt_dir = _checkpoint_dir(args, settings)
    ckpt = load_checkpoint(ckpt_dir)
    model, stats = ckpt.model, ckpt.stats
    if stats is None:
        raise ConfigError(f"checkpoint {ckpt_dir} carries no normalization statistics")

    ood = _given(args, "s_u") is not None
    if ood:
        base = load_dataset(_dataset_dir(args, settings)) if _dataset_dir(args, settings).is_dir() else None
        ds = _ood_dataset(args, settings, model.grid,
                          base.config if base else settings.dataset,
                          base.microstructure if base else settings.microstructure)
        samples = ds.test
    else:
        ds = load_dataset(_dataset_dir(args, settings))
        samples = ds.train if args.split == "train" else ds.test
    _check_compatible(args, model, ds)
    if not samples:
        raise ConfigError(f"the {args.split} split of the dataset is empty")

    data = normalize_with(ds, stats)
    use_train = not ood and args.split == "train"
    x, y = (data.x_train, data.y_train) if use_train else (data.x_test, data.y_test)
    ev = evaluate(model, x, y, ckpt.loss)

    P_out = stats.denormalize_P(ev.p_out)
    P_dat = stats.denormalize_P(ev.p_dat)
    err_mpa = np.sqrt(np.sum((P_out - P_dat) ** 2, axis=(-2, -1)))
    metrics: Dict[str, object] = dict(ev.metrics)
    metrics.update({
        "variant": model.variant,
        "epoch": ckpt.epoch,
        "split": "ood" if ood else args.split,
        "n_samples": len(samples),
        "n_dis": model.grid.n_dis,
        "s_U": float(args.s_u) if ood else ds.microstructure.s_U,
        "max_error_MPa": float(err_mpa.max()),
        "median_error_MPa": float(np.median(err_mpa)),
        "peak_component_out": list(componentwise_peak(P_out[0])),
        "peak_component_dat": list(componentwise_peak(P_dat[0])),
        "error_peak_boundary_distance": error_peak_boundary_distance(ev.error_map[0], samples[0].grain_id),
    })

    out_dir = ensure_dir(Path(args.eval_dir) if args.eval_dir else ckpt_dir / "eval")
    metrics["maps"] = _export_maps(ev, stats, samples, out_dir, args.max_maps, model.grid.ell_U)
    write_json(out_dir / "metrics.json", metrics)
    logger.info(f"{model.variant}: L_dat={ev.metrics['L_dat']:.4e} rel_div_norm={ev.metrics['rel_div_norm']:.3e} "
                f"-> {out_dir}")
    return EXIT_OK


def _load_field(args, settings: RunSettings):
    if _given(args, "field"):
        grid = settings.grid
        path = Path(args.field)
        try:
            raw = np.fromfile(path, dtype="<f8")
        except OSError as e:
            raise DataIOError(f"cannot read {path}: {str(e)}") from e
        expected = grid.n_dis * grid.n_dis * 9
        if raw.size != expected:
            raise ConfigError(f"{path} holds {raw.size} values, n_dis={grid.n_dis} needs {expected}")
        return raw.reshape(grid.shape + (3, 3)), grid, path.name
    if _given(args, "sample") is None:
        raise ConfigError("diagnose-div needs --field or --sample")
    ds = load_dataset(_dataset_dir(args, settings))
    match = [s for s in ds.samples if s.index == args.sample]
    if not match:
        raise ConfigError(f"no sample {args.sample} in the dataset")
    return match[0].P, ds.grid, f"sample {args.sample}"


def diagnose_divergence(P: np.ndarray, grid: GridConfig) -> Dict[str, float]:
    """Whole-field relative divergence and the largest per-pixel |ell d|."""
    d = field_div(P, grid)
    return {
        "rel_div_norm": relative_divergence(P, grid),
        "max_div": float(grid.ell_U * np.sqrt(np.sum(d * d, axis=-1)).max()),
    }


def cmd_diagnose_div(args, settings: RunSettings) -> int:
    P, grid, label = _load_field(args, settings)
    report = diagnose_divergence(P, grid)
    print(f"{label}: rel_div_norm={report['rel_div_norm']:.6e} max_div={report['max_div']:.6e}")
    return EXIT_OK


def write_tradeoff(path: Path, rows: List[Dict[str, object]]) -> Path:
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=TRADEOFF_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                                 for k in TRADEOFF_COLUMNS})
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {str(e)}") from e
    return path


def cmd_compare(args, settings: RunSettings) -> int:
    ds = load_dataset(_dataset_dir(args, settings))
    root = ensure_dir(Path(settings.output))
    runs = [("pg", 0.0), ("pe", 0.0)] + [("pi", float(c)) for c in args.c_div_list]
    rows: List[Dict[str, object]] = []
    with _stop_on_signals() as stop_event:
        for variant, c_div in runs:
            run = replace(settings,
                          model=replace(settings.model, variant=variant),
                          loss=replace(settings.loss, variant=variant, c_div=c_div))
            result, _, data = _train_run(ds, run, root / _run_name(variant, c_div), stop_event)
            ev = evaluate(result.model, data.x_test, data.y_test, run.loss)
            rows.append({"variant": variant, "c_div": c_div, "test_L_dat": ev.metrics["L_dat"],
                         "test_L_div": ev.metrics["L_div"], "rel_div_norm": ev.metrics["rel_div_norm"]})
            if stop_event.is_set():
                logger.warning("Stop requested, tradeoff table covers the finished runs only")
                break
    write_tradeoff(root / "tradeoff.csv", rows)
    generate_tradeoff_svg(rows, str(root))
    logger.info(f"Wrote {root / 'tradeoff.csv'} with {len(rows)} runs")
    return EXIT_OK


def cmd_verify_appendix(args, settings: RunSettings) -> int:
    results, ranks = run_verification(args.trials, args.seed, args.n_dis, settings.threads)
    print(format_table(results, ranks))
    return EXIT_OK if all(r.passed for r in results) else 1


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "diagnose-div": cmd_diagnose_div,
    "compare": cmd_compare,
    "verify-appendix": cmd_verify_appendix,
}


# =========================
#   Entry point
# =========================
def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        if args.command == "evaluate" and args.s_u is not None and args.n_ood < 1:
            raise ConfigError("--n-ood must be at least 1")
        settings = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, settings)
    except DivfreeError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
