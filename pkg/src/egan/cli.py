"""Command-line front end: ``egan {tabular,train,eval,export}``.

Exit codes: 0 success, 1 usage / config / I/O error, 2 a scientific check
failed (tabular certification, non-finite training loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .autodiff import load_checkpoint, save_checkpoint
from .data import DatasetKind, make_dataset, true_energy_grid, write_grid_csv, write_grid_pgm, write_points_csv
from .errors import EganError, NonFiniteError
from .evaluation import (
    GRADFIELD_COLUMNS,
    energy_grid,
    evaluate_bundle,
    gradient_field_report,
)
from .tabular import (
    Regularizer,
    certify,
    ebgan_generator_loss,
    fgan_optimal_disc,
    kl_f_prime,
    random_full_support,
)
from .trainer import ModelBundle, TrainConfig, seed_streams, train

OUT_ROOT_ENV = "EGAN_OUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2

logger = logging.getLogger("egan")


class UsageError(Exception):
    """Bad arguments, unreadable config or incomplete inputs (exit 1)."""


# -- helpers ------------------------------------------------------------------


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def load_config_file(path) -> dict:
    """Flat ``key: value`` YAML mapping."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise UsageError(f"config {path} must be a flat key/value mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip().replace("-", "_")] = yaml.safe_load(raw)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_meta(out: Path, command: str, **extra) -> None:
    """Timestamps and timings live only here so other outputs are reproducible."""
    meta = {"command": command, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    meta.update(extra)
    write_json(out / "meta.json", meta)


def ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


# -- tabular ------------------------------------------------------------------


def theory_checks(result: dict, p_data: np.ndarray, margin: float = 1.0, tol: float = 1e-2) -> dict:
    """EBGAN and f-GAN consequences at the solver's generator."""
    p_gen = np.asarray(result["p_gen"])
    eb = ebgan_generator_loss(p_gen, p_data, margin)
    critic = fgan_optimal_disc(kl_f_prime, p_data, p_gen)
    spread = float(np.ptp(critic))
    return {
        "ebgan_generator_loss": eb,
        "ebgan_ok": eb < tol,
        "fgan_critic_range": spread,
        "fgan_ok": spread < tol,
    }


def run_tabular(kind: Regularizer, n: int, seed: int, steps: int, tol: float) -> dict:
    p_data = random_full_support(n, np.random.default_rng(seed))
    res = certify(kind, p_data, seed=seed, steps=steps, tol=tol)
    res["theory"] = theory_checks(res, p_data, tol=tol)
    res["passed"] = bool(res["passed"] and res["theory"]["ebgan_ok"] and res["theory"]["fgan_ok"])
    return res


def cmd_tabular(args) -> int:
    cfg = {"k": "neg-entropy", "n": 8, "seeds": 1, "seed": 0, "steps": 20000, "tol": 1e-2}
    if args.config:
        cfg.update(load_config_file(args.config))
    for key in ("k", "n", "seeds", "seed", "steps", "tol"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    cfg.update(parse_overrides(args.set))
    unknown = set(cfg) - {"k", "n", "seeds", "seed", "steps", "tol"}
    if unknown:
        raise UsageError(f"unknown tabular keys: {sorted(unknown)}")
    try:
        kind = Regularizer.parse(str(cfg["k"]))
        n, seeds, seed0, steps = int(cfg["n"]), int(cfg["seeds"]), int(cfg["seed"]), int(cfg["steps"])
        tol = float(cfg["tol"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if n < 2 or seeds < 1 or steps < 1 or tol <= 0:
        raise UsageError("need n >= 2, seeds >= 1, steps >= 1, tol > 0")

    out = ensure_dir(Path(args.out) if args.out else out_root() / f"tabular-{kind.name}-n{n}")
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=min(seeds, os.cpu_count() or 1)) as pool:
        runs = list(pool.map(lambda s: run_tabular(kind, n, s, steps, tol), range(seed0, seed0 + seeds)))
    report = {"regularizer": kind.name, "n": n, "tol": tol, "runs": runs,
              "passed": all(r["passed"] for r in runs)}
    write_json(out / "certification.json", report)
    write_meta(out, "tabular", wall_clock=time.perf_counter() - start)
    for r in runs:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} seed={r['seed']} gen_err={r['generator_max_error']:.2e} "
              f"discriminator={r['discriminator_form']}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


# -- train --------------------------------------------------------------------


def build_train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    for key, attr in (("model", "model"), ("dataset", "data"), ("seed", "seed"),
                      ("iterations", "iterations")):
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    values.update(parse_overrides(args.set))
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


def default_run_dir(cfg: TrainConfig) -> Path:
    return out_root() / f"{cfg.model}-{cfg.dataset}-s{cfg.seed}"


def save_run(out: Path, cfg: TrainConfig, report, bundle) -> None:
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    write_json(out / "report.json", report.to_dict(include_timing=False))
    save_checkpoint(out / "checkpoint.bin", bundle.state_arrays())
    grid = energy_grid(bundle, cfg.grid)
    write_grid_csv(grid, out / "energy.csv")
    write_grid_pgm(grid, out / "energy.pgm")
    write_points_csv(np.asarray(report.samples), out / "samples.csv")


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    out = ensure_dir(Path(args.out) if args.out else default_run_dir(cfg))

    def progress(step, metrics):
        logger.info("step %d: %s", step, " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))

    try:
        report, bundle = train(cfg, progress=progress)
    except NonFiniteError as exc:
        write_json(out / "nonfinite_dump.json", exc.dump)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    save_run(out, cfg, report, bundle)
    write_meta(out, "train", wall_clock=report.wall_clock)
    kl = report.kl_table
    print(f"wrote {out}  KL(p_disc||p_data)={kl['p_disc||p_data']:.4f}  "
          f"KL(p_gen||p_data)={kl['p_gen||p_data']:.4f}")
    return EXIT_OK


# -- eval / export ------------------------------------------------------------


def load_run(run_dir) -> tuple[TrainConfig, ModelBundle]:
    run = Path(run_dir)
    cfg_path, ckpt = run / "config.yaml", run / "checkpoint.bin"
    if not cfg_path.is_file() or not ckpt.is_file() or not ckpt.with_suffix(".json").is_file():
        raise UsageError(f"{run} is not a complete run directory (config.yaml + checkpoint)")
    try:
        cfg = TrainConfig.from_dict(load_config_file(cfg_path))
        bundle = ModelBundle.create(cfg, np.random.default_rng(0))
        bundle.load_state_arrays(load_checkpoint(ckpt))
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"cannot load run {run}: {exc}") from exc
    return cfg, bundle


def apply_grid_overrides(cfg: TrainConfig, args) -> TrainConfig:
    changes = {k: v for k, v in (("grid_min", args.grid_min), ("grid_max", args.grid_max),
                                 ("grid_cells", args.grid_cells)) if v is not None}
    try:
        return cfg.replace(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    cfg, bundle = load_run(args.run_dir)
    cfg = apply_grid_overrides(cfg, args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    rngs = seed_streams(cfg.seed)
    mixture = make_dataset(cfg.dataset)
    data = mixture.sample(cfg.n_train, rngs["data"])
    start = time.perf_counter()
    ev = evaluate_bundle(bundle, mixture, cfg, data, rngs["eval"])
    out = ensure_dir(Path(args.out) if args.out else Path(args.run_dir) / "eval")
    table = ev["kl_table"]
    write_json(out / "kl_table.json", {"kl": table.to_dict(), "grid": cfg.grid.to_dict(),
                                       "out_of_bounds": ev["out_of_bounds"]})
    (out / "kl_table.txt").write_text(table.to_text())
    write_meta(out, "eval", wall_clock=time.perf_counter() - start)
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    what = args.what
    if what == "truth":
        if not args.data:
            raise UsageError("export truth needs --data")
        try:
            mixture = make_dataset(DatasetKind.parse(args.data))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        cfg = apply_grid_overrides(TrainConfig(dataset=mixture.name), args)
        out = ensure_dir(Path(args.out) if args.out else out_root() / f"truth-{mixture.name}")
        grid = true_energy_grid(mixture, cfg.grid)
        write_grid_csv(grid, out / "truth_energy.csv")
        write_grid_pgm(grid, out / "truth_energy.pgm")
        write_points_csv(mixture.sample(args.n, np.random.default_rng(args.seed or 0)),
                         out / "truth_samples.csv")
        write_meta(out, "export truth")
        return EXIT_OK

    if not args.run_dir:
        raise UsageError(f"export {what} needs --run")
    cfg, bundle = load_run(args.run_dir)
    cfg = apply_grid_overrides(cfg, args)
    out = ensure_dir(Path(args.out) if args.out else Path(args.run_dir) / "export")
    rng = seed_streams(cfg.seed if args.seed is None else args.seed)["eval"]
    if what == "energy":
        grid = energy_grid(bundle, cfg.grid)
        write_grid_csv(grid, out / "energy.csv")
        write_grid_pgm(grid, out / "energy.pgm")
    elif what == "samples":
        write_points_csv(bundle.generate(args.n, rng), out / "samples.csv")
    elif what == "gradfield":
        z = bundle.sample_noise(args.n, rng)
        x = bundle.generator.predict(z)
        records = gradient_field_report(bundle, x, z=z, k=cfg.k, alpha=cfg.alpha)
        rows = np.array([[r[c] for c in GRADFIELD_COLUMNS] for r in records])
        write_points_csv(rows, out / "gradfield.csv", columns=GRADFIELD_COLUMNS)
    write_meta(out, f"export {what}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat YAML key/value file")
        sp.add_argument("--out", help=f"output directory (default under ${OUT_ROOT_ENV} or ./runs)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    t = sub.add_parser("tabular", help="solve and certify finite-space games")
    common(t)
    t.add_argument("--k", help="regularizer: neg-entropy | half-l2 | constant[:v]")
    t.add_argument("--n", type=int, help="support size")
    t.add_argument("--seeds", type=int, help="number of random p_data draws")
    t.add_argument("--seed", type=int, help="first seed")
    t.add_argument("--steps", type=int)
    t.add_argument("--tol", type=float)

    tr = sub.add_parser("train", help="train a 2D model")
    common(tr)
    tr.add_argument("--model", help="gan | egan-const | egan-ent-nn | egan-ent-vi")
    tr.add_argument("--data", help="mog4 | two-spirals | biased-mog2")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--iterations", type=int)

    def grid_args(sp):
        sp.add_argument("--grid-min", type=float)
        sp.add_argument("--grid-max", type=float)
        sp.add_argument("--grid-cells", type=int)

    e = sub.add_parser("eval", help="KL table for a finished run")
    e.add_argument("run_dir")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    grid_args(e)

    x = sub.add_parser("export", help="write CSV/PGM artifacts")
    x.add_argument("what", choices=("energy", "samples", "gradfield", "truth"))
    x.add_argument("--run", dest="run_dir")
    x.add_argument("--data", help="dataset for `truth`")
    x.add_argument("--out")
    x.add_argument("--seed", type=int)
    x.add_argument("--n", type=int, default=512, help="points for samples/gradfield/truth")
    grid_args(x)
    return p


COMMANDS = {"tabular": cmd_tabular, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
