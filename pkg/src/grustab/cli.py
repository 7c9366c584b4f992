"""Command line front end: ``grustab <generate|train|certify|verify|evaluate>``.

Exit codes: 0 success, 2 usage or config error, 3 certificate failure,
4 empirical bound violation, 5 numerical divergence. Every command that
writes to ``--out`` also writes ``manifest.json`` holding the resolved
settings, the argument vector and SHA-256 digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import NotCertifiedError, deep_delta_iss_bound, iss_bound
from .certificates import MODES, certify_deep
from .gru import load_model, save_model
from .io import atomic_write_text, read_json, write_json
from .numerics import make_rng
from .plant import TankConfig, generate_dataset, load_dataset, normalized_splits, save_dataset
from .presets import Preset, apply_overrides, get_preset
from .training import (DivergenceError, InfeasibleError, fit_index, history_csv, predict, random_initial_state,
                       train)
from .verify import (VerificationPlan, default_workers, verify_delta_iss_bound, verify_entry,
                     verify_invariance, verify_iss_bound)

EXIT_OK, EXIT_USAGE, EXIT_CERT, EXIT_VIOLATION, EXIT_DIVERGED = 0, 2, 3, 4, 5

log = logging.getLogger("grustab")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _digest_tree(path: Path) -> dict:
    path = Path(path)
    if path.is_file():
        return {path.name: _sha256(path)}
    return {str(p.relative_to(path)): _sha256(p) for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def write_manifest(out: Path, command: str, argv: list, settings: dict, inputs: dict) -> None:
    """Manifest of an artifact directory; only carries a timestamp if SOURCE_DATE_EPOCH is set."""
    manifest = {
        "tool": "grustab",
        "version": __version__,
        "command": command,
        "argv": argv,
        "settings": settings,
        "inputs": inputs,
        "outputs": _digest_tree(out),
    }
    if "SOURCE_DATE_EPOCH" in os.environ:
        manifest["source_date_epoch"] = int(os.environ["SOURCE_DATE_EPOCH"])
    write_json(out / "manifest.json", manifest)


def _resolve(args) -> Preset:
    preset = get_preset(args.preset)
    if getattr(args, "config", None):
        try:
            overrides = read_json(Path(args.config))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError("config must be a JSON object")
        try:
            preset = apply_overrides(preset, overrides)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config: {exc}") from None
    return preset


def _load_model(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model {path}: {exc}") from None


def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from None


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    preset = _resolve(args)
    out = _out_dir(args) or Path("dataset")
    out.mkdir(parents=True, exist_ok=True)
    d = generate_dataset(TankConfig(), preset.protocol, args.seed)
    save_dataset(d, out)
    write_manifest(out, "generate", args.argv, {"preset": preset.name, "seed": args.seed,
                                                 "protocol": preset.protocol.to_dict()}, {})
    print(f"wrote {len(d.experiments)} experiments to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    preset = _resolve(args)
    cfg = preset.train
    if args.seed is not None:
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.penalty == "off":
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "rho_plus": 0.0, "rho_minus": 0.0})
    out = _out_dir(args) or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if args.data:
        d = _load_data(args.data)
        inputs = {"dataset": _digest_tree(Path(args.data))}
    else:
        d = generate_dataset(TankConfig(), preset.protocol, cfg.seed)
        save_dataset(d, out / "dataset")
    sp = normalized_splits(d)
    tr = [(e.inputs, e.outputs) for e in sp["train"]]
    va = [(e.inputs, e.outputs) for e in sp["validation"]]

    def progress(rec):
        if rec.epoch % 25 == 0:
            log.info("epoch %d train %.5g val %.5g nu %s", rec.epoch, rec.train_loss, rec.val_mse,
                     np.round(rec.nu, 4).tolist())

    settings = {"preset": preset.name, "widths": list(preset.widths), "train": cfg.to_dict()}
    code = EXIT_OK
    try:
        res = train(tr, va, preset.widths, cfg, d.input_scaler, d.output_scaler, progress)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        _write_history(out, exc.history)
        code = EXIT_DIVERGED
    except InfeasibleError as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        _write_history(out, exc.history)
        code = EXIT_CERT
    else:
        save_model(res.model, out / "model.json")
        atomic_write_text(out / "history.csv", res.history_csv())
        report = certify_deep(res.model)
        summary = {"best_epoch": res.best_epoch, "epochs_run": len(res.history),
                   "stopped_early": res.stopped_early, "certificate": report.to_dict()}
        write_json(out / "train_report.json", summary)
        print(report.render())
        print(f"best epoch {res.best_epoch} of {len(res.history)}")
    write_manifest(out, "train", args.argv, settings, inputs)
    return code


def _write_history(out, history):
    if history:
        atomic_write_text(out / "history.csv", history_csv(history))


def _bound_summary(m, mode, lambdas) -> dict:
    bounds = {}
    try:
        bounds["iss"] = [iss_bound(p).__dict__ for p in m.layers]
    except NotCertifiedError:
        pass
    try:
        bounds["delta_iss"] = deep_delta_iss_bound(m, lambdas if mode == "delta_iss_strict" else None).to_dict()
    except NotCertifiedError:
        pass
    return bounds


def cmd_certify(args) -> int:
    m = _load_model(args.model)
    lambdas = _parse_lambdas(args.lambdas)
    try:
        report = certify_deep(m, args.mode, lambdas)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report.bounds = _bound_summary(m, args.mode, lambdas)
    print(report.render())
    out = _out_dir(args)
    if out is not None:
        write_json(out / "certificate.json", report.to_dict())
        write_manifest(out, "certify", args.argv, {"mode": args.mode, "lambdas": lambdas},
                       {"model": _sha256(Path(args.model))})
    return EXIT_OK if report.certified else EXIT_CERT


def _parse_lambdas(text):
    if not text:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --lambdas {text!r}") from None


def cmd_verify(args) -> int:
    preset = _resolve(args)
    m = _load_model(args.model)
    base = preset.verify
    try:
        plan = VerificationPlan(
            trials=base.trials if args.trials is None else args.trials,
            horizon=base.horizon if args.horizon is None else args.horizon,
            box=args.box or base.box, radius=base.radius, inputs=args.inputs or base.inputs,
            seed=args.seed if args.seed is not None else base.seed,
            tolerance=base.tolerance if args.tolerance is None else args.tolerance,
            workers=default_workers())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lambdas = _parse_lambdas(args.lambdas)
    report = certify_deep(m, "delta_iss_strict" if lambdas else "delta_iss_relaxed", lambdas)
    checks = args.check or ["invariance", "entry", "iss", "delta_iss"]
    outcomes, refused = [], []
    for name in checks:
        try:
            if name == "invariance":
                outcomes.append(verify_invariance(m, plan))
            elif name == "entry":
                outcomes.append(verify_entry(m, plan if plan.box == "inflated" else
                                             VerificationPlan(**{**plan.__dict__, "box": "inflated"})))
            elif name == "iss":
                outcomes.append(verify_iss_bound(m, plan))
            elif name == "delta_iss":
                outcomes.append(verify_delta_iss_bound(m, plan, lambdas))
        except NotCertifiedError as exc:
            refused.append({"check": name, "reason": str(exc)})
        except ValueError as exc:
            raise UsageError(f"{name}: {exc}") from None
    report.empirical = {"plan": {**plan.__dict__, "radius": list(plan.radius)},
                        "outcomes": [o.to_dict() for o in outcomes], "refused": refused}
    print(report.render())
    for o in outcomes:
        print(f"{o.check:>16}: trials {o.trials} violations {o.violations} worst margin {o.worst_margin:.3e}"
              + ("" if o.passed else f" witnesses {o.witnesses}"))
    for r in refused:
        print(f"{r['check']:>16}: refused ({r['reason']})")
    out = _out_dir(args)
    if out is not None:
        write_json(out / "verification.json", report.to_dict())
        write_manifest(out, "verify", args.argv, {"plan": report.empirical["plan"], "checks": checks,
                                                   "lambdas": lambdas},
                       {"model": _sha256(Path(args.model))})
    if any(not o.passed for o in outcomes):
        return EXIT_VIOLATION
    if refused:
        return EXIT_CERT
    return EXIT_OK


PLOT_COLUMNS = ("sequence", "k", "channel", "y_measured", "y_predicted")


def cmd_evaluate(args) -> int:
    m = _load_model(args.model)
    d = _load_data(args.data)
    sp = normalized_splits(d)
    seed = 0 if args.seed is None else args.seed
    rng = make_rng(seed, 7)
    rows, plot = [], [",".join(PLOT_COLUMNS)]
    for e in sp[args.split]:
        x0 = random_initial_state(m, rng)
        fit = fit_index(m, e.inputs, e.outputs, x0)
        rows.append((e.id, fit))
        pred = predict(m, e.inputs, x0)
        if d.output_scaler is not None:
            y_meas, y_pred = d.output_scaler.denormalize(e.outputs), d.output_scaler.denormalize(pred)
        else:
            y_meas, y_pred = e.outputs, pred
        for k in range(len(pred)):
            for c in range(pred.shape[1]):
                plot.append(f"{e.id},{k},{c + 1},{float(y_meas[k, c])!r},{float(y_pred[k, c])!r}")
    if not rows:
        raise UsageError(f"split {args.split!r} is empty")
    fits = np.array([f for _, f in rows])
    lines = [f"{'sequence':>10} {'FIT %':>8}"] + [f"{i:>10} {f:>8.2f}" for i, f in rows]
    lines.append(f"{'mean':>10} {fits.mean():>8.2f}")
    lines.append(f"{'min':>10} {fits.min():>8.2f}")
    lines.append(f"{'max':>10} {fits.max():>8.2f}")
    print("\n".join(lines))
    out = _out_dir(args)
    if out is not None:
        atomic_write_text(out / "predictions.csv", "\n".join(plot) + "\n")
        write_json(out / "fit.json", {"split": args.split, "fit": dict(rows), "mean": float(fits.mean()),
                                      "min": float(fits.min()), "max": float(fits.max())})
        write_manifest(out, "evaluate", args.argv, {"split": args.split, "seed": seed},
                       {"model": _sha256(Path(args.model)), "dataset": _digest_tree(Path(args.data))})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grustab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"grustab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="JSON file with protocol/model/train/verify sections")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--preset", choices=("paper", "desk"), default="paper")
        p.add_argument("--out", help="artifact directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("generate", help="simulate the quadruple-tank dataset")
    common(p, seed_default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a GRU on a dataset")
    common(p)
    p.add_argument("--data", help="dataset directory (generated from the preset if omitted)")
    p.add_argument("--penalty", choices=("on", "off"), default="on",
                   help="'off' disables the stability penalty (unconstrained baseline)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="check the stability conditions of a model")
    common(p)
    p.add_argument("model")
    p.add_argument("--mode", choices=MODES, default="delta_iss_relaxed")
    p.add_argument("--lambdas", help="comma-separated initialisation radii (strict mode)")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("verify", help="Monte-Carlo check of the certified bounds")
    common(p)
    p.add_argument("model")
    p.add_argument("--check", action="append", choices=("invariance", "entry", "iss", "delta_iss"))
    p.add_argument("--trials", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--box", choices=("inside", "inflated"))
    p.add_argument("--inputs", choices=("uniform", "mprs"))
    p.add_argument("--tolerance", type=float)
    p.add_argument("--lambdas", help="comma-separated initialisation radii (strict mode)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", help="FIT table and plot data on a dataset split")
    common(p)
    p.add_argument("model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"grustab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
