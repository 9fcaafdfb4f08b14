"""``sparsegate`` command line: build, calibrate, run and evaluate sparse FFN predictors.

Containers may hold a single layer (``manifest.json`` at the top) or several
layers in ``layer_NNN`` subdirectories; predictors are written with the same
layout as the weights they were built from.

Exit codes: 0 ok, 1 usage, 2 data error, 3 property violation.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import MetricRow, layer_metrics
from .calibration import DEFAULT_ETA, calibrate
from .checks import run_bound_suite, run_oracle_suite
from .containers import Activation, SparseGateError
from .factorization import auto_rank, build_predictor
from .ffn_exec import Pipeline, op_count_model, run_pipeline
from .fixtures import write_fixture
from .tensor_io import (
    MANIFEST_NAME,
    load_activation_batch,
    load_ffn_weights,
    load_manifest,
    load_predictor,
    save_predictor,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VIOLATION = 0, 1, 2, 3
THREADS_ENV = "SPARSEGATE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    weights_path: Path | None = None
    calib_path: Path | None = None
    eval_path: Path | None = None
    predictor_path: Path | None = None
    rank: int | str = "auto"
    target_sparsity: float = 0.5
    eta: int = DEFAULT_ETA
    mode: Pipeline = Pipeline.SEQUENTIAL
    whitening: str = "whitened"
    activation: Activation = Activation.REGLU
    seed: int = 0
    output_path: Path | None = None

    def resolve_rank(self, D: int, d: int) -> int:
        if self.rank == "auto":
            return auto_rank(D, d)
        r = int(self.rank)
        if not 1 <= r <= min(D, d):
            raise UsageError(f"rank {r} outside [1, min(D, d)] = [1, {min(D, d)}]")
        return r


def layer_dirs(root) -> list[Path]:
    """Layer containers under ``root`` in layer order."""
    root = Path(root)
    if (root / MANIFEST_NAME).is_file():
        return [root]
    subs = sorted(p for p in root.glob("layer_*") if (p / MANIFEST_NAME).is_file())
    if not subs:
        raise SparseGateError(f"{root} holds neither {MANIFEST_NAME} nor layer_* containers")
    return subs


def _mirror(src_root: Path, src_layer: Path, dst_root: Path) -> Path:
    return dst_root / src_layer.relative_to(src_root)


def _require(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required for this command")
    return Path(path)


def _dump_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _paired_layers(cfg: RunConfig, other: Path, flag: str):
    wroot = _require(cfg.weights_path, "--weights")
    wl = layer_dirs(wroot)
    ol = layer_dirs(other)
    if len(wl) != len(ol):
        raise SparseGateError(f"{flag} has {len(ol)} layers but --weights has {len(wl)}")
    return wroot, list(zip(wl, ol))


def cmd_build(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--out")
    wroot, pairs = _paired_layers(cfg, _require(cfg.calib_path, "--calib"), "--calib")
    for wdir, cdir in pairs:
        w = load_ffn_weights(load_manifest(wdir), cfg.activation)
        cal = load_activation_batch(load_manifest(cdir))
        r = cfg.resolve_rank(w.D, w.d)
        pred, info = build_predictor(w.gate, cal, r, cfg.whitening)
        dst = _mirror(wroot, wdir, out)
        save_predictor(pred, dst)
        _dump_json({
            "rank": r,
            "whitening": cfg.whitening,
            "damping": info.damping,
            "singular_values": info.singular_values.tolist(),
            "gate_singular_values": info.gate_singular_values.tolist(),
            "sigma_r_plus_1": info.sigma_r_plus_1,
            "d": w.d,
            "D": w.D,
        }, dst / "build.json")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--out")
    proot = _require(cfg.predictor_path, "--predictor")
    wroot, pairs = _paired_layers(cfg, _require(cfg.calib_path, "--calib"), "--calib")
    players = layer_dirs(proot)
    if len(players) != len(pairs):
        raise SparseGateError(f"--predictor has {len(players)} layers but --weights has {len(pairs)}")
    for (wdir, cdir), pdir in zip(pairs, players):
        w = load_ffn_weights(load_manifest(wdir), cfg.activation)
        cal = load_activation_batch(load_manifest(cdir))
        pred = load_predictor(pdir)
        new_pred, res = calibrate(w, pred, cal, cfg.target_sparsity, cfg.eta)
        dst = _mirror(wroot, wdir, out)
        save_predictor(new_pred, dst)
        _dump_json(res.to_json(), dst / "calibration.json")
    return EXIT_OK


def output_hash(y: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(y, dtype="<f8").tobytes()).hexdigest()


def _eval_layers(cfg: RunConfig):
    """(layer index, weights, predictor or None, eval columns) per layer."""
    wroot, pairs = _paired_layers(cfg, _require(cfg.eval_path, "--eval"), "--eval")
    preds = [None] * len(pairs)
    if cfg.mode is not Pipeline.DENSE or cfg.predictor_path is not None:
        players = layer_dirs(_require(cfg.predictor_path, "--predictor"))
        if len(players) != len(pairs):
            raise SparseGateError(f"--predictor has {len(players)} layers but --weights has {len(pairs)}")
        preds = [load_predictor(p) for p in players]
    for li, ((wdir, edir), pred) in enumerate(zip(pairs, preds)):
        w = load_ffn_weights(load_manifest(wdir), cfg.activation)
        m = load_manifest(edir)
        # An eval container with no entries is an empty batch.
        X = load_activation_batch(m).x_cols if m.entries else np.zeros((w.d, 0))
        yield li, w, pred, X


def cmd_run(cfg: RunConfig) -> int:
    buf = io.StringIO()
    for li, w, pred, X in _eval_layers(cfg):
        for t, x in enumerate(X.T):
            y, st = run_pipeline(cfg.mode, w, pred, x)
            rec = {"layer": li, "token_index": t, "predicted_sparsity": st.predicted_sparsity,
                   "realized_sparsity": st.realized_sparsity, "multiplies": st.multiplies,
                   "output_hash": output_hash(y)}
            buf.write(json.dumps(rec, sort_keys=True) + "\n")
    if cfg.output_path is None:
        sys.stdout.write(buf.getvalue())
    else:
        out = Path(cfg.output_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    out = _require(cfg.output_path, "--out")
    if cfg.predictor_path is None:
        raise UsageError("--predictor is required for eval")
    rows, counts = [], []
    for li, w, pred, X in _eval_layers(cfg):
        if X.shape[1] == 0:
            raise SparseGateError(f"layer {li}: eval batch is empty")
        row = layer_metrics(w, pred, X, layer=li, mode=cfg.mode)
        rows.append(row)
        oc = op_count_model(w.d, w.D, pred.rank, row.predicted_sparsity, row.realized_sparsity)
        counts.append({"layer": li, "d": w.d, "D": w.D, "rank": pred.rank,
                       "predicted_sparsity": row.predicted_sparsity,
                       "realized_sparsity": row.realized_sparsity, **asdict(oc)})
    out.mkdir(parents=True, exist_ok=True)
    _dump_json({"mode": cfg.mode.value, "layers": [asdict(r) for r in rows], "op_count": counts},
               out / "metrics.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricRow.FIELDS)
        for r in rows:
            writer.writerow([repr(getattr(r, f)) for f in MetricRow.FIELDS])
    for c in counts:
        print(f"layer {c['layer']}: s={c['predicted_sparsity']:.4f} s'={c['realized_sparsity']:.4f} "
              f"ratio {c['ratio']:.2f}")
    return EXIT_OK


def _report_properties(results, out: Path | None, trials: int) -> int:
    if trials == 0:
        print("warning: zero trials requested; property suite is vacuous", file=sys.stderr)
    doc = {"trials": trials, "properties": [r.to_json() for r in results],
           "ok": all(r.ok for r in results)}
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: passed={r.passed} failed={r.failed} skipped={r.skipped}")
    if out is not None:
        _dump_json(doc, Path(out))
    return EXIT_OK if doc["ok"] else EXIT_VIOLATION


def cmd_verify_bounds(args) -> int:
    results = run_bound_suite(args.trials, args.seed, args.dim_d, args.dim_D, args.rank_small)
    return _report_properties(results, args.out, args.trials)


def cmd_oracle_check(args) -> int:
    results = run_oracle_suite(args.trials, args.seed, args.max_neurons, args.max_samples)
    return _report_properties(results, args.out, args.trials)


def cmd_opcount(args) -> int:
    oc = op_count_model(args.dim_d, args.dim_D, args.rank_small, args.sparsity, args.realized)
    print(json.dumps(asdict(oc), sort_keys=True))
    print(f"ratio {oc.ratio:.2f}")
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    out = _require(args.out, "--out")
    write_fixture(out, d=args.dim_d, D=args.dim_D, n_calib=args.calib_tokens,
                  n_eval=args.eval_tokens, layers=args.layers, seed=args.seed,
                  activation=args.activation, active_fraction=args.active_fraction)
    return EXIT_OK


def _rank_arg(text: str):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rank must be an integer or 'auto', got {text!r}") from None


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"sparsity must be in (0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsegate", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def pipeline_cmd(name, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False)
        sp.add_argument("--weights", type=Path)
        sp.add_argument("--calib", type=Path)
        sp.add_argument("--eval", type=Path)
        sp.add_argument("--predictor", type=Path)
        sp.add_argument("--rank", type=_rank_arg, default="auto")
        sp.add_argument("--sparsity", type=_fraction, default=0.5)
        sp.add_argument("--eta", type=int, default=DEFAULT_ETA)
        sp.add_argument("--mode", choices=[m.value for m in Pipeline], default="sequential")
        sp.add_argument("--whitening", choices=["whitened", "naive"], default="whitened")
        sp.add_argument("--activation", choices=[a.value for a in Activation], default="reglu")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=Path)
        return sp

    pipeline_cmd("build", "build low-rank predictors (zero bias) from weights and calibration data")
    pipeline_cmd("calibrate", "greedy per-neuron bias calibration to a target sparsity")
    pipeline_cmd("run", "execute a pipeline per eval token, emitting JSON lines")
    pipeline_cmd("eval", "per-layer recall/sparsity/AUC/error metrics as CSV and JSON")

    vb = sub.add_parser("verify-bounds", help="randomized checks of the gating-error bounds", allow_abbrev=False)
    vb.add_argument("--trials", type=int, default=100)
    vb.add_argument("--seed", type=int, default=0)
    vb.add_argument("--d", dest="dim_d", type=int, default=8)
    vb.add_argument("--D", dest="dim_D", type=int, default=16)
    vb.add_argument("--rank", dest="rank_small", type=int, default=4)
    vb.add_argument("--out", type=Path)

    oc = sub.add_parser("oracle-check", help="greedy calibration versus exact DP and Kendall oracles",
                        allow_abbrev=False)
    oc.add_argument("--trials", type=int, default=100)
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--max-neurons", type=int, default=8)
    oc.add_argument("--max-samples", type=int, default=12)
    oc.add_argument("--out", type=Path)

    op = sub.add_parser("opcount", help="analytic multiply counts for dense vs sparse FFN", allow_abbrev=False)
    op.add_argument("--d", dest="dim_d", type=int, required=True)
    op.add_argument("--D", dest="dim_D", type=int, required=True)
    op.add_argument("--rank", dest="rank_small", type=int, required=True)
    op.add_argument("--sparsity", type=float, required=True, help="predicted sparsity s")
    op.add_argument("--realized", type=float, required=True, help="realized sparsity s'")

    fx = sub.add_parser("make-fixture", help="write seeded synthetic weights/calib/eval containers",
                        allow_abbrev=False)
    fx.add_argument("--out", type=Path)
    fx.add_argument("--d", dest="dim_d", type=int, default=64)
    fx.add_argument("--D", dest="dim_D", type=int, default=256)
    fx.add_argument("--calib-tokens", type=int, default=512)
    fx.add_argument("--eval-tokens", type=int, default=32)
    fx.add_argument("--layers", type=int, default=1)
    fx.add_argument("--activation", choices=[a.value for a in Activation], default="reglu")
    fx.add_argument("--active-fraction", type=float, default=0.1)
    fx.add_argument("--seed", type=int, default=0)
    return p


def config_from_args(args) -> RunConfig:
    if args.eta < 1:
        raise UsageError(f"--eta must be >= 1, got {args.eta}")
    return RunConfig(
        weights_path=args.weights, calib_path=args.calib, eval_path=args.eval,
        predictor_path=args.predictor, rank=args.rank, target_sparsity=args.sparsity,
        eta=args.eta, mode=Pipeline(args.mode), whitening=args.whitening,
        activation=Activation(args.activation), seed=args.seed, output_path=args.out,
    )


PIPELINE_COMMANDS = {"build": cmd_build, "calibrate": cmd_calibrate, "run": cmd_run, "eval": cmd_eval}
OTHER_COMMANDS = {"verify-bounds": cmd_verify_bounds, "oracle-check": cmd_oracle_check,
                  "opcount": cmd_opcount, "make-fixture": cmd_make_fixture}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            if args.command in PIPELINE_COMMANDS:
                return PIPELINE_COMMANDS[args.command](config_from_args(args))
            return OTHER_COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sparsegate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SparseGateError, OSError) as exc:
        print(f"sparsegate: error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
