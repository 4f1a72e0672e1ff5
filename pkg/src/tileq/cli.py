"""``tileq`` command line: synth, quantize, verify, bench and report subcommands.

Machine-readable output (JSON or CSV) goes to stdout or ``--out``; progress goes to stderr.
Exit codes: 0 success, 1 verification failure, 2 IO or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .accounting import all_budgets, bits_basic, bits_1d, bits_per_expert, bits_tileq, budget_json
from .bench import DEFAULT_BATCHES, DEFAULT_LAYOUTS, LAYOUTS, bench, to_csv
from .errors import CorruptArtifactError, NumericError, TileQError
from .linalg import gaussian, make_rng
from .model_io import read_artifact, read_model, write_artifact, write_model
from .moe import MoELayerSpec, synth_experts
from .pipeline import QuantConfig, VerifyReport, error_bound_report, quantize_layer, verify_layer
from .tiler import default_grid

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# Defaults for every knob; flags override a --config JSON file, which overrides these.
DEFAULTS = {
    "k": 16, "topk": 2, "i": 64, "o": 96, "grid": None, "rank": 32, "feature_rank": None,
    "bits": 4, "group_size": 128, "scale_exp": 0.5, "power_iters": 4, "damping": 0.01,
    "mode": "gptq", "subdim": 2, "seed": 0, "threads": 1,
    "noise": 0.0, "mix": 0.1, "calib_tokens": 512, "shared": 0,
    "d_fp": 16, "d_factor": 8, "epsilon": 0.02, "batches": list(DEFAULT_BATCHES),
    "layouts": list(DEFAULT_LAYOUTS), "repeats": 7, "warmup": 1,
}

KNOB_HELP = {
    "k": "number of routed experts K",
    "topk": "experts selected per token",
    "i": "expert input dimension",
    "o": "expert output dimension",
    "grid": "tile grid MxN",
    "rank": "shared tile rank r (synth: planted rank per cluster)",
    "feature_rank": "feature rank r0 for clustering",
    "bits": "residual code width d",
    "group_size": "quantization group size g along the input dimension",
    "scale_exp": "scaling exponent p",
    "power_iters": "power iterations of the Gaussian sketch",
    "damping": "Hessian damping fraction",
    "mode": "residual quantizer",
    "subdim": "vector quantizer subvector length",
    "seed": "master seed (falls back to $TILEQ_SEED)",
    "threads": "batch-parallel threads (bench only)",
}


class ConfigError(TileQError):
    pass


def _grid(text: str) -> list[int]:
    try:
        m, n = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must look like MxN, got {text!r}") from exc
    return [m, n]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_knob(p, name: str, kind, **kw) -> None:
    default = DEFAULTS[name]
    if default is None:
        shown = "M = round(sqrt K), N = ceil(K/M)" if name == "grid" else "rank/2"
    elif isinstance(default, list):
        shown = ",".join(map(str, default))
    else:
        shown = default
    help_text = f"{KNOB_HELP.get(name, kw.pop('help', ''))} (default: {shown})"
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None, help=help_text, **kw)


def _add_layer_knobs(p) -> None:
    for name in ("k", "topk", "i", "o"):
        _add_knob(p, name, int)
    _add_knob(p, "grid", _grid, metavar="MxN")
    _add_knob(p, "rank", int)


def _add_quant_knobs(p) -> None:
    _add_knob(p, "feature_rank", int)
    _add_knob(p, "bits", int)
    _add_knob(p, "group_size", int)
    _add_knob(p, "scale_exp", float)
    _add_knob(p, "power_iters", int)
    _add_knob(p, "damping", float)
    _add_knob(p, "mode", str, choices=("rtn", "gptq", "vq"))
    _add_knob(p, "subdim", int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tileq", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="JSON file with knob values (flags take precedence)")
        _add_knob(p, "seed", int)
        p.add_argument("--out", type=Path, help=out_help)

    p = sub.add_parser("synth", help="write a synthetic expert set with planted 2-D clusters")
    _add_layer_knobs(p)
    _add_knob(p, "noise", float, help="Gaussian noise added to every expert")
    _add_knob(p, "mix", float, help="per-expert perturbation of the planted core")
    _add_knob(p, "calib_tokens", int, help="calibration activations stored with the model")
    _add_knob(p, "shared", int, help="number of shared experts")
    common(p, "output model directory (required)")

    p = sub.add_parser("quantize", help="run the tiling and residual quantization pipeline")
    p.add_argument("--model", type=Path, required=True, help="model directory written by synth")
    _add_knob(p, "grid", _grid, metavar="MxN")
    _add_knob(p, "rank", int)
    _add_quant_knobs(p)
    p.add_argument("--report", type=Path, help="also write the JSON report to this file")
    p.add_argument("--no-verify", action="store_true", help="skip CRC32 checks when reading the model")
    common(p, "output artifact directory (required)")

    p = sub.add_parser("verify", help="check an artifact; exit 1 if any check fails")
    p.add_argument("--artifact", type=Path, required=True, help="artifact directory")
    p.add_argument("--model", type=Path, help="source model, enables reconstruction and error-bound checks")
    p.add_argument("--check", action="append", choices=("error-bound",), default=[],
                   help="extra check to run")
    _add_knob(p, "epsilon", float, help="error-bound threshold on the mean relative gap")
    _add_knob(p, "power_iters", int)
    p.add_argument("--no-verify", action="store_true", help="skip CRC32 checks when reading")
    common(p, "write the JSON verdict here instead of stdout")

    p = sub.add_parser("bench", help="time fused, 1-D shared and element-wise low-rank layouts")
    p.add_argument("--artifact", type=Path, help="benchmark this artifact instead of a synthetic layer")
    _add_layer_knobs(p)
    _add_knob(p, "batches", _int_list, help="comma-separated batch sizes")
    _add_knob(p, "layouts", lambda s: s.split(","), help=f"comma-separated subset of {','.join(LAYOUTS)}")
    _add_knob(p, "repeats", int, help="timed repetitions per cell")
    _add_knob(p, "warmup", int, help="untimed warmup calls per cell")
    _add_knob(p, "threads", int)
    p.add_argument("--json", type=Path, help="also write the full reports as JSON to this file")
    p.add_argument("--no-verify", action="store_true", help="skip CRC32 checks when reading")
    common(p, "CSV output file instead of stdout")

    p = sub.add_parser("report", help="bit budgets of the four storage schemes")
    _add_layer_knobs(p)
    _add_knob(p, "bits", int)
    _add_knob(p, "group_size", int)
    _add_knob(p, "d_fp", int, help="bits of floating-point scales and singular values")
    _add_knob(p, "d_factor", int, help="bits per low-rank factor entry")
    p.add_argument("--scheme", choices=("basic", "per_expert", "shared_1d", "tileq_2d"),
                   help="report only this scheme")
    common(p, "write the JSON here instead of stdout")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the optional JSON config over defaults, then validate basic ranges."""
    file_cfg = {}
    if getattr(args, "config", None) is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    cfg = dict(vars(args))
    for key, default in DEFAULTS.items():
        if cfg.get(key) is None:
            if key in file_cfg:
                cfg[key] = file_cfg[key]
            elif key == "seed" and os.environ.get("TILEQ_SEED"):
                try:
                    cfg[key] = int(os.environ["TILEQ_SEED"])
                except ValueError as exc:
                    raise ConfigError("TILEQ_SEED must be an integer") from exc
            else:
                cfg[key] = default
    for key in ("k", "topk", "i", "o", "rank", "bits", "group_size", "subdim", "threads", "repeats"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"--{key.replace('_', '-')} must be >= 1")
    if cfg["topk"] > cfg["k"]:
        raise ConfigError(f"--topk {cfg['topk']} violates top_k <= K ({cfg['k']})")
    if cfg["grid"] is not None:
        m, n = cfg["grid"]
        if m < 1 or n < 1 or m * n < cfg["k"]:
            raise ConfigError(f"--grid {m}x{n} violates M*N >= K (K={cfg['k']})")
    return cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {out}: {exc}") from exc


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def synth_calibration(spec: MoELayerSpec, tokens: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gate weights and calibration activations for a synthetic layer.

    Activations keep a fixed per-channel magnitude with random signs, so every expert sees
    the same mean-abs statistics and therefore the same scaling vector.
    """
    rng = make_rng(seed + 1)
    gate = (gaussian(rng, (spec.num_experts, spec.in_dim)) / np.sqrt(spec.in_dim)).astype(np.float32)
    magnitude = np.exp(0.5 * gaussian(rng, (spec.in_dim,)))
    signs = np.where(rng.random((tokens, spec.in_dim)) < 0.5, -1.0, 1.0)
    return gate, (signs * magnitude).astype(np.float32)


def cmd_synth(cfg: dict) -> int:
    if cfg["out"] is None:
        raise ConfigError("synth needs --out")
    spec = MoELayerSpec(cfg["k"], cfg["topk"], cfg["i"], cfg["o"], cfg["shared"])
    m, n = cfg["grid"] or default_grid(spec.num_experts)
    experts, planted = synth_experts(spec, m, n, cfg["rank"], cfg["mix"], cfg["noise"], cfg["seed"])
    gate, calib = synth_calibration(spec, cfg["calib_tokens"], cfg["seed"])
    sidecar = {"grid": [m, n], "planted_rank": cfg["rank"], "matched_tile_rank": min(m, n) * cfg["rank"],
               "noise": cfg["noise"], "mix": cfg["mix"], "seed": cfg["seed"],
               "cells": [list(c) for c in planted]}
    write_model(cfg["out"], experts, {"gate_weights": gate, "calib": calib}, {"planted": sidecar})
    (Path(cfg["out"]) / "planted.json").write_text(_dump(sidecar))
    _log(f"synth: wrote K={spec.num_experts} experts ({spec.out_dim}x{spec.in_dim}), grid {m}x{n}, "
         f"planted rank {cfg['rank']}, {calib.shape[0]} calibration rows to {cfg['out']}")
    return EXIT_OK


def _load_model(path: Path, verify: bool):
    experts, extra, _ = read_model(path, verify)
    if "gate_weights" not in extra:
        raise ConfigError(f"model {path} has no gate_weights tensor")
    return experts, extra["gate_weights"], extra.get("calib")


def cmd_quantize(cfg: dict) -> int:
    if cfg["out"] is None:
        raise ConfigError("quantize needs --out")
    experts, gate, calib = _load_model(cfg["model"], not cfg["no_verify"])
    qc = QuantConfig(rank=cfg["rank"], grid=tuple(cfg["grid"]) if cfg["grid"] else None,
                     feature_rank=cfg["feature_rank"], bits=cfg["bits"], group_size=cfg["group_size"],
                     scale_exp=cfg["scale_exp"], power_iters=cfg["power_iters"], damping=cfg["damping"],
                     mode=cfg["mode"], sub_dim=cfg["subdim"], seed=cfg["seed"])
    layer, report = quantize_layer(experts, gate, calib, qc)
    write_artifact(cfg["out"], layer)
    times = report.stage_times
    total = sum(times.values())
    for name, t in times.items():
        _log(f"  {name:<10} {t * 1e3:9.2f} ms  ({100 * t / total:5.1f}%)")
    tiling = sum(times[s] for s in ("scaling", "features", "cluster", "place", "mosaic", "decompose"))
    _log(f"tiling {tiling * 1e3:.1f} ms vs quantize+pack {(times['quantize'] + times['pack']) * 1e3:.1f} ms")
    _log(f"mean low-rank relative error {report.mean_lowrank_rel_error:.4%}, "
         f"proxy loss ({qc.mode}) {report.proxy_loss:.6g}, "
         f"avg bits {float(report.budget.total_avg_bits):.4f}")
    text = _dump(report.to_dict())
    if cfg["report"] is not None:
        Path(cfg["report"]).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    report = VerifyReport()
    try:
        layer = read_artifact(cfg["artifact"], not cfg["no_verify"])
        report.add("artifact_read", True)
    except CorruptArtifactError as exc:
        report.add("checksum", False, str(exc))
        layer = None
    if layer is not None:
        with tempfile.TemporaryDirectory() as tmp:
            write_artifact(tmp, layer)
            src, dst = Path(cfg["artifact"]), Path(tmp)
            names = sorted(p.name for p in dst.iterdir())
            same = all((src / f).is_file() and (src / f).read_bytes() == (dst / f).read_bytes() for f in names)
            report.add("artifact_roundtrip", same)
        experts = None
        if cfg["model"] is not None:
            experts, _, _ = _load_model(cfg["model"], not cfg["no_verify"])
        verify_layer(layer, experts, seed=cfg["seed"], report=report)
        if "error-bound" in cfg["check"]:
            if experts is None:
                raise ConfigError("--check error-bound needs --model")
            eb = error_bound_report(experts, layer.tiled, cfg["power_iters"], cfg["seed"])
            report.add("error_bound", eb.mean_gap <= cfg["epsilon"],
                       f"mean gap {eb.mean_gap:.4f} vs epsilon {cfg['epsilon']}")
            verdict = report.to_dict()
            verdict["error_bound"] = eb.to_dict()
        else:
            verdict = report.to_dict()
    else:
        verdict = report.to_dict()
    for c in report.checks:
        _log(f"  {'PASS' if c.passed else 'FAIL'} {c.name} {c.detail}".rstrip())
    _emit(_dump(verdict), cfg["out"])
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_bench(cfg: dict) -> int:
    if cfg["artifact"] is not None:
        layer = read_artifact(cfg["artifact"], not cfg["no_verify"])
    else:
        spec = MoELayerSpec(cfg["k"], cfg["topk"], cfg["i"], cfg["o"])
        m, n = cfg["grid"] or default_grid(spec.num_experts)
        experts, _ = synth_experts(spec, m, n, max(1, cfg["rank"] // min(m, n)), seed=cfg["seed"])
        gate, _ = synth_calibration(spec, 1, cfg["seed"])
        layer, _ = quantize_layer(experts, gate, None,
                                  QuantConfig(rank=cfg["rank"], grid=(m, n), mode="rtn",
                                              group_size=min(cfg["group_size"], spec.in_dim),
                                              seed=cfg["seed"]))
    unknown = [name for name in cfg["layouts"] if name not in LAYOUTS]
    if unknown:
        raise ConfigError(f"unknown layouts {unknown}; choose from {LAYOUTS}")
    reports = bench(layer, cfg["layouts"], cfg["batches"], cfg["repeats"], cfg["warmup"], cfg["seed"],
                    cfg["threads"])
    for r in reports:
        _log(f"  {r.layout:<13} B={r.batch:<4} median {r.median_ns / 1e3:10.1f} us  dispatches {r.dispatch_count}")
    _emit(to_csv(reports), cfg["out"])
    if cfg["json"] is not None:
        Path(cfg["json"]).write_text(_dump([r.to_dict() for r in reports]))
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    k, i, o, r = cfg["k"], cfg["i"], cfg["o"], cfg["rank"]
    m, n = cfg["grid"] or default_grid(k)
    d, g, d_fp, d_factor = cfg["bits"], cfg["group_size"], cfg["d_fp"], cfg["d_factor"]
    if cfg["scheme"] is None:
        budgets = all_budgets(d, g, d_fp, d_factor, r, i, o, k, m, n)
    else:
        budgets = {cfg["scheme"]: {
            "basic": lambda: bits_basic(d, g, d_fp),
            "per_expert": lambda: bits_per_expert(d, g, d_fp, d_factor, r, i, o),
            "shared_1d": lambda: bits_1d(d, g, d_fp, d_factor, r, i, o, k),
            "tileq_2d": lambda: bits_tileq(d, g, d_fp, d_factor, r, i, o, k, m, n),
        }[cfg["scheme"]]()}
    for name, b in budgets.items():
        _log(f"  {name:<11} total {float(b.total_avg_bits):.6f}  scale {float(b.scale_bits):.6f}  "
             f"low-rank extra {float(b.extra_bits):.6f}")
    _emit(_dump(budget_json(budgets)), cfg["out"])
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "quantize": cmd_quantize, "verify": cmd_verify, "bench": cmd_bench,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        _log(f"tileq {args.command}: numeric failure: {exc}")
        return EXIT_NUMERIC
    except (TileQError, OSError) as exc:
        _log(f"tileq {args.command}: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
