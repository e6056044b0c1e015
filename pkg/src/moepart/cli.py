"""Command-line experiment runner.

Every subcommand writes its outputs plus a ``manifest.json`` (resolved
configuration and SHA-256 of input files) into ``<out>/<command>/``. The
output root defaults to ``$MOEPART_OUT`` or ``./runs``. Flags may also be
supplied through ``--config file.json``; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import artifact_io as aio
from .comm_sim import bandwidth_sweep, random_scenario, report_json, simulate_etp, simulate_setp, sweep_csv
from .dropping import DropPolicy, analyze_gating, run_policy, threshold_sweep
from .ep_sim import balanced_tokens, place_experts, simulate_step, skewed_tokens
from .errors import ConfigError, MoeError, ValidationFailed
from .moe_model import MoeConfig, MoeModel, moe_forward, route
from .reconstruct import METRICS, profile_importance, reconstruct_experts
from .transform import complete_transform, partial_transform, verify_equivalence

EXIT_MISSING_FILE = 6
EQUIVALENCE_TOL = {"f64": 1e-10, "f32": 1e-4}


def _dtype(tag: str):
    return np.float32 if tag == "f32" else np.float64


def _out_dir(args) -> Path:
    root = Path(args.out or os.environ.get("MOEPART_OUT", "runs"))
    d = root / args.command
    d.mkdir(parents=True, exist_ok=True)
    return d


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "out")}


def _write_manifest(args, out: Path, inputs: dict[str, str], extra: dict | None = None) -> None:
    doc = {
        "command": args.command,
        "config": _resolved(args),
        "inputs": {name: {"path": p, "sha256": aio.sha256_file(p)} for name, p in sorted(inputs.items()) if p},
    }
    if extra:
        doc.update(extra)
    aio.write_atomic(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _synthetic_config(args) -> MoeConfig:
    return MoeConfig(
        d_model=args.d_model,
        d_ffn=args.d_ffn,
        num_experts=args.experts,
        top_k=args.top_k,
        num_shared_experts=args.shared,
        gate_prenormalized=args.prenormalized,
    )


def _load_or_generate(args) -> MoeModel:
    if getattr(args, "model", None):
        return aio.load_model(args.model)
    return aio.generate_synthetic(_synthetic_config(args), args.seed, args.scale, _dtype(args.dtype), num_layers=args.layers)


def _tokens(args, model: MoeModel, file_attr: str = "tokens", count_attr: str = "num_tokens", seed_attr: str = "token_seed"):
    path = getattr(args, file_attr, None)
    if path:
        x = aio.load_tokens(path)
    else:
        x = aio.synthetic_tokens(getattr(args, count_attr), model.layers[0].config.d_model, getattr(args, seed_attr))
    if x.shape[1] != model.layers[0].config.d_model:
        raise ConfigError(f"tokens have width {x.shape[1]}, model expects {model.layers[0].config.d_model}")
    return x.astype(model.dtype)


def _policy(args) -> DropPolicy:
    keep = not args.no_keep_top1
    if args.policy == "none":
        return DropPolicy.none()
    if args.policy == "1t":
        return DropPolicy.one_threshold(args.t, keep)
    return DropPolicy.two_threshold(args.t, args.t_major, args.t_minor, keep)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# --- subcommands -----------------------------------------------------------


def cmd_generate(args) -> int:
    model = _load_or_generate(args)
    out = _out_dir(args)
    path = Path(args.output) if args.output else out / "model.dsmoe"
    aio.save_model(model, path)
    _write_manifest(args, out, {}, {"model_sha256": aio.sha256_file(path)})
    print(f"wrote {path} ({len(model.layers)} layers)")
    return 0


def cmd_tokens(args) -> int:
    out = _out_dir(args)
    x = aio.synthetic_tokens(args.num_tokens, args.d_model, args.token_seed, _dtype(args.dtype))
    path = Path(args.output) if args.output else out / "tokens.bin"
    aio.save_tokens(x, path)
    _write_manifest(args, out, {}, {"tokens_sha256": aio.sha256_file(path)})
    print(f"wrote {path} {x.shape}")
    return 0


def cmd_transform(args) -> int:
    model = _load_or_generate(args)
    x = _tokens(args, model)
    out = _out_dir(args)
    layers, specs, reports = [], [], []
    tol = EQUIVALENCE_TOL["f32" if model.dtype == np.float32 else "f64"]
    for layer in model.layers:
        if args.mode == "complete":
            new, spec = complete_transform(layer, args.p), None
        else:
            new, spec = partial_transform(layer, args.p)
        layers.append(new)
        specs.append(spec)
        reports.append(verify_equivalence(layer, new, x, tol))
    result = MoeModel(layers, specs)
    path = Path(args.output) if args.output else out / "model.dsmoe"
    aio.save_model(result, path)
    max_rel = max(r.max_rel for r in reports)
    summary = {
        "mode": args.mode,
        "p": args.p,
        "tolerance": tol,
        "max_abs_error": max(r.max_abs for r in reports),
        "max_rel_error": max_rel,
        "per_layer_max_rel_error": [r.max_rel for r in reports],
        "passed": all(r.passed for r in reports),
    }
    aio.write_atomic(out / "equivalence.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(args, out, {"model": args.model, "tokens": args.tokens}, {"output_sha256": aio.sha256_file(path)})
    print(f"max relative error: {max_rel:.3e} (tolerance {tol:g})")
    if not summary["passed"]:
        raise ValidationFailed(f"equivalence check failed: {max_rel:.3e} > {tol:g}")
    return 0


def cmd_reconstruct(args) -> int:
    model = _load_or_generate(args)
    calib = _tokens(args, model, "calib", "calib_tokens", "calib_seed")
    out = _out_dir(args)
    layers, specs, maps, profiles = [], [], [], []
    h = calib
    for i, layer in enumerate(model.layers):
        r = route(layer, h)
        prof = profile_importance(layer, h, r, args.metric, layer_id=str(i), provenance={"calib": args.calib or f"synthetic:{args.calib_tokens}:{args.calib_seed}"})
        new, spec, rmap = reconstruct_experts(layer, prof)
        layers.append(new)
        specs.append(spec)
        maps.append(rmap)
        profiles.append(prof.to_dict())
        h = h + moe_forward(layer, h, r)
    path = Path(args.output) if args.output else out / "model.dsmoe"
    aio.save_model(MoeModel(layers, specs, maps), path)
    aio.write_atomic(out / "importance.json", json.dumps({"layers": profiles}, sort_keys=True) + "\n")
    _write_manifest(args, out, {"model": args.model, "calib": args.calib}, {"output_sha256": aio.sha256_file(path)})
    print(f"wrote {path}; importance profiles in {out / 'importance.json'}")
    return 0


def cmd_infer(args) -> int:
    model = _load_or_generate(args)
    x = _tokens(args, model)
    out = _out_dir(args)
    policy = _policy(args)
    res = run_policy(model.layers, x, policy, model.recon_maps)
    doc = {
        "policy": policy.to_dict(),
        "drop_rate": res.drop_rate,
        "rel_error": res.rel_error,
        "layers": [s.to_dict() for s in res.stats],
    }
    aio.write_atomic(out / "infer.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(args, out, {"model": args.model, "tokens": args.tokens})
    _print(doc)
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


def cmd_sweep(args) -> int:
    model = _load_or_generate(args)
    x = _tokens(args, model)
    out = _out_dir(args)
    rep = threshold_sweep(model.layers, x, args.policy, _float_list(args.thresholds), model.recon_maps, not args.no_keep_top1)
    csv_text = rep.to_csv()
    aio.write_atomic(out / "sweep.csv", csv_text)
    _write_manifest(args, out, {"model": args.model, "tokens": args.tokens})
    sys.stdout.write(csv_text)
    return 0


def cmd_analyze_gating(args) -> int:
    model = _load_or_generate(args)
    x = _tokens(args, model)
    out = _out_dir(args)
    reports = []
    h = x
    for i, layer in enumerate(model.layers):
        rep = analyze_gating(layer, h, args.bins)
        aio.write_atomic(out / f"gating_layer{i}.csv", rep.to_csv())
        reports.append(rep.to_dict())
        h = h + moe_forward(layer, h, route(layer, h))
    aio.write_atomic(out / "gating.json", json.dumps({"layers": reports}, indent=2, sort_keys=True) + "\n")
    _write_manifest(args, out, {"model": args.model, "tokens": args.tokens})
    print(f"wrote {len(reports)} gating histograms to {out}")
    return 0


def cmd_sim_ep(args) -> int:
    model = _load_or_generate(args)
    layer = model.layers[args.layer]
    out = _out_dir(args)
    rng = np.random.default_rng(args.token_seed)
    if args.tokens:
        x = _tokens(args, model)
    elif args.balanced:
        x = balanced_tokens(layer, args.num_tokens, rng)
    else:
        x = skewed_tokens(layer, args.num_tokens, rng, skew=args.skew, hot=args.hot)
    placement = place_experts(len(layer.experts), args.devices, args.placement)
    policy = _policy(args)
    report, _ = simulate_step(layer, x, placement, policy, args.load_aware)
    aio.write_atomic(out / "ep_report.json", report.to_json() + "\n")
    aio.write_atomic(out / "ep_report.csv", report.to_csv())
    _write_manifest(args, out, {"model": args.model, "tokens": args.tokens})
    print(report.to_json())
    return 0


def cmd_sim_comm(args) -> int:
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    sizes = [int(v) for v in _float_list(args.sizes)]
    if not sizes:
        raise ConfigError("--sizes must list at least one payload size")
    sc = random_scenario(
        args.ep, args.tp, rng,
        tokens_per_device=args.tokens_per_device,
        num_experts=args.experts,
        top_k=args.top_k,
        bytes_per_token=sizes[0],
        alpha=args.alpha,
        beta=args.beta,
        skew=args.skew,
        link_model=args.link_model,
    )
    etp, setp = simulate_etp(sc), simulate_setp(sc)
    if not np.array_equal(etp.deliveries, setp.deliveries):
        raise ValidationFailed("payload conservation violated between ETP and S-ETP")
    aio.write_atomic(out / "comm_report.json", report_json(etp, setp) + "\n")
    rows = bandwidth_sweep(sc, sizes)
    csv_text = sweep_csv(rows)
    aio.write_atomic(out / "bandwidth.csv", csv_text)
    _write_manifest(args, out, {})
    sys.stdout.write(csv_text)
    return 0


# --- parser ----------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (a container file or a synthetic spec)")
    g.add_argument("--model", help="model container; omit to synthesise one")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--experts", type=int, default=8)
    g.add_argument("--top-k", type=int, default=2)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--d-ffn", type=int, default=128)
    g.add_argument("--shared", type=int, default=0)
    g.add_argument("--layers", type=int, default=aio.DEFAULT_LAYERS)
    g.add_argument("--prenormalized", action="store_true")
    g.add_argument("--dtype", choices=("f32", "f64"), default="f64")


def _add_token_args(p: argparse.ArgumentParser, default_count: int = 256) -> None:
    g = p.add_argument_group("tokens")
    g.add_argument("--tokens", help="token matrix file; omit for synthetic tokens")
    g.add_argument("--num-tokens", type=int, default=default_count)
    g.add_argument("--token-seed", type=int, default=1)


def _add_policy_args(p: argparse.ArgumentParser, policies=("none", "1t", "2t")) -> None:
    p.add_argument("--policy", choices=policies, default=policies[0])
    p.add_argument("--t", type=float, default=0.0, help="T_drop (1T) or band centre (2T)")
    p.add_argument("--t-major", type=float)
    p.add_argument("--t-minor", type=float)
    p.add_argument("--no-keep-top1", action="store_true", help="allow dropping every selection of a token")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moepart", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("--out", help="output root (default $MOEPART_OUT or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise and save a model")
    _add_model_args(p)
    p.add_argument("--output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("tokens", help="write a synthetic token file")
    p.add_argument("--num-tokens", type=int, default=256)
    p.add_argument("--token-seed", type=int, default=1)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--output")
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser("transform", help="complete or partial expert partition with an equivalence check")
    _add_model_args(p)
    _add_token_args(p)
    p.add_argument("--mode", choices=("complete", "partial"), required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("reconstruct", help="profile neuron importance and build major/minor sub-experts")
    _add_model_args(p)
    p.add_argument("--metric", choices=[m.replace("_", "-") for m in METRICS], default="abs-gate")
    p.add_argument("--calib", help="calibration token file")
    p.add_argument("--calib-tokens", type=int, default=512)
    p.add_argument("--calib-seed", type=int, default=7)
    p.add_argument("--output")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("infer", help="forward tokens under a drop policy and report drop statistics")
    _add_model_args(p)
    _add_token_args(p)
    _add_policy_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="drop rate and output error over a threshold list")
    _add_model_args(p)
    _add_token_args(p)
    p.add_argument("--policy", choices=("1t", "2t"), default="1t")
    p.add_argument("--thresholds", required=True, help="comma-separated, ascending")
    p.add_argument("--no-keep-top1", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-gating", help="expert-selection and gate-score histograms")
    _add_model_args(p)
    _add_token_args(p, 1024)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_analyze_gating)

    p = sub.add_parser("sim-ep", help="expert-parallel load simulation")
    _add_model_args(p)
    _add_token_args(p, 1024)
    _add_policy_args(p, ("1t", "2t", "none"))
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--placement", choices=("contiguous", "round_robin"), default="contiguous")
    p.add_argument("--load-aware", action="store_true")
    p.add_argument("--balanced", action="store_true", help="synthesise tokens with perfectly balanced routing")
    p.add_argument("--skew", type=float, default=2.0, help="bias of synthetic tokens toward hot experts")
    p.add_argument("--hot", type=int, default=1)
    p.set_defaults(func=cmd_sim_ep)

    p = sub.add_parser("sim-comm", help="ETP vs S-ETP communication model")
    p.add_argument("--ep", type=int, required=True)
    p.add_argument("--tp", type=int, required=True)
    p.add_argument("--sizes", default="256,1024,4096,16384,65536", help="bytes per token, comma-separated")
    p.add_argument("--tokens-per-device", type=int, default=64)
    p.add_argument("--experts", type=int)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--alpha", type=float, default=5e-6)
    p.add_argument("--beta", type=float, default=1e11)
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--link-model", choices=("port", "pair"), default="port")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sim_comm)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        with open(known.config) as f:
            defaults = json.load(f)
        subparsers = parser._subparsers._group_actions[0].choices
        command = next((a for a in rest if a in subparsers), None)
        if command is not None:
            sub_parser = subparsers[command]
            actions = {a.dest: a for a in sub_parser._actions}
            unknown = set(defaults) - set(actions)
            if unknown:
                parser.error(f"unknown keys in --config: {', '.join(sorted(unknown))}")
            for key in defaults:
                # A value from the file satisfies a required flag.
                actions[key].required = False
            sub_parser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except MoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
