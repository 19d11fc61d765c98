"""``pluto`` command line: synth, pretrain, adapt, serve, list, fetch, verify, config.

Exit codes: 0 ok, 1 a check failed, 2 usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import checks, experiment, service, synth
from .experiment import ExperimentConfig
from .store import ModuleStore

logger = logging.getLogger("pluto")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def parse_m_range(text: str) -> list[int]:
    """``"1..4"`` or ``"1,2,4"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse M range {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError(f"M range {text!r} must list positive integers")
    return values


def load_config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    if path is None and getattr(args, "store", None):
        stored = Path(args.store) / "config.json"
        if stored.exists():
            path = stored
    try:
        cfg = ExperimentConfig.from_json(Path(path).read_text()) if path else ExperimentConfig()
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out"] = args.out
    eng = {}
    if getattr(args, "shots", None) is not None:
        eng["shots"] = args.shots
    if getattr(args, "top_m", None) is not None:
        eng["top_m"] = args.top_m
    sam = {}
    if getattr(args, "rho", None) is not None:
        sam["rho"] = args.rho
    if getattr(args, "entropy_factor", None) is not None:
        sam["entropy_factor"] = args.entropy_factor
    try:
        if sam:
            eng["sam"] = dataclasses.replace(cfg.engine.sam, **sam)
        if eng:
            changes["engine"] = dataclasses.replace(cfg.engine, **eng)
        return cfg.replace(**changes) if changes else cfg
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_config(args) -> int:
    print(load_config(args).to_json())
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    base = synth.make_base_dataset(cfg.sizes.source_train, seed=cfg.seed)
    (out / "base.plut").write_bytes(synth.save_dataset(base))
    specs = [("source", j, s) for j, s in enumerate(cfg.sources)] + [("target", 0, cfg.target)]
    written = ["base.plut"]
    for role, j, spec in specs:
        spec = dataclasses.replace(spec, seed=cfg.seed * 10_000 + 9_000 + len(written))
        name = f"{role}{j}-{spec.corruption}-sev{spec.severity}.plut" if role == "source" else \
            f"target-{spec.corruption}-sev{spec.severity}.plut"
        (out / name).write_bytes(synth.save_dataset(synth.make_domain(base, spec), spec))
        written.append(name)
    _write_json(out / "manifest.json", {"files": written, "seed": cfg.seed, "count": len(base)})
    print(f"wrote {len(written)} datasets to {out}")
    return EXIT_OK


def format_param_table(table: dict) -> str:
    lines = [f"{'artifact':<36}{'kind':<10}{'stored':>8}{'formula':>9}"]
    for m in table["modules"]:
        lines.append(f"{m['id']:<36}{m['kind']:<10}{m['stored']:>8}{m['formula']:>9}")
    lines.append(f"{'selector':<36}{'selector':<10}{table['selector_stored']:>8}{table['selector_formula']:>9}")
    return "\n".join(lines)


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    if not args.store:
        raise UsageError("pretrain needs --store")
    world = experiment.pretrain_world(cfg)
    store = experiment.save_world(world, args.store)
    (Path(args.store) / "config.json").write_text(cfg.to_json() + "\n")
    _write_json(Path(args.store) / "param_table.json", world.param_table)
    print(format_param_table(world.param_table))
    print(f"{len(store)} modules in {args.store}")
    return EXIT_OK


def _summary_rows(summary: dict) -> list[dict]:
    rows = [{"pipeline": "pluto", "accuracy": summary["pluto_accuracy"], "forgetting": summary["forgetting_pluto"]},
            {"pipeline": "uniform_baseline", "accuracy": summary["baseline_accuracy"],
             "forgetting": summary["forgetting_baseline"]}]
    for j, a in enumerate(summary["single_source_accuracy"]):
        rows.append({"pipeline": f"single_source_{j}", "accuracy": a, "forgetting": ""})
    for r in summary.get("sweep_m", []):
        rows.append({"pipeline": f"pluto_top_m_{r['top_m']}", "accuracy": r["accuracy"], "forgetting": ""})
    return rows


def cmd_adapt(args) -> int:
    if not args.store:
        raise UsageError("adapt needs --store")
    cfg = load_config(args)
    sweep = parse_m_range(args.sweep_m) if args.sweep_m else []
    if sweep and max(sweep) > len(cfg.sources):
        raise UsageError(f"--sweep-m goes past the {len(cfg.sources)} sources")
    out = _out_dir(args, cfg)
    world = experiment.load_world(cfg, args.store)
    pre = world.state().digests()
    with open(out / "batches.jsonl", "w") as fh:
        res = experiment.adapt(world, cfg.engine, fh)
    with open(out / "baseline.jsonl", "w") as fh:
        for rec in res["_baseline_metrics"].records:
            fh.write(json.dumps(rec) + "\n")
    post = res["_pluto_metrics"].final_state.digests()
    summary = {k: v for k, v in res.items() if not k.startswith("_")}
    summary["digests_before"] = pre
    summary["digests_after"] = post
    summary["state_unchanged"] = pre == post
    summary["config"] = cfg.to_dict()
    if sweep:
        summary["sweep_m"] = experiment.sweep_m(world, sweep, cfg.engine)
    _write_json(out / "summary.json", summary)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pipeline", "accuracy", "forgetting"])
        w.writeheader()
        w.writerows(_summary_rows(summary))
    print(f"pluto {summary['pluto_accuracy']:.4f}  baseline {summary['baseline_accuracy']:.4f}  "
          f"difference {summary['difference']:+.4f}")
    for r in summary.get("sweep_m", []):
        print(f"top_m={r['top_m']}  accuracy {r['accuracy']:.4f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    if not args.store:
        raise UsageError("serve needs --store")
    server = service.serve(args.store, args.addr, background=False)
    print(f"serving {args.store} on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_list(args) -> int:
    listing = ModuleStore(args.store).list() if args.store else service.client_list(args.addr)
    print(json.dumps(listing, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fetch(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for module_id in args.ids:
        buf = service.client_get_bytes(args.addr, module_id)
        (out / f"{module_id}.plut").write_bytes(buf)
        print(f"fetched {module_id} ({len(buf)} bytes)")
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed or 0
    results = checks.run_all(seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pluto", description="Test-time adaptation over a store of source modules.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, store=False, addr=False, engine=False):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if store:
            sp.add_argument("--store", help="module store directory")
        if addr:
            sp.add_argument("--addr", default=os.environ.get(service.ENV_ADDR, service.DEFAULT_ADDR),
                            help=f"host:port (env {service.ENV_ADDR})")
        if engine:
            sp.add_argument("--shots", type=int, help="unlabeled samples per batch used for updates (U)")
            sp.add_argument("--top-m", type=int, help="number of sources kept for inference")
            sp.add_argument("--sweep-m", help="also run every M in a range, e.g. 1..4")
            sp.add_argument("--rho", type=float, help="SAM neighbourhood radius")
            sp.add_argument("--entropy-factor", type=float, help="entropy filter as a fraction of ln K")
        return sp

    common(sub.add_parser("config", help="print the effective config as JSON"), store=True, engine=True) \
        .set_defaults(func=cmd_config)
    common(sub.add_parser("synth", help="write base and corrupted datasets")).set_defaults(func=cmd_synth)
    common(sub.add_parser("pretrain", help="train backbone, source modules and selector"), store=True) \
        .set_defaults(func=cmd_pretrain)
    common(sub.add_parser("adapt", help="run adaptation and the uniform baseline"), store=True, engine=True) \
        .set_defaults(func=cmd_adapt)
    common(sub.add_parser("serve", help="serve a store over TCP"), store=True, addr=True).set_defaults(func=cmd_serve)
    common(sub.add_parser("list", help="list a local store, or a remote one with --addr"), store=True, addr=True) \
        .set_defaults(func=cmd_list)
    fetch = common(sub.add_parser("fetch", help="download modules from a store service"), addr=True)
    fetch.add_argument("ids", nargs="+")
    fetch.set_defaults(func=cmd_fetch)
    common(sub.add_parser("verify", help="run the oracle checks")).set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pluto: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        logger.debug("command failed", exc_info=True)
        print(f"pluto: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
