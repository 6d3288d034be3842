"""Command-line client for the experiment service.

The CLI does no computation itself: it assembles the experiment
configuration, sends it to the service over HTTP (an in-process ASGI
transport by default, or a remote server via ``--server``), and writes
the returned artifacts under ``--out``.

Exit codes: 0 success, 2 configuration validation failure, 3 numerical
failure (a diagnostic file is written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

USAGE_COMMANDS = ("rftca-bench", "fed-run", "comm-table", "validate")


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="rftca", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("rftca-bench", "accuracy/wall-time comparison of the kernel solver vs its "
                        "random-features reduction"),
        ("fed-run", "federated training under the configured network model"),
        ("comm-table", "per-round communication volumes vs analytic baselines"),
        ("validate", "resolve defaults and print instance diagnostics without training"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed (kernel seed and evaluation seeds)")
        p.add_argument("--out", type=Path, default=Path("rftca-out"),
                       help="directory for output artifacts")
        p.add_argument("--server", default=None,
                       help="base URL of a running service; default runs in-process")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="PATH=VALUE",
                       help="override a config field, e.g. kernel.n_features=256")
        if name == "fed-run":
            p.add_argument("--with-baseline", action="store_true",
                           help="also run the source-only oracle per seed")
    return parser.parse_args(argv)


def _apply_override(config: dict, spec: str) -> None:
    if "=" not in spec:
        raise ValueError(f"override {spec!r} is not of the form PATH=VALUE")
    path, raw = spec.split("=", 1)
    keys = path.split(".")
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"override path {path!r} crosses a non-object field")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[keys[-1]] = value


def _build_config(args) -> dict:
    config: dict = {}
    if args.config is not None:
        config = json.loads(Path(args.config).read_text())
        if not isinstance(config, dict):
            raise ValueError("config file must hold a JSON object")
    for spec in args.overrides:
        _apply_override(config, spec)
    if args.seed is not None:
        config.setdefault("kernel", {})["seed"] = args.seed
        config.setdefault("evaluation", {})["seeds"] = [args.seed]
    return config


def _make_client(args) -> httpx.Client:
    if args.server:
        return httpx.Client(base_url=args.server, timeout=None)
    from .service.app import app  # deferred: only the in-process path needs it

    return httpx.Client(transport=httpx.ASGITransport(app=app),
                        base_url="http://rftca.local", timeout=None)


def _fail_validation(body: dict) -> int:
    print("configuration invalid:", file=sys.stderr)
    for problem in body.get("errors", []) or body.get("detail", []):
        print(f"  - {problem}", file=sys.stderr)
    return 2


def _fail_numerical(body: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    diag = out / "diagnostic.json"
    diag.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    print(f"numerical failure: {body.get('kind')}: {body.get('detail')}", file=sys.stderr)
    print(f"diagnostic written to {diag}", file=sys.stderr)
    return 3


def main(argv=None) -> int:
    args = _parse_args(argv if argv is not None else sys.argv[1:])
    try:
        config = _build_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration invalid: {exc}", file=sys.stderr)
        return 2

    endpoint = "/" + args.command
    params = {}
    if args.command == "fed-run" and getattr(args, "with_baseline", False):
        params["with_baseline"] = "true"

    with _make_client(args) as client:
        response = client.post(endpoint, json=config, params=params)
    if response.status_code == 422:
        return _fail_validation(response.json())
    if response.status_code == 500:
        body = response.json()
        if body.get("error") == "numerical-failure":
            return _fail_numerical(body, args.out)
        print(f"server error: {body}", file=sys.stderr)
        return 3
    response.raise_for_status()
    body = response.json()

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "rftca-bench":
        (out / "bench.csv").write_text(body["csv"])
        print(f"wrote {out / 'bench.csv'} ({len(body['rows'])} rows)")
    elif args.command == "fed-run":
        summary = {"mean_accuracy": body["mean_accuracy"], "runs": []}
        for run in body["runs"]:
            seed = run["seed"]
            (out / f"metrics-seed{seed}.jsonl").write_text(run["metrics_jsonl"])
            (out / f"ledger-seed{seed}.csv").write_text(run["ledger_csv"])
            summary["runs"].append({
                "seed": seed,
                "final_accuracy": run["final_accuracy"],
                "initial_mmd": run["initial_mmd"],
                "final_mmd": run["final_mmd"],
                "source_only_accuracy": run["source_only_accuracy"],
            })
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(f"mean target accuracy over {len(body['runs'])} seed(s): "
              f"{body['mean_accuracy']:.4f}")
        print(f"wrote metrics, ledgers and summary under {out}")
    elif args.command == "comm-table":
        (out / "comm_table.csv").write_text(body["csv"])
        print(f"wrote {out / 'comm_table.csv'} ({len(body['rows'])} rows)")
    elif args.command == "validate":
        (out / "validate.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        if body["errors"]:
            print("configuration invalid:", file=sys.stderr)
            for problem in body["errors"]:
                print(f"  - {problem}", file=sys.stderr)
            return 2
        print("resolved configuration:")
        for key, value in body["resolved"].items():
            print(f"  {key}: {value}")
        if body.get("eigen_gap") is not None:
            print(f"  relative eigen-gap estimate: {body['eigen_gap']:.6g}")
        reg = body.get("regularization")
        if reg:
            print(f"  regularization sandwich: {reg['lower']:.6g} <= {reg['value']:.6g} "
                  f"<= {reg['upper']:.6g}")
        for warning in body["warnings"]:
            print(f"warning: {warning}")
        for hint in body["hints"]:
            print(f"hint: {hint}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
