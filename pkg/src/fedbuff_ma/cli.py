"""Command-line entry point: ``fedbuff-ma run|sweep|diagnose|report|serve``.

The CLI only parses files and flags into request models. Work is done by
the service handlers, in process by default or on a running server when
``--server URL`` is given.

Environment overrides (flags win over environment, environment over the
config file): ``FEDBUFF_MA_SEED`` and ``FEDBUFF_MA_OUT``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Any, Sequence

from pydantic import BaseModel, ValidationError

from .config import ExperimentSpec, SimConfig
from .errors import FedBuffMAError
from .schemas import DiagnoseRequest, ReportRequest, RunRequest, SweepRequest

ENV_SEED = "FEDBUFF_MA_SEED"
ENV_OUT = "FEDBUFF_MA_OUT"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class ConfigError(Exception):
    """A config file that cannot be read, parsed or validated."""


def _key_line(text: str, loc: Sequence[Any]) -> int:
    """Best-effort 1-based line of the innermost key in ``loc``."""
    for key in reversed([k for k in loc if isinstance(k, str)]):
        m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
        if m:
            return text.count("\n", 0, m.start()) + 1
    return 1


def load_json(path: str) -> tuple[dict, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}:1: cannot read config: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    return doc, text


def validate(model: type[BaseModel], doc: dict, text: str, path: str) -> BaseModel:
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(k) for k in err["loc"]) or "<root>"
            lines.append(f"{path}:{_key_line(text, err['loc'])}: {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from exc


def _apply_env(doc: dict, seed_path: tuple[str, ...], args: argparse.Namespace) -> None:
    seed = args.seed if args.seed is not None else os.environ.get(ENV_SEED)
    if seed is None:
        return
    try:
        value = int(seed)
    except ValueError as exc:
        raise ConfigError(f"<seed>:1: seed must be an integer, got {seed!r}") from exc
    node = doc
    for key in seed_path:
        node = node.setdefault(key, {})
    node["seed"] = value


def _out_dir(args: argparse.Namespace, default: str | None = None) -> str | None:
    return args.out or os.environ.get(ENV_OUT) or default


def _call(args: argparse.Namespace, route: str, request: BaseModel) -> dict:
    if args.server:
        import httpx

        resp = httpx.post(args.server.rstrip("/") + route, content=request.model_dump_json(), headers={"content-type": "application/json"}, timeout=None)
        if resp.status_code != 200:
            raise FedBuffMAError(f"server returned {resp.status_code}: {resp.text}")
        return resp.json()
    from . import service

    handler = {"/run": service.handle_run, "/sweep": service.handle_sweep, "/diagnose": service.handle_diagnose, "/report": service.handle_report}[route]
    return handler(request).model_dump(mode="json")


def cmd_run(args: argparse.Namespace) -> int:
    doc, text = load_json(args.config)
    _apply_env(doc, (), args)
    config = validate(SimConfig, doc, text, args.config)
    out = _out_dir(args, "run-out")
    resp = _call(args, "/run", RunRequest(config=config, out_dir=out, write_matrices=args.write_matrices))
    s = resp["summary"]
    print(f"{s['method']} seed={s['seed']} iterations={s['iterations']} final_loss={s['final_loss']} final_ema_loss={s['final_ema_loss']} best_loss={s['best_loss']} diverged={s['diverged']}")
    print(f"wrote {out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    doc, text = load_json(args.config)
    if args.seed is not None or os.environ.get(ENV_SEED) is not None:
        _apply_env(doc, ("base",), args)
    spec = validate(ExperimentSpec, doc, text, args.config)
    out = _out_dir(args, spec.out_dir or "sweep-out")
    print(f"sweep: {spec.size()} runs -> {out}", flush=True)
    resp = _call(args, "/sweep", SweepRequest(spec=spec, out_dir=out, jobs=args.jobs, force_large_sweep=args.force_large_sweep))
    failed = sum(r["status"] == "failed" for r in resp["rows"])
    resumed = sum(r["resumed"] for r in resp["rows"])
    print(f"{resp['runs']} rows ({resumed} resumed, {failed} failed) -> {resp['csv_path']}")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    fields: dict[str, Any] = {"with_projection": not args.no_projection, "delay_table": args.delay_table, "out_dir": _out_dir(args, "diagnose-out")}
    if args.w:
        fields.update(w_path=args.w, beta=args.beta, cohort=args.cohort, horizon=args.horizon)
    elif args.config:
        doc, text = load_json(args.config)
        _apply_env(doc, (), args)
        fields["config"] = validate(SimConfig, doc, text, args.config)
    else:
        raise ConfigError("<args>:1: diagnose needs --config or --w")
    try:
        request = DiagnoseRequest(**fields)
    except ValidationError as exc:
        raise ConfigError(f"<args>:1: {exc.errors()[0]['msg']}") from exc
    resp = _call(args, "/diagnose", request)
    for k, v in sorted(resp["summary"].items()):
        print(f"{k}: {v}")
    for row in resp.get("delay_table") or []:
        print(f"{row['delay']:>12s}  p={row['p']:<4g} full={100 * row['full_error']:.2f}%  light={100 * row['light_error']:.2f}%")
    print(f"wrote {fields['out_dir']}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    path = args.path or _out_dir(args)
    if not path:
        raise ConfigError("<args>:1: report needs a directory (positional or --out)")
    resp = _call(args, "/report", ReportRequest(path=path))
    print(resp["text"])
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("fedbuff_ma.service:app", host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbuff-ma", description="Buffered async FL simulator with momentum approximation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (run/diagnose) or experiment spec (sweep)")
    common.add_argument("--out", help=f"output directory (env {ENV_OUT})")
    common.add_argument("--seed", type=int, help=f"override the seed (env {ENV_SEED})")
    common.add_argument("--server", help="send the request to a running service at this URL instead of running in process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one config")
    p.add_argument("--write-matrices", action="store_true", help="also dump W and A as CSV triplets")
    p.set_defaults(func=cmd_run, needs_config=True)

    p = sub.add_parser("sweep", parents=[common], help="run a grid of configs")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--force-large-sweep", action="store_true", help="allow more than 100000 runs")
    p.set_defaults(func=cmd_sweep, needs_config=True)

    p = sub.add_parser("diagnose", parents=[common], help="momentum-approximation diagnostics from a W dump or a simulated W")
    p.add_argument("--w", help="W as a CSV triplet file")
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--cohort", type=int, default=1)
    p.add_argument("--horizon", type=int)
    p.add_argument("--no-projection", action="store_true", help="skip the per-iteration SVDs (nullity, 1 - alpha)")
    p.add_argument("--delay-table", action="store_true", help="also tabulate LS error for three delay distributions")
    p.set_defaults(func=cmd_diagnose, needs_config=False)

    p = sub.add_parser("report", parents=[common], help="summarise a run or sweep directory")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=cmd_report, needs_config=False)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve, needs_config=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_config", False) and not args.config:
        print(f"error: {args.command} needs --config", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedBuffMAError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
