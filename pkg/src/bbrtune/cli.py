"""Command-line front-end: a thin client of the HTTP service.

Every subcommand goes through the service API.  By default the app is
served in-process (no socket); ``--server URL`` points the same client at
a remote ``bbrtune serve`` instance instead.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ServiceClient:
    """HTTP client over either an in-process app or a remote server."""

    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=60.0)
        else:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from starlette.testclient import TestClient

            from .service import create_app

            # in-process transport: drives the ASGI app without a socket
            self._client = TestClient(create_app())

    def get(self, path: str):
        return self._client.get(path)

    def post(self, path: str, payload: dict):
        return self._client.post(path, json=payload)

    def close(self):
        self._client.close()


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _check(resp, context: str) -> dict:
    if resp.status_code >= 500:
        raise CliError(f"{context}: {_detail(resp)}", EXIT_RUNTIME)
    if resp.status_code >= 400:
        raise CliError(f"{context}: {_detail(resp)}", EXIT_CONFIG)
    return resp.json()


def _detail(resp) -> str:
    try:
        return str(resp.json().get("detail", resp.text))
    except Exception:  # noqa: BLE001
        return resp.text


def _wait_for_job(client: ServiceClient, job_id: str, quiet: bool = False) -> dict:
    last_line = ""
    while True:
        status = _check(client.get(f"/jobs/{job_id}"), "job status")
        if status["status"] in ("done", "error"):
            if last_line and not quiet:
                print()
            if status["status"] == "error":
                code = EXIT_CONFIG if status.get("error_kind") == "config" else EXIT_RUNTIME
                raise CliError(status.get("error") or "job failed", code)
            return status["result"]
        progress = status.get("progress") or {}
        if progress.get("total") and not quiet:
            line = (f"\r{status['kind']}: iteration {progress['iteration']}"
                    f"/{progress['total']}")
            if progress.get("mean_reward") is not None:
                line += f" mean_reward={progress['mean_reward']:.4f}"
            if line != last_line:
                print(line, end="", flush=True)
                last_line = line
        time.sleep(0.2)


def cmd_train(client: ServiceClient, args) -> int:
    payload = {
        "scenario_path": args.scenario,
        "out_dir": args.out,
        "seed": args.seed,
        "iters": args.iters,
        "agents": args.agents,
        "transport": args.transport,
    }
    created = _check(client.post("/jobs/train", payload), "train")
    result = _wait_for_job(client, created["job_id"], quiet=args.quiet)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_eval(client: ServiceClient, args) -> int:
    payload = {
        "scenario_path": args.scenario,
        "out_dir": args.out,
        "checkpoint_path": args.checkpoint,
        "baseline": args.baseline,
        "seed": args.seed,
        "accuracy_threshold_ms": args.accuracy_threshold_ms,
    }
    created = _check(client.post("/jobs/eval", payload), "eval")
    result = _wait_for_job(client, created["job_id"], quiet=args.quiet)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_compare(client: ServiceClient, args) -> int:
    payload = {"report_a": args.report_a, "report_b": args.report_b,
               "out_csv": args.out_csv}
    result = _check(client.post("/compare", payload), "compare")
    print(result["text"])
    return EXIT_OK


def cmd_plot(client: ServiceClient, args) -> int:
    payload = {"trace_path": args.trace, "report_path": args.report,
               "out_dir": args.out}
    result = _check(client.post("/plot", payload), "plot")
    for f in result["files"]:
        print(f)
    return EXIT_OK


def cmd_scenario_validate(client: ServiceClient, args) -> int:
    result = _check(client.post("/scenario/validate",
                                {"scenario_path": args.scenario}), "validate")
    if not result["valid"]:
        for err in result["errors"]:
            print(f"invalid: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result["summary"], indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbrtune",
        description="Closed-loop BBR window tuning: train, evaluate, compare.")
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default runs in-process")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a tuning policy on a scenario")
    p.add_argument("--scenario", required=True, help="scenario YAML path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--agents", type=int, default=None,
                   help="number of cooperating RL agents")
    p.add_argument("--transport", choices=("mem", "tcp"), default="mem")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the vanilla baseline")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=("vanilla",), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--accuracy-threshold-ms", type=float, default=5.0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("compare", help="compare two evaluation reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out-csv", default=None)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("plot", help="render SVG figures from a trace/report")
    p.add_argument("--trace", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("scenario", help="scenario utilities")
    scen_sub = p.add_subparsers(dest="scenario_command", required=True)
    v = scen_sub.add_parser("validate", help="validate a scenario file")
    v.add_argument("scenario")
    v.set_defaults(fn=cmd_scenario_validate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8331)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    client = ServiceClient(args.server)
    try:
        return args.fn(client, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    finally:
        client.close()


if __name__ == "__main__":
    sys.exit(main())
