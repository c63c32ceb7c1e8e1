"""Command line client.

Every subcommand goes through the HTTP API: in-process by default, or
against a running server with ``--server URL``. Experiment subcommands
(simulate, sweep, ...) run only the experiments of that kind from the
scenario; ``run`` runs all of them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import tomli

from .errors import ScenarioError

KINDS = ("simulate", "sweep", "basin", "certify", "convergence", "landscape", "detect-jumps")


class Client:
    """Thin wrapper over an httpx-style client with JSON error handling."""

    def __init__(self, server=None, timeout=3600.0):
        if server:
            import httpx

            self._http = httpx.Client(base_url=server, timeout=timeout)
        else:
            import warnings

            with warnings.catch_warnings():
                # starlette deprecates its httpx-based test client; it is only the transport here
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import app

            self._http = TestClient(app)

    def get(self, path):
        return self._check(self._http.get(path))

    def post(self, path, body):
        return self._check(self._http.post(path, json=body))

    @staticmethod
    def _check(resp):
        if resp.status_code >= 400:
            try:
                body = resp.json()
            except ValueError:
                body = {"message": resp.text}
            if isinstance(body, dict) and "field" in body:
                raise ScenarioError(body.get("field") or "<request>", body.get("message", ""))
            raise RuntimeError(f"HTTP {resp.status_code}: {json.dumps(body)[:500]}")
        return resp.json()


def _scenario_path(arg) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    from .scenario import shipped_scenarios

    shipped = shipped_scenarios()
    if arg in shipped:
        return shipped[arg]
    raise ScenarioError("<file>", f"no scenario file {arg!r} (shipped: {', '.join(shipped)})")


def _read_scenario(arg) -> dict:
    path = _scenario_path(arg)
    try:
        return tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError("<file>", f"TOML syntax: {exc}") from None


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _write(out_dir, files, timing):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rel, text in files.items():
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    with open(out / "timing.json", "w") as fh:
        fh.write(json.dumps(timing, indent=2, sort_keys=True) + "\n")


def cmd_run(args, client, only=None) -> int:
    scenario = _read_scenario(args.scenario)
    body = {"scenario": scenario, "workers": args.workers, "seed": args.seed, "only": only}
    res = client.post("/scenarios/run", body)
    out = args.out or Path("out") / str(scenario.get("name", "scenario"))
    _write(out, res["files"], res["timing"])
    for e in res["summary"]["experiments"]:
        line = f"{e['id']:<24} {e['kind']:<13} {e['status']}"
        if e["status"] != "ok":
            line += f"  {e['error']}"
        print(line)
    print(f"wrote {len(res['files'])} files to {out}")
    return res["exit_status"]


def cmd_validate(args, client) -> int:
    rep = client.post("/scenarios/validate", {"scenario": _read_scenario(args.scenario)})
    if rep["valid"]:
        print(f"ok: {len(rep['experiments'])} experiments ({', '.join(rep['experiments'])})")
        return 0
    print(f"invalid: {rep['message']}", file=sys.stderr)
    return 2


def cmd_problems(args, client) -> int:
    for p in client.get("/problems"):
        print(f"{p['name']:<20} defaults={json.dumps(p['defaults'])} trajectories={','.join(p['trajectories'])}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("escapeflow.service:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="escapeflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_args(sp, out=True):
        sp.add_argument("--scenario", required=True, help="scenario file, or the name of a shipped scenario")
        if out:
            sp.add_argument("--out", type=Path, help="output directory (default out/<scenario name>)")
            sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
            sp.add_argument("--seed", type=_seed, help="override the scenario seed")
        sp.add_argument("--server", help="URL of a running service; in-process when omitted")

    scenario_args(sub.add_parser("run", help="run every experiment of a scenario"))
    for kind in KINDS:
        scenario_args(sub.add_parser(kind, help=f"run the {kind} experiments of a scenario"))
    scenario_args(sub.add_parser("validate", help="lint a scenario file"), out=False)
    sp = sub.add_parser("problems", help="list the registered problems")
    sp.add_argument("--server")
    sp = sub.add_parser("serve", help="start the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        client = Client(args.server)
        if args.command == "validate":
            return cmd_validate(args, client)
        if args.command == "problems":
            return cmd_problems(args, client)
        return cmd_run(args, client, None if args.command == "run" else [args.command])
    except ScenarioError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
