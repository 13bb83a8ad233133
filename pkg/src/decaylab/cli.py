"""Command-line client for the lab service.

By default commands execute against an in-process instance of the FastAPI
app (no server needed); pass --server to target a running instance instead.
Exit codes: 0 success, 2 config error, 3 run terminated by divergence.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from .service.app import app

    return httpx.Client(transport=httpx.ASGITransport(app=app), base_url="http://decaylab.local", timeout=None)


def _fail_on_error(resp: httpx.Response) -> None:
    if resp.status_code in (400, 422):
        detail = resp.json().get("detail", resp.text)
        click.echo(f"config error: {detail}", err=True)
        sys.exit(EXIT_CONFIG)
    resp.raise_for_status()


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
@click.option("--server", envvar="DECAYLAB_SERVER", default=None, help="base URL of a running service")
@click.pass_context
def main(ctx, server):
    """Weight-decay dynamics laboratory."""
    ctx.obj = server


@main.command()
@click.argument("config", type=click.Path())
@click.option("--out", "out_dir", default=None, help="directory for record.jsonl and snapshots")
@click.pass_obj
def run(server, config, out_dir):
    """Execute one training run from a config document."""
    doc = _read_json(config)
    with _client(server) as client:
        resp = client.post("/runs", json={"config": doc, "out_dir": out_dir})
        _fail_on_error(resp)
        body = resp.json()
    click.echo(json.dumps({"terminal": body["terminal"], "flags": body["flags"]}, indent=2))
    if out_dir:
        click.echo(f"artifacts written to {out_dir}")
    if "diverged" in body["flags"]:
        click.echo(f"run terminated by divergence at step {body['divergence_onset']}", err=True)
        sys.exit(EXIT_DIVERGED)


@main.command()
@click.argument("config", type=click.Path())
@click.option("--grid", required=True, help='JSON grid, e.g. {"lr": [0.01, 0.1], "seed": [0, 1]}')
@click.option("--workers", default=1, show_default=True)
@click.option("--out", "out_csv", default=None, help="path for the sweep CSV")
@click.pass_obj
def sweep(server, config, grid, workers, out_csv):
    """Run a grid of cells over a base config and aggregate one table."""
    doc = _read_json(config)
    try:
        grid_doc = json.loads(grid)
    except json.JSONDecodeError as exc:
        click.echo(f"config error: bad grid JSON: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    with _client(server) as client:
        resp = client.post("/sweeps", json={"config": doc, "grid": grid_doc, "workers": workers})
        _fail_on_error(resp)
        body = resp.json()
    if out_csv:
        Path(out_csv).write_text(body["csv"])
        click.echo(f"sweep table written to {out_csv}")
    else:
        click.echo(body["csv"], nl=False)


@main.command()
@click.argument("run_dir", type=click.Path())
@click.option("--steps", type=int, default=None, help="override fine-tune steps")
@click.option("--lr", type=float, default=None, help="override fine-tune learning rate")
@click.option("--out", "out_csv", default=None, help="path for the trend CSV")
@click.pass_obj
def finetune(server, run_dir, steps, lr, out_csv):
    """Fine-tune every persisted snapshot of a run and report the trend."""
    with _client(server) as client:
        resp = client.post("/finetune", json={"run_dir": run_dir, "steps": steps, "lr": lr})
        _fail_on_error(resp)
        rows = resp.json()["rows"]
    header = ["step", "train_loss", "test_metric", "trace_estimate", "trace_stderr"]
    lines = [",".join(header)]
    lines += [",".join(repr(r[h]) if isinstance(r[h], float) else str(r[h]) for h in header) for r in rows]
    text = "\n".join(lines) + "\n"
    if out_csv:
        Path(out_csv).write_text(text)
        click.echo(f"trend written to {out_csv}")
    else:
        click.echo(text, nl=False)


@main.command(name="sa-lab")
@click.argument("config", type=click.Path())
@click.option("--out", "out_csv", default=None, help="path for the risk-curve CSV")
@click.pass_obj
def sa_lab(server, config, out_csv):
    """Exact and simulated risk curves on a diagonal quadratic problem."""
    doc = _read_json(config)
    with _client(server) as client:
        resp = client.post("/sa-lab", json=doc)
        _fail_on_error(resp)
        body = resp.json()
    if out_csv:
        Path(out_csv).write_text(body["csv"])
        click.echo(f"risk curves written to {out_csv}")
    else:
        click.echo(body["csv"], nl=False)
    click.echo(f"risk bound holds: {body['bound_ok']}", err=True)
    if body.get("equivalence"):
        click.echo(json.dumps(body["equivalence"], indent=2), err=True)


@main.command(name="bf16-check")
@click.pass_obj
def bf16_check(server):
    """Print the reduced-precision conformance table."""
    with _client(server) as client:
        resp = client.get("/precision/check")
        _fail_on_error(resp)
        body = resp.json()
    width = max(len(c["name"]) for c in body["cases"])
    for c in body["cases"]:
        status = "ok" if c["ok"] else "FAIL"
        click.echo(f"{c['name']:<{width}}  got {c['got']:<8} expected {c['expected']:<8} [{status}]")
    click.echo(
        f"bf16 bit patterns round-tripped: {body['bf16_patterns_exact']}/{body['bf16_patterns_total']}"
    )
    if not body["all_ok"]:
        click.echo("conformance FAILED", err=True)
        sys.exit(1)


@main.command()
@click.argument("source", type=click.Path())
@click.option("--kind", required=True, type=click.Choice(
    ["loss_curve", "norm_curve", "elr_curve", "trace_trend", "risk_curve", "ushape"]))
@click.option("--out", "out_path", required=True, help="output SVG path")
@click.pass_obj
def plot(server, source, kind, out_path):
    """Render a chart from a record.jsonl, sweep CSV, or risk-curve CSV."""
    with _client(server) as client:
        resp = client.post("/plots", json={"kind": kind, "source": str(Path(source).resolve()), "out_path": None})
        _fail_on_error(resp)
        Path(out_path).write_bytes(resp.content)
    click.echo(f"plot written to {out_path}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    uvicorn.run("decaylab.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
