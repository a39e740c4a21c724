"""Adapter server: poll the exchange dir, answer requests for one backend id."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .protocol import Request, write_response
from .stub import StubAdapter


@dataclass(frozen=True)
class AdapterConfig:
    exchange_dir: Path
    model_id: str
    device: str = "cpu"
    poll_interval: float = 0.05


def _pending_requests(config: AdapterConfig):
    requests = config.exchange_dir / "requests"
    responses = config.exchange_dir / "responses"
    if not requests.is_dir():
        return
    for path in sorted(requests.glob("*.json")):
        if (responses / path.name).exists():
            continue
        try:
            request = Request.from_file(path)
        except (json.JSONDecodeError, KeyError, ValueError):
            continue  # engine may still be writing; retry next poll
        if request.backend_id != config.model_id:
            continue
        yield request


def poll_once(config: AdapterConfig, handler) -> int:
    handled = 0
    for request in _pending_requests(config):
        try:
            handler.handle(request)
        except Exception as exc:  # one bad request never kills the server
            write_response(config.exchange_dir, request.job_id, "error", message=str(exc))
        handled += 1
    return handled


def serve(config: AdapterConfig, handler, once: bool = False) -> int:
    """Answer every matching request exactly once; loop until interrupted."""
    total = poll_once(config, handler)
    if once:
        return total
    while True:
        time.sleep(config.poll_interval)
        total += poll_once(config, handler)


def _build_handler(name: str, config: AdapterConfig, args):
    if name == "stub":
        return StubAdapter(config.exchange_dir)
    from . import real

    try:
        if name == "sd":
            return real.StableDiffusionAdapter(config.exchange_dir, device=config.device)
        if name == "if":
            return real.DeepFloydIFAdapter(config.exchange_dir, device=config.device)
        if name == "sam":
            if not args.checkpoint:
                raise real.AdapterError("--checkpoint is required for the sam adapter")
            return real.SamAdapter(config.exchange_dir, checkpoint=args.checkpoint,
                                   device=config.device)
        if name == "clip":
            return real.ClipAdapter(config.exchange_dir, device=config.device)
    except real.AdapterError as exc:
        # fail pending work loudly, then exit nonzero
        for request in _pending_requests(config):
            write_response(config.exchange_dir, request.job_id, "error", message=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(1) from exc
    raise SystemExit(f"unknown adapter {name!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="divergen-adapter")
    parser.add_argument("--exchange-dir", required=True)
    parser.add_argument("--model-id", required=True,
                        help="backend id this adapter serves (must match the engine's)")
    parser.add_argument("--adapter", default="stub",
                        choices=["stub", "sd", "if", "sam", "clip"])
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--poll-interval", type=float, default=0.05)
    parser.add_argument("--checkpoint", help="model checkpoint path (sam)")
    parser.add_argument("--once", action="store_true",
                        help="answer the current backlog and exit")
    args = parser.parse_args(argv)
    config = AdapterConfig(exchange_dir=Path(args.exchange_dir), model_id=args.model_id,
                           device=args.device, poll_interval=args.poll_interval)
    handler = _build_handler(args.adapter, config, args)
    handled = serve(config, handler, once=args.once)
    print(json.dumps({"handled": handled}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
