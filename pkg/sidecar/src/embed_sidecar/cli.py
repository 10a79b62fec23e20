"""Entry point: parse flags, build the app, serve."""

from __future__ import annotations

import argparse
import logging
from typing import Optional, Sequence

from .encoder import DEFAULT_MODEL_NAME


def _addr(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad port in {value!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ris-embed-sidecar",
        description="Serve sentence embeddings over the embedding-provider protocol.",
    )
    parser.add_argument(
        "--model-name", default=DEFAULT_MODEL_NAME, help="sentence encoder to load"
    )
    parser.add_argument(
        "--addr", type=_addr, default=("127.0.0.1", 8384), help="host:port to bind"
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    import uvicorn

    from .app import create_app

    host, port = args.addr
    uvicorn.run(
        create_app(model_name=args.model_name), host=host, port=port, log_level="info"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
