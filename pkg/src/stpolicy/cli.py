"""``stpolicy`` command line: run the HTTP server or check policy text."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .policy_lang import PolicyError, format_policy, parse_policy


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .http import app_from_config, load_config

    config = load_config(args.config)
    if args.listen:
        config = dataclasses.replace(config, listen=args.listen)
    host, port = config.host_port
    uvicorn.run(app_from_config(config), host=host, port=port, log_level=args.log_level.lower())
    return 0


def _check(args: argparse.Namespace) -> int:
    text = args.policy if args.policy != "-" else sys.stdin.read()
    try:
        ast = parse_policy(text)
    except PolicyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(format_policy(ast))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="stpolicy", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP API")
    serve.add_argument("--config", help="YAML or JSON config file")
    serve.add_argument("--listen", help="host:port, overrides the config file")
    serve.set_defaults(func=_serve)

    check = sub.add_parser("check", help="parse a policy and print its normalised form")
    check.add_argument("policy", help="policy text, or '-' to read stdin")
    check.set_defaults(func=_check)

    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
