"""Command line entry point: `ledgerfl run [flags]`."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .harness import ConfigError, ScenarioConfig, emit_results, run_scenario

log = logging.getLogger("ledgerfl.cli")

# flag dest -> config field
FLAG_FIELDS = {
    "rounds": "rounds", "clients": "n_clients", "pmr": "pmr", "pdr": "pdr", "alpha": "alpha",
    "non_iid": "non_iid_rate", "attack": "attack_mode", "poly_degree": "poly_degree",
    "seed": "seed", "dropout": "dropout_prob",
}
_LIST_FIELDS = {"f_s_range": float, "poisoned_rounds": int}


def _field_types() -> dict[str, type]:
    defaults = ScenarioConfig.__dataclass_fields__
    return {f.name: type(defaults[f.name].default) for f in fields(ScenarioConfig)}


def parse_config_text(text: str) -> dict:
    """Plain `key = value` lines; `#` starts a comment. Lists are comma separated."""
    types = _field_types()
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        try:
            if key in _LIST_FIELDS:
                out[key] = [_LIST_FIELDS[key](v) for v in value.split(",") if v.strip()]
            elif types[key] is bool:
                out[key] = value.lower() in ("1", "true", "yes")
            else:
                out[key] = types[key](value)
        except ValueError:
            raise ConfigError(f"line {n}: bad value for {key!r}: {value!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ledgerfl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario and emit per-round metrics")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--rounds", type=int)
    run.add_argument("--clients", type=int)
    run.add_argument("--pmr", type=float)
    run.add_argument("--pdr", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--non-iid", type=float)
    run.add_argument("--attack")
    run.add_argument("--poly-degree", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--dropout", type=float)
    run.add_argument("--out", help="metrics file (stdout if omitted)")
    run.add_argument("--format", choices=["csv", "json"], default="csv")
    run.add_argument("--ledger", help="also write the ledger as JSON lines here")
    run.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    for dest, name in FLAG_FIELDS.items():
        flag = getattr(args, dest)
        if flag is None:
            continue
        if name in values and values[name] != flag:
            log.warning("flag --%s=%s overrides config %s=%s", dest.replace("_", "-"), flag,
                        name, values[name])
        values[name] = flag
    try:
        return ScenarioConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _fail(kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        return _fail("config", exc)
    try:
        result = run_scenario(cfg)
    except (ValueError, RuntimeError, KeyError) as exc:
        return _fail("protocol", exc)
    text = emit_results(result.metrics, args.out, args.format)
    if args.out is None:
        sys.stdout.write(text)
    if args.ledger:
        result.ledger.export_jsonl(args.ledger)
    return 0


if __name__ == "__main__":
    sys.exit(main())
