"""``visa`` command line: dataset generation, inference and the evaluation experiments."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .pipeline import resolve_workers
from .scenegen import write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3

log = logging.getLogger("visa")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in harness.COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        p.add_argument("--seed", required=True, type=_u64)
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker processes (VISA_WORKERS overrides)")
        p.add_argument("--assert", dest="thresholds", type=Path, help="JSON file of metric bounds")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "generate":
            p.add_argument("--scenes", type=int, help="number of scenes (overrides the config)")
            p.add_argument("--format", choices=("jsonl", "summary"), default="jsonl",
                           help="write the dataset, or only its summary")
    return parser


def _load_json(path: Path, what: str) -> dict:
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise harness.ConfigError(f"cannot read {what} {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise harness.ConfigError(f"{what} must be a JSON object")
    return payload


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.ExperimentConfig.from_dict(args.command, _load_json(args.config, "config"))
        thresholds = _load_json(args.thresholds, "thresholds") if args.thresholds else None
        if args.command == "generate" and args.scenes is not None and args.scenes < 1:
            raise harness.ConfigError("--scenes must be positive")
    except harness.ConfigError as exc:
        print(f"visa: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    workers = resolve_workers(args.workers)
    log.info("%s with %d worker(s)", args.command, workers)
    try:
        if args.command == "generate":
            body, tables, scenes = harness.cmd_generate(cfg, args.seed, args.scenes)
            args.out.mkdir(parents=True, exist_ok=True)
            if args.format == "jsonl":
                write_jsonl(scenes, args.out / "dataset.jsonl")
            (args.out / "summary.json").write_text(harness.dumps(body["result"]["summary"]))
        else:
            body, tables, extra = harness.RUNNERS[args.command](cfg, args.seed, workers)
            if args.command == "infer":
                _write_inference(args.out, extra)
        report = harness.build_report(args.command, cfg, args.seed, body)
    except harness.ConfigError as exc:
        print(f"visa: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure of the run maps to one exit code
        log.debug("run failed", exc_info=True)
        print(f"visa: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    code = EXIT_OK
    if thresholds is not None:
        report["assertions"] = harness.check_thresholds(report, thresholds)
        for check in report["assertions"]:
            if not check["passed"]:
                print(f"visa: threshold failed: {check['metric']} = {check['value']}", file=sys.stderr)
                code = EXIT_THRESHOLD
    harness.write_outputs(args.out, report, tables)
    return code


def _write_inference(out: Path, res) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w") as fh:
        for r in res.results:
            fh.write(json.dumps(harness._plain(r.to_dict()), separators=(",", ":")) + "\n")
    (out / "aggregate_prior.json").write_text(harness.dumps(res.aggregate_prior.to_dict()))
    if res.view_prior is not None:
        (out / "view_prior.json").write_text(harness.dumps(res.view_prior.to_dict()))


if __name__ == "__main__":
    sys.exit(main())
