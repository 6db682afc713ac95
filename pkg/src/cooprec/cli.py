"""``cooprec`` command line.

Every subcommand writes its artifacts plus ``manifest.json`` under ``--out``.
Exit status: 0 on success, 2 on bad flags or config, 1 on runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from cooprec import __version__
from cooprec.config import ConfigError, RunConfig, apply_overrides, load_config
from cooprec.data import DatasetSplit, build_split, split_users, format_interactions, read_interactions, read_split, write_split
from cooprec.experiments import (
    Workspace,
    evaluate,
    matrix_bundle,
    matrix_csv,
    personalize,
    records_digest,
    run_approaches,
    split_click_records,
)
from cooprec.model import Mode, build_model, train_global
from cooprec.protocol import run_simulation
from cooprec.synthetic import generate
from cooprec.wire import decode_model, encode_model

log = logging.getLogger("cooprec")

COMMANDS = ("ingest", "partition", "train-global", "simulate", "evaluate", "matrix", "gen-synthetic")


class UsageError(Exception):
    pass


def _proportion(text: str) -> float:
    try:
        q = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < q <= 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1]")
    return q


def _sparsity(text: str) -> float:
    try:
        s = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= s < 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1)")
    return s


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=[m.value for m in Mode])
    common.add_argument("--out", help="output directory")
    common.add_argument("--t-device", type=int, dest="t_device")
    common.add_argument("--t-test", type=int, dest="t_test")
    common.add_argument("--sparsity", type=_sparsity, help="final model weight sparsity")
    common.add_argument(
        "--embedding-sparsity",
        type=_sparsity,
        dest="embedding_sparsity",
        help="target share of zeroed entries in the truncated embedding",
    )
    common.add_argument(
        "--candidate-proportion",
        type=_proportion,
        dest="candidate_proportion",
        help="share of items kept by the candidate filter (1 scores every item)",
    )
    common.add_argument("--input", dest="interactions", help="interaction CSV")
    common.add_argument("--split", help="directory written by 'partition'")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cooprec", description="Cloud/device cooperative next-click recommendation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("ingest", parents=[common], help="validate and normalize an interaction CSV")
    sub.add_parser("partition", parents=[common], help="sessionize, filter and split by time")
    sub.add_parser("train-global", parents=[common], help="train the cloud model on the global stage")
    sub.add_parser("simulate", parents=[common], help="run the pull or push cloud/device flow")
    ev = sub.add_parser("evaluate", parents=[common], help="score a trained model on the test stage")
    ev.add_argument("--model", required=True, help="model file written by 'train-global'")
    ev.add_argument("--personalize", action="store_true", help="fine-tune per user before scoring")
    sub.add_parser("matrix", parents=[common], help="compare the four training approaches")
    gen = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic interaction log")
    gen.add_argument("--users", type=int)
    gen.add_argument("--items", type=int)
    return parser


# -- helpers -----------------------------------------------------------------


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Outputs:
    def __init__(self, out: Path, command: str, cfg: RunConfig):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.files: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, data: str | bytes):
        raw = data.encode() if isinstance(data, str) else data
        (self.out / name).write_bytes(raw)
        self.files[name] = _sha(raw)

    def finish(self, extra: dict | None = None):
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.to_dict(),
            "files": dict(sorted(self.files.items())),
            **(extra or {}),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise UsageError("a seed is required (--seed or 'seed' in the config)")
    return cfg.seed


def _records(cfg: RunConfig):
    if cfg.interactions is None:
        raise UsageError("no interaction log given (--input or [data].interactions)")
    return read_interactions(cfg.interactions)


def _split(cfg: RunConfig) -> tuple[DatasetSplit, Workspace | None]:
    """The configured split; from raw records when available (keeps old/new cohorts exact)."""
    if cfg.split is not None:
        split, part = read_split(cfg.split)
        cfg.partition = part
        return split, None
    records = _records(cfg)
    ws = Workspace.build(records, cfg.partition, cfg.train)
    return ws.split, ws


def _workspace(cfg: RunConfig) -> Workspace:
    split, ws = _split(cfg)
    if ws is not None:
        return ws
    cohorts = split_users(split_click_records(split), cfg.partition.new_user_quantile)
    return Workspace.from_split(split, cfg.partition, cfg.train, cohorts)


# -- commands ----------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args, out: Outputs):
    records = _records(cfg)
    out.write("interactions.csv", format_interactions(records))
    counts: dict[str, int] = {}
    for r in records:
        counts[r.behavior.name.lower()] = counts.get(r.behavior.name.lower(), 0) + 1
    out.finish({"records": len(records), "behaviors": dict(sorted(counts.items()))})


def cmd_partition(cfg: RunConfig, args, out: Outputs):
    # the split manifest (config, counts, hashes) doubles as the command manifest
    split = build_split(_records(cfg), cfg.partition)
    write_split(split, out.out, cfg.partition)
    if split.is_empty:
        log.warning("every click was filtered out")


def cmd_train_global(cfg: RunConfig, args, out: Outputs):
    seed = _require_seed(cfg)
    ws = _workspace(cfg)
    model = build_model(cfg.train.model_config(len(ws.vocab)), seed)
    sessions = ws.global_sessions(through_test=False)
    report = train_global(model, sessions, cfg.train.global_epochs, schedule=cfg.train.schedule(), seed=seed)
    for e in report.epochs:
        e.pop("wall_time", None)
    out.write("model.bin", encode_model(model))
    out.write("vocabulary.json", json.dumps([int(i) for i in ws.vocab.ids]) + "\n")
    out.write("training_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    sizes = {"model_bytes": (out.out / "model.bin").stat().st_size, "dense_model_bytes": len(encode_model(model, dense=True))}
    out.finish(sizes)


def cmd_evaluate(cfg: RunConfig, args, out: Outputs):
    ws = _workspace(cfg)
    model = decode_model(Path(args.model).read_bytes())
    if model.config.vocab_size != len(ws.vocab):
        raise RuntimeError(f"model vocabulary ({model.config.vocab_size}) does not match the split ({len(ws.vocab)})")
    model_for = personalize(ws, model, cfg.train) if args.personalize else (lambda user: model)
    ev = evaluate(model_for, ws.split.test, ws.scorer)
    k = cfg.train.k
    metrics = {f"recall@{k}": ev.recall(), f"mrr@{k}": ev.mrr(), "instances": len(ev.all())}
    out.write("metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    out.finish({"metrics": metrics})


def cmd_simulate(cfg: RunConfig, args, out: Outputs):
    seed = _require_seed(cfg)
    split, _ = _split(cfg)
    sim = run_simulation(split, cfg.mode, cfg.partition, cfg.train, seed)
    out.write("report.json", sim.report.to_json())
    out.write("messages.ndjson", sim.log.ndjson())
    out.finish({"report_sha256": sim.report.digest()})


def cmd_matrix(cfg: RunConfig, args, out: Outputs):
    seed = _require_seed(cfg)
    ws = _workspace(cfg)
    records = split_click_records(ws.split) + list(ws.split.transactional)
    evals = run_approaches(ws, cfg.train, seed)
    table = {name: {"recall": ev.recall(), "mrr": ev.mrr(), "n": len(ev.all())} for name, ev in evals.items()}
    out.write("matrix.csv", matrix_csv(table, cfg.train.k))
    out.write("matrix.json", matrix_bundle(table, cfg.partition, cfg.train, seed, records_digest(records)) + "\n")
    out.finish()


def cmd_gen_synthetic(cfg: RunConfig, args, out: Outputs):
    seed = _require_seed(cfg)
    data = generate(cfg.synthetic, seed)
    out.write("interactions.csv", format_interactions(data.records))
    out.finish({"records": len(data.records), "t_device": data.t_device, "t_test": data.t_test})


HANDLERS = {
    "ingest": cmd_ingest,
    "partition": cmd_partition,
    "train-global": cmd_train_global,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        flags = {k: getattr(args, k, None) for k in (
            "seed", "mode", "out", "interactions", "split", "t_device", "t_test",
            "sparsity", "embedding_sparsity", "candidate_proportion", "users", "items",
        )}
        cfg = apply_overrides(cfg, **flags)
        cfg.check_paths()
        if cfg.out is None:
            raise UsageError("an output directory is required (--out or 'out' in the config)")
        if args.command == "evaluate" and not Path(args.model).exists():
            raise UsageError(f"model file does not exist: {args.model}")
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"cooprec: error: {exc}", file=sys.stderr)
        return 2
    try:
        HANDLERS[args.command](cfg, args, Outputs(cfg.out, args.command, cfg))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cooprec: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, never swallowed silently
        log.debug("failure", exc_info=True)
        print(f"cooprec: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
