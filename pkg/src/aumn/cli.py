"""``aumn`` command line: synth / train / gradcheck / infer / eval / ablate.

Exit codes: 0 success, 1 validation failure, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config
from .data import generate_synthetic, load_manifest
from .errors import AUMNError, ValidationError
from .evaluation import format_map_table
from .inference import read_proposals, write_proposals
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, finite_difference_check, history_csv, random_instance

log = logging.getLogger("aumn")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config layered over the built-in defaults")
    p.add_argument("--seed", type=int, help="seed for data generation and training")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--stream", choices=("rgb", "flow", "both"), default="rgb")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aumn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic action-unit dataset")
    _add_common(p)

    p = sub.add_parser("train", help="train one model per stream")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")

    p = sub.add_parser("gradcheck", help="finite-difference audit of the analytic gradients")
    _add_common(p)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("infer", help="localize actions in the test split")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="directory holding model_<stream>.aumn")
    p.add_argument("--split", default="test")

    p = sub.add_parser("eval", help="mAP of a proposal file against the manifest's ground truth")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--proposals", type=Path, required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", help="train and score the six loss/self-attention configurations")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    return parser


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    return path


def cmd_synth(args, config: RunConfig) -> None:
    spec = config.synthetic_spec()
    manifest = generate_synthetic(spec, args.out)
    log.info("wrote %d videos to %s", len(manifest.records), args.out)
    print(f"{args.out / 'manifest.json'}: {len(manifest.split('train'))} train, {len(manifest.split('test'))} test videos")


def cmd_train(args, config: RunConfig) -> None:
    manifest = load_manifest(_require(args.data, "dataset"))
    args.out.mkdir(parents=True, exist_ok=True)
    results = pipeline.train_streams(manifest, config, pipeline.stream_names(args.stream))
    for stream, result in results.items():
        save_checkpoint(args.out / f"model_{stream}.aumn", result.params)
        (args.out / f"loss_{stream}.csv").write_text(history_csv(result.history))
        first, last = result.history[0][-1], result.history[-1][-1]
        print(f"{stream}: total loss {first:.4f} -> {last:.4f} over {len(result.history)} steps")


def cmd_gradcheck(args, config: RunConfig) -> int:
    base_seed = config.train.seed
    train_cfg = config.train.config("rgb")
    cfg = TrainConfig(weights=train_cfg.weights, flags=train_cfg.flags)
    worst = 0.0
    failed = 0
    for i in range(args.instances):
        params, batch = random_instance(base_seed + i)
        report = finite_difference_check(params, batch, cfg, h=args.step, tolerance=args.tolerance)
        worst = max(worst, report.max_error)
        failed += not report.passed
        print(f"instance {i:3d}  max relative error {report.max_error:.3e}  {'ok' if report.passed else 'FAIL'}")
    verdict = "PASS" if failed == 0 else "FAIL"
    print(f"{verdict}: worst relative error {worst:.3e} over {args.instances} instances (tolerance {args.tolerance:g})")
    return 0 if failed == 0 else 2


def cmd_infer(args, config: RunConfig) -> None:
    manifest = load_manifest(_require(args.data, "dataset"))
    models = {
        s: load_checkpoint(_require(args.model / f"model_{s}.aumn", "checkpoint"))
        for s in pipeline.stream_names(args.stream)
    }
    records = manifest.split(args.split)
    run = pipeline.run_localization(manifest, records, models, config)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "proposals.tsv"
    with path.open("w") as fh:
        write_proposals(fh, run.proposals, manifest.segment_seconds)
    print(f"{path}: {len(run.proposals)} proposals for {len(records)} videos")


def cmd_eval(args, config: RunConfig) -> None:
    manifest = load_manifest(_require(args.data, "dataset"))
    proposals = read_proposals(_require(args.proposals, "proposal file"), unit=manifest.unit)
    records = manifest.split(args.split)
    table = format_map_table(pipeline.evaluate(manifest, records, proposals))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "map.tsv").write_text(table)
    sys.stdout.write(table)


def cmd_ablate(args, config: RunConfig) -> None:
    manifest = load_manifest(_require(args.data, "dataset"))
    streams = pipeline.stream_names(args.stream)
    rows = []
    for flags in pipeline.ABLATION_ROWS:
        result, _, _ = pipeline.train_and_evaluate(manifest, config, streams, flags)
        row_dir = args.out / "ablation" / flags.label()
        row_dir.mkdir(parents=True, exist_ok=True)
        (row_dir / "map.tsv").write_text(format_map_table(result))
        rows.append((_flag_cells(flags), result))
        log.info("%s: AVG %.4f", flags.label(), result.average)
    table = format_map_table(rows, label_header="Ls\tLd\tLh\tS")
    (args.out / "ablation.tsv").write_text(table)
    sys.stdout.write(table)


def _flag_cells(flags) -> str:
    return "\t".join("x" if f else "-" for f in (flags.sparsity, flags.diversity, flags.homogeneity, flags.self_attention))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            config.set_seed(args.seed)
            config.validate()
        status = COMMANDS[args.command](args, config)
    except ValidationError as exc:
        print(f"aumn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (AUMNError, OSError) as exc:
        print(f"aumn {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
