"""Command-line entry point: ``rpo ingest | build-sft | rollout | infer | eval | compare``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from dotenv import load_dotenv

from data_processing import write_json_atomic, write_text_atomic
from lamp_dataset import DEFAULT_TEST_FRACTION, DatasetError, load_dataset, split_time, split_users
from llm_utils import ProviderError, Role, build_providers
from pipeline import EvalError, compare_modes, format_table, infer, load_instances, run_eval
from profile_retrieval import RetrievalError
from prompt_templates import PromptError
from rl_rollouts import build_rollout_batch, export_rollouts, write_trainer_sidecar
from run_config import ConfigError, RunConfig
from task_config import TaskKind
from trajectory import build_sft_corpus, export_sft

logger = logging.getLogger("rpo")

SPLIT_SIDES = ("train", "test", "all")
HANDLED_ERRORS = (DatasetError, ConfigError, ProviderError, EvalError, PromptError, RetrievalError, OSError)


def _with_suffix(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


def _print_json(document) -> None:
    print(json.dumps(document, ensure_ascii=False, indent=2))


def cmd_ingest(args: argparse.Namespace) -> int:
    try:
        kind = TaskKind.parse(args.task)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    instances = load_dataset(args.path, kind)
    summary = {
        "task": kind.value,
        "instances": len(instances),
        "users": len({inst.user_id for inst in instances}),
        "profile_entries": sum(len(inst.profile) for inst in instances),
    }
    if args.split == "user":
        summary["split"] = split_users(instances, args.n_train_users, args.n_test_users, args.seed).summary()
    elif args.split == "time":
        summary["split"] = split_time(instances, args.test_fraction).summary()
    _print_json(summary)
    return 0


def cmd_build_sft(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require((Role.BASE, Role.TEACHER), purpose="build-sft")
    instances = load_instances(cfg, args.split)
    providers = build_providers(cfg.endpoints)
    report = build_sft_corpus(
        instances, providers, cfg.trajectory_settings(), cfg.filter_policy, max_in_flight=cfg.max_in_flight
    )
    out = args.out or cfg.paths.sft_out or os.path.join(cfg.paths.output_dir, "sft.jsonl")
    written = export_sft(report.accepted, out)
    write_json_atomic(report.to_dict(), _with_suffix(out, ".report.json"))
    print(f"wrote {written} SFT records to {out} (acceptance rate {report.acceptance_rate:.3f})")
    return 0


def cmd_rollout(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require((Role.BASE, Role.REFLECTION, Role.REFERENCE), purpose="rollout")
    if args.epoch_or_step < 1:
        raise ConfigError(f"--epoch-or-step starts at 1, got {args.epoch_or_step}")
    instances = load_instances(cfg, args.split)
    providers = build_providers(cfg.endpoints)
    settings = cfg.rollout_settings(total_steps=args.total_steps)
    logger.info(
        "curriculum: unit=%s e_step=%d k=%d..%d",
        settings.curriculum.unit.value,
        settings.curriculum.e_step,
        settings.curriculum.k_min,
        settings.curriculum.k_max,
    )
    records, failures = build_rollout_batch(
        instances, args.epoch_or_step, settings, providers, cfg.retrieval_backend()
    )
    written = export_rollouts(records, args.out)
    write_trainer_sidecar(settings, _with_suffix(args.out, ".trainer.json"))
    print(f"wrote {written} rollout records to {args.out}; {len(failures)} instance(s) failed")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config)
    matches = [inst for inst in load_instances(cfg, "all") if inst.instance_id == args.instance_id]
    if not matches:
        raise EvalError(f"instance {args.instance_id!r} not found in {cfg.paths.dataset}")
    result = infer(matches[0], cfg, build_providers(cfg.endpoints))
    _print_json(result.to_dict())
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config)
    instances = load_instances(cfg, args.split)
    report = run_eval(instances, cfg, build_providers(cfg.endpoints))
    table = format_table(report.summary_frame())
    write_json_atomic(report.to_dict(), args.out)
    write_text_atomic(table + "\n", _with_suffix(args.out, ".txt"))
    print(table)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfgs = [RunConfig.load(path) for path in args.configs]
    instances = load_instances(cfgs[0], args.split)
    frame = compare_modes(instances, cfgs)
    table = format_table(frame)
    if args.out:
        write_json_atomic(json.loads(frame.to_json(orient="records")), args.out)
        write_text_atomic(table + "\n", _with_suffix(args.out, ".txt"))
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpo", description="Reflective personalization pipeline tooling")
    parser.add_argument("--verbose", action="store_true", help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="validate a dataset file and summarize it")
    ingest.add_argument("--path", required=True)
    ingest.add_argument("--task", required=True, help="MovieTagging, LaMP-2, movie_tagging, ...")
    ingest.add_argument("--split", choices=("none", "user", "time"), default="none")
    ingest.add_argument("--n-train-users", type=int, default=100)
    ingest.add_argument("--n-test-users", type=int, default=50)
    ingest.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    ingest.add_argument("--seed", type=int, default=0)
    ingest.set_defaults(func=cmd_ingest)

    build_sft = sub.add_parser("build-sft", help="build the filtered SFT corpus with the teacher model")
    build_sft.add_argument("--config", required=True)
    build_sft.add_argument("--out")
    build_sft.add_argument("--split", choices=SPLIT_SIDES, default="train")
    build_sft.set_defaults(func=cmd_build_sft)

    rollout = sub.add_parser("rollout", help="sample reflection candidates and export rollout records")
    rollout.add_argument("--config", required=True)
    rollout.add_argument("--epoch-or-step", type=int, required=True)
    rollout.add_argument("--out", required=True)
    rollout.add_argument(
        "--total-steps", type=int, default=None, help="size the shot curriculum to finish within this many steps"
    )
    rollout.add_argument("--split", choices=SPLIT_SIDES, default="train")
    rollout.set_defaults(func=cmd_rollout)

    infer_cmd = sub.add_parser("infer", help="run inference for a single instance")
    infer_cmd.add_argument("--config", required=True)
    infer_cmd.add_argument("--instance-id", required=True)
    infer_cmd.set_defaults(func=cmd_infer)

    eval_cmd = sub.add_parser("eval", help="evaluate a config on one side of the split")
    eval_cmd.add_argument("--config", required=True)
    eval_cmd.add_argument("--split", choices=SPLIT_SIDES, default="test")
    eval_cmd.add_argument("--out", default="report.json")
    eval_cmd.set_defaults(func=cmd_eval)

    compare = sub.add_parser("compare", help="evaluate several configs and tabulate the deltas")
    compare.add_argument("--configs", nargs="+", required=True)
    compare.add_argument("--split", choices=SPLIT_SIDES, default="test")
    compare.add_argument("--out")
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
    )
    try:
        return args.func(args)
    except HANDLED_ERRORS as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
