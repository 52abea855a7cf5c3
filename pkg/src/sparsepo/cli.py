"""Command-line entry point: ``sparsepo <subcommand> [--config FILE] [--set k=v ...]``.

Every subcommand prints one JSON line on success. Failures print one JSON
line ``{"error": kind, "message": ...}`` to stderr; usage problems (bad
flags, unknown config keys or values) exit with 2, runtime failures with 1.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis as A
from .config import ConfigError, TrainConfig, help_text, load_config
from .data import generate_dataset, load_pairs, load_sft, make_sft_corpus
from .losses import METHODS
from .model import TransformerLM
from .trainer import load_po_checkpoint, load_policy, run_po, run_sft

SUBCOMMANDS = ("gen-data", "sft", "po", "eval", "frontier", "heatmap", "sparsity-report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsepo", description="Token-level preference optimization with "
                     "learnable sparse masks on a synthetic cue task.",
                     epilog=help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    helps = {
        "gen-data": "write train/eval preference pairs and the SFT corpus",
        "sft": "supervised fine-tuning; writes <out_dir>/sft.npz",
        "po": "preference optimization from the SFT checkpoint",
        "eval": "held-out preference accuracy of a checkpoint",
        "frontier": "reward vs KL points for every snapshot in run_dirs",
        "heatmap": "token-level reward/KL heatmap data for held-out pairs",
        "sparsity-report": "mask sparsity and token KL over training for run_dirs",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name], epilog=help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name == "po":
            p.add_argument("--method", choices=METHODS, help="objective (overrides config)")
    return parser


def _path(cfg: TrainConfig, key: str, default: str) -> Path:
    val = getattr(cfg, key)
    return Path(val) if val else Path(cfg.out_dir) / default


def run_dir_for(cfg: TrainConfig) -> Path:
    return Path(cfg.out_dir) / f"{cfg.method}-beta{cfg.beta:g}-seed{cfg.seed}"


def cmd_gen_data(cfg: TrainConfig) -> dict:
    spec = cfg.vocab_spec()
    common = dict(prompt_len=cfg.prompt_len, resp_len=cfg.resp_len, cue_density=cfg.cue_density)
    train, held, sft = (_path(cfg, "train_data", "train.jsonl"), _path(cfg, "eval_data", "eval.jsonl"),
                        _path(cfg, "sft_data", "sft.jsonl"))
    generate_dataset(spec, cfg.n_pairs, seed=cfg.data_seed, out=train, **common)
    # held-out pairs use a distinct seed stream
    generate_dataset(spec, cfg.n_eval_pairs, seed=cfg.data_seed + 1_000_003, out=held, **common)
    make_sft_corpus(spec, cfg.n_sft, seed=cfg.data_seed, out=sft, **common)
    return {"train": str(train), "eval": str(held), "sft": str(sft)}


def cmd_sft(cfg: TrainConfig) -> dict:
    _, records = load_sft(_path(cfg, "sft_data", "sft.jsonl"))
    model = (TransformerLM.load(cfg.init_checkpoint) if cfg.init_checkpoint
             else TransformerLM(cfg.model_config()))
    out = Path(cfg.out_dir) / "sft.npz"
    res = run_sft(model, records, cfg, checkpoint_path=out,
                  log_path=Path(cfg.out_dir) / "sft_metrics.jsonl")
    return {"checkpoint": str(out), "final_loss": res.log[-1]["loss"] if res.log else None}


def cmd_po(cfg: TrainConfig) -> dict:
    _, pairs = load_pairs(_path(cfg, "train_data", "train.jsonl"))
    out = run_dir_for(cfg)
    init = cfg.init_checkpoint or str(Path(cfg.out_dir) / "sft.npz")
    run = run_po(init, pairs, cfg, out_dir=out, resume_from=cfg.checkpoint or None)
    last = run.log[-1] if run.log else {}
    return {"run_dir": str(out), "step": run.step, "finished": run.finished,
            "loss": last.get("loss")}


def cmd_eval(cfg: TrainConfig) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("eval needs checkpoint=<path>")
    _, pairs = load_pairs(_path(cfg, "eval_data", "eval.jsonl"))
    policy, reference, _, meta = load_policy(cfg.checkpoint)
    trained = TrainConfig(**meta["train_config"]) if "train_config" in meta else cfg
    method = "simpo" if trained.method == "simpo" else "dpo"
    acc = A.preference_accuracy(policy, reference, pairs, method, trained.beta, 0.0)
    return {"checkpoint": cfg.checkpoint, "accuracy": acc, "n_pairs": len(pairs), "margin": method}


def _run_dirs(cfg: TrainConfig) -> list[str]:
    dirs = [d for d in cfg.run_dirs.split(",") if d]
    if not dirs:
        raise ConfigError("run_dirs is empty")
    return dirs


def cmd_frontier(cfg: TrainConfig) -> dict:
    spec, pairs = load_pairs(_path(cfg, "eval_data", "eval.jsonl"))
    prompts = [p.prompt for p in pairs[:cfg.n_frontier_prompts]]
    out = Path(cfg.out_dir) / "frontier.csv"
    pts = A.frontier(_run_dirs(cfg), prompts, spec, out, cfg.sample_max_len, cfg.temperature,
                     cfg.top_p, cfg.seed)
    return {"out": str(out), "points": len(pts)}


def cmd_heatmap(cfg: TrainConfig) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("heatmap needs checkpoint=<path>")
    _, pairs = load_pairs(_path(cfg, "eval_data", "eval.jsonl"))
    run = load_po_checkpoint(cfg.checkpoint)
    strategy = run.cfg.loss_config().mask_strategy or "all-ones"
    out = Path(cfg.out_dir) / "heatmap.jsonl"
    A.export_heatmap(run.policy, run.reference, pairs[:cfg.heatmap_pairs], out, strategy,
                     run.mask_nets, run.cfg.epsilon, run.cfg.beta)
    return {"out": str(out), "pairs": min(cfg.heatmap_pairs, len(pairs)), "strategy": strategy}


def cmd_sparsity_report(cfg: TrainConfig) -> dict:
    out = Path(cfg.out_dir) / "sparsity.csv"
    rows, missing = A.sparsity_report(_run_dirs(cfg), out)
    return {"out": str(out), "rows": len(rows), "missing": missing}


COMMANDS = {"gen-data": cmd_gen_data, "sft": cmd_sft, "po": cmd_po, "eval": cmd_eval,
            "frontier": cmd_frontier, "heatmap": cmd_heatmap, "sparsity-report": cmd_sparsity_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = list(args.set)
        if getattr(args, "method", None):
            overrides.append(f"method={args.method}")
        cfg = load_config(args.config, overrides)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except (ConfigError, OSError) as exc:
        return _fail("config", str(exc), 2)
    try:
        _emit({"command": args.command, **COMMANDS[args.command](cfg)})
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - reported as one line
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
