"""SFT and preference-optimization training loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .config import TrainConfig
from .losses import LossBreakdown, PairBatch, compute_loss
from .masks import LEARNED, MaskNetwork
from .model import TransformerLM
from .optim import AdamW, ParamGroup, clip_grad_norm, lr_multiplier

log = logging.getLogger(__name__)

METRICS_FORMAT = "sparsepo-metrics"
METRICS_FIELDS = ("step", "loss", "u", "delta", "sparsity_mu", "sparsity_md",
                  "mean_token_kl_chosen", "mean_token_kl_rejected")


class TrainingError(RuntimeError):
    pass


class ReferenceMutated(AssertionError):
    pass


def _batches(n: int, size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


class MetricsWriter:
    """Line-delimited JSON: one header line, then one record per interval."""

    def __init__(self, path, header: dict, append: bool = False):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if append and self.path.exists():
            _, self.records = read_metrics(self.path)
        else:
            with open(self.path, "w") as fh:
                fh.write(json.dumps({"format": METRICS_FORMAT, "version": 1, **header},
                                    sort_keys=True) + "\n")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def truncate_after(self, step: int) -> None:
        """Drop records past ``step`` (used when resuming)."""
        self.records = [r for r in self.records if r["step"] < step]
        if self.path is not None:
            header, _ = read_metrics(self.path)
            with open(self.path, "w") as fh:
                fh.write(json.dumps(header, sort_keys=True) + "\n")
                for r in self.records:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != METRICS_FORMAT:
        raise ValueError(f"{path}: not a metrics log")
    return header, [json.loads(ln) for ln in lines[1:]]


# ---- SFT ------------------------------------------------------------------
@dataclass
class SFTResult:
    model: TransformerLM
    log: list


def sft_loss(model: TransformerLM, records: list) -> T.Tensor:
    """Mean next-token negative log-likelihood over response tokens."""
    seqs = [list(r["prompt"]) + list(r["response"]) for r in records]
    plens = [len(r["prompt"]) for r in records]
    tr = model.forward(seqs, plens)
    n = tr.response_mask.sum()
    return -T.sum_(tr.token_log_probs) / float(n)


def run_sft(model: TransformerLM, records: list, cfg: TrainConfig, checkpoint_path=None,
            log_path=None) -> SFTResult:
    """Fine-tune ``model`` in place on ``records`` ({prompt, response} dicts)."""
    if not records:
        raise ValueError("run_sft: empty corpus")
    opt = AdamW([ParamGroup("policy", model.parameters(), cfg.sft_learning_rate, cfg.weight_decay)])
    writer = MetricsWriter(log_path, {"kind": "sft"})
    step = 0
    steps_total = cfg.sft_epochs * math.ceil(len(records) / cfg.batch_size)
    with threadpool_limits(cfg.num_threads):
        for epoch in range(cfg.sft_epochs):
            for bi, idx in enumerate(_batches(len(records), cfg.batch_size, cfg.seed, epoch)):
                opt.zero_grad()
                loss = sft_loss(model, [records[i] for i in idx])
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite SFT loss at step {step} (epoch {epoch}, batch {bi})")
                loss.backward()
                if cfg.max_grad_norm:
                    clip_grad_norm(model.parameters(), cfg.max_grad_norm)
                opt.step(lr_multiplier(step, steps_total, cfg.warmup_frac, cfg.lr_schedule))
                if step % cfg.log_interval == 0:
                    writer.write({"step": step, "epoch": epoch, "loss": loss.item()})
                step += 1
    if checkpoint_path:
        model.save(checkpoint_path)
    return SFTResult(model, writer.records)


# ---- preference optimization ----------------------------------------------
@dataclass
class PORun:
    policy: TransformerLM
    reference: TransformerLM
    mask_nets: list
    optimizer: AdamW
    cfg: TrainConfig
    log: list = field(default_factory=list)
    step: int = 0
    finished: bool = False

    def mask_state(self) -> dict:
        return {f"mask{i}/{k}": v for i, net in enumerate(self.mask_nets)
                for k, v in net.state_dict().items()}


def make_mask_nets(cfg: TrainConfig, n_layers: int, d_model: int) -> list[MaskNetwork]:
    strategy = cfg.loss_config().mask_strategy
    if strategy in ("learned-common", "binary"):
        count = 1
    elif strategy == "learned-independent":
        count = 2
    else:
        return []
    return [MaskNetwork(n_layers, d_model, seed=cfg.seed * 1000 + 17 + i,
                        init_bias=cfg.mask_init_bias, init_std=cfg.mask_init_std)
            for i in range(count)]


def _build_run(policy, reference, nets, cfg: TrainConfig) -> PORun:
    groups = [ParamGroup("policy", policy.parameters(), cfg.learning_rate, cfg.weight_decay)]
    if nets and cfg.loss_config().mask_strategy in LEARNED:
        groups.append(ParamGroup("mask", [p for n in nets for p in n.parameters()],
                                 cfg.mask_learning_rate, cfg.mask_weight_decay))
    return PORun(policy, reference, nets, AdamW(groups), cfg)


def init_po(policy_init, cfg: TrainConfig) -> PORun:
    """Policy and frozen reference start as exact copies of ``policy_init``."""
    if isinstance(policy_init, (str, Path)):
        policy_init = TransformerLM.load(policy_init)
    reference = policy_init.copy().freeze()
    policy = policy_init.copy()
    nets = make_mask_nets(cfg, policy.config.n_layers, policy.config.d_model)
    return _build_run(policy, reference, nets, cfg)


def save_po_checkpoint(run: PORun, path) -> Path:
    arrays = {f"model/{k}": v for k, v in run.policy.state_dict().items()}
    arrays.update({f"reference/{k}": v for k, v in run.reference.state_dict().items()})
    arrays.update(run.mask_state())
    arrays.update({f"optim/{k}": v for k, v in run.optimizer.state_dict().items()})
    meta = {"kind": "po", "model_config": asdict(run.policy.config), "step": run.step,
            "train_config": run.cfg.to_dict(), "n_mask_nets": len(run.mask_nets)}
    return save_arrays(path, meta, arrays)


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_po_checkpoint(path, cfg: TrainConfig | None = None) -> PORun:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "po":
        raise ValueError(f"{path}: not a preference-optimization checkpoint")
    cfg = cfg or TrainConfig(**meta["train_config"])
    policy = TransformerLM.from_arrays(meta, arrays)
    reference = TransformerLM.from_arrays(
        meta, {"model/" + k: v for k, v in _strip(arrays, "reference/").items()}).freeze()
    nets = make_mask_nets(cfg, policy.config.n_layers, policy.config.d_model)
    for i, net in enumerate(nets):
        net.load_state_dict(_strip(arrays, f"mask{i}/"))
    run = _build_run(policy, reference, nets, cfg)
    run.optimizer.load_state_dict(_strip(arrays, "optim/"))
    run.step = int(meta["step"])
    return run


def load_policy(path) -> tuple[TransformerLM, TransformerLM | None, list, dict]:
    """Load any checkpoint; returns (policy, reference or None, mask nets, meta)."""
    meta, arrays = load_arrays(path)
    policy = TransformerLM.from_arrays(meta, arrays)
    reference, nets = None, []
    if meta.get("kind") == "po":
        run = load_po_checkpoint(path)
        reference, nets = run.reference, run.mask_nets
    return policy, reference, nets, meta


def _step_metrics(parts: list[LossBreakdown]) -> dict:
    recs = [p.metrics() for p in parts]
    return {k: float(np.mean([r[k] for r in recs])) for k in recs[0]}


def run_po(policy_init, pairs: list, cfg: TrainConfig, out_dir=None, resume_from=None,
           snapshot_every: int | None = None) -> PORun:
    """Preference optimization of a policy against its frozen initial copy.

    Writes ``metrics.jsonl``, ``final.npz`` and (every ``eval_every`` steps,
    plus step 0 and the end) ``snapshot_stepNNNNNN.npz`` under ``out_dir``.
    With ``resume_from`` the run restarts from a checkpoint written by an
    earlier call and reproduces the uninterrupted log exactly.
    """
    if not pairs:
        raise ValueError("run_po: empty dataset")
    out = Path(out_dir) if out_dir else None
    run = load_po_checkpoint(resume_from, cfg) if resume_from else init_po(policy_init, cfg)
    loss_cfg = cfg.loss_config()
    ref_sum = run.reference.checksum()
    snapshot_every = cfg.eval_every if snapshot_every is None else snapshot_every

    per_step = cfg.batch_size * cfg.grad_accum
    steps_per_epoch = math.ceil(len(pairs) / per_step)
    total = cfg.epochs * steps_per_epoch
    header = {"kind": "po", "method": cfg.method, "beta": cfg.beta, "seed": cfg.seed,
              "n_pairs": len(pairs), "total_steps": total}
    writer = MetricsWriter(out / "metrics.jsonl" if out else None, header,
                           append=bool(resume_from))
    if resume_from:
        writer.truncate_after(run.step)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
        if run.step == 0 and snapshot_every:
            _snapshot(run, out)

    params = list(run.optimizer.parameters())
    with threadpool_limits(cfg.num_threads):
        for epoch in range(cfg.epochs):
            micro = _batches(len(pairs), cfg.batch_size, cfg.seed, epoch)
            for s in range(steps_per_epoch):
                global_step = epoch * steps_per_epoch + s
                if global_step < run.step:
                    continue
                if cfg.stop_after and global_step >= cfg.stop_after:
                    return _finish(run, out, writer, ref_sum, finished=False)
                chunk = micro[s * cfg.grad_accum:(s + 1) * cfg.grad_accum]
                run.optimizer.zero_grad()
                parts = []
                rng = np.random.default_rng([cfg.seed, global_step, 7])
                for mi, idx in enumerate(chunk):
                    batch = PairBatch.from_pairs([pairs[i] for i in idx])
                    bd = compute_loss(batch, run.policy, run.reference, loss_cfg,
                                      run.mask_nets, rng)
                    if not np.isfinite(bd.loss.item()):
                        raise TrainingError(f"non-finite loss at step {global_step} "
                                            f"(epoch {epoch}, micro-batch {mi})")
                    (bd.loss * (1.0 / len(chunk))).backward()
                    parts.append(bd)
                for p in params:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise TrainingError(f"non-finite gradient at step {global_step}")
                grad_norm = clip_grad_norm(params, cfg.max_grad_norm)
                run.optimizer.step(lr_multiplier(global_step, total, cfg.warmup_frac,
                                                 cfg.lr_schedule))
                if global_step % cfg.log_interval == 0:
                    rec = {"step": global_step, "epoch": epoch, **_step_metrics(parts),
                           "grad_norm": grad_norm}
                    writer.write(rec)
                run.step = global_step + 1
                if out and snapshot_every and run.step % snapshot_every == 0:
                    _snapshot(run, out)
                if out and cfg.checkpoint_every and run.step % cfg.checkpoint_every == 0:
                    save_po_checkpoint(run, out / "checkpoint.npz")
    return _finish(run, out, writer, ref_sum, finished=True)


def _snapshot(run: PORun, out: Path) -> None:
    save_po_checkpoint(run, out / f"snapshot_step{run.step:06d}.npz")


def _finish(run: PORun, out, writer: MetricsWriter, ref_sum: str, finished: bool) -> PORun:
    if run.reference.checksum() != ref_sum:
        raise ReferenceMutated("reference model parameters changed during training")
    run.log = list(writer.records)
    run.finished = finished
    if out:
        save_po_checkpoint(run, out / "checkpoint.npz")
        if finished:
            save_po_checkpoint(run, out / "final.npz")
            snap = out / f"snapshot_step{run.step:06d}.npz"
            if not snap.exists():
                _snapshot(run, out)
    return run
