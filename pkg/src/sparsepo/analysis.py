"""Evaluation and plot-ready exports: accuracy, frontier, sparsity, heatmaps."""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import mannwhitneyu

from . import losses as L
from . import masks as M
from . import tensor as T
from .data import VocabSpec, ground_truth_reward
from .losses import PairBatch
from .model import TransformerLM
from .trainer import METRICS_FIELDS, load_po_checkpoint, read_metrics

FRONTIER_COLUMNS = ("run_id", "beta", "step", "reward", "kl", "n_prompts", "truncated_frac")
SPARSITY_COLUMNS = ("run_id", "beta", "step", "sparsity_mu", "sparsity_md",
                    "mean_token_kl_chosen", "mean_token_kl_rejected")
HEATMAP_FORMAT = "sparsepo-heatmap"


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


# ---- preference accuracy --------------------------------------------------
def preference_accuracy(policy: TransformerLM, reference: TransformerLM | None, pairs,
                        method: str = "dpo", beta: float = 1.0, gamma_margin: float = 0.0,
                        batch_size: int = 64) -> float:
    """Share of pairs whose preference margin is positive; ties count one half."""
    if not pairs:
        raise ValueError("preference_accuracy: empty dataset")
    margins = np.concatenate([
        L.preference_margins(policy, reference, PairBatch.from_pairs(chunk), method, beta,
                             gamma_margin)
        for chunk in _chunks(list(pairs), batch_size)])
    return float(np.mean((margins > 0) + 0.5 * (margins == 0)))


# ---- frontier -------------------------------------------------------------
@dataclass
class FrontierPoint:
    run_id: str
    beta: float
    step: int
    reward: float
    kl: float
    n_prompts: int
    truncated_frac: float


def response_kl(policy: TransformerLM, reference: TransformerLM, prompts, responses,
                batch_size: int = 64) -> np.ndarray:
    """Sum over response positions of next-token KL(policy || reference)."""
    out = []
    for idx in _chunks(list(range(len(prompts))), batch_size):
        rows = [i for i in idx if responses[i]]
        kl = np.zeros(len(idx))
        if rows:
            seqs = [list(prompts[i]) + list(responses[i]) for i in rows]
            plens = [len(prompts[i]) for i in rows]
            with T.no_grad():
                tp = policy.forward(seqs, plens)
                tr = reference.forward(seqs, plens)
                per_tok = L.token_kl_all(tp, tr).data
            # tiny negative values are rounding in the sum over the vocabulary
            sums = np.maximum(per_tok.sum(axis=1), 0.0)
            for j, i in enumerate(rows):
                kl[idx.index(i)] = sums[j]
        out.append(kl)
    return np.concatenate(out) if out else np.zeros(0)


def _score(resp, spec: VocabSpec) -> float:
    try:
        return ground_truth_reward(resp, spec)
    except ValueError:
        return 0.5  # no scorable tokens: neutral


def eval_frontier(policy: TransformerLM, reference: TransformerLM, prompts, spec: VocabSpec,
                  max_len: int = 16, temperature: float = 1.0, top_p: float = 1.0, seed: int = 0,
                  run_id: str = "", beta: float = float("nan"), step: int = 0) -> FrontierPoint:
    """Sample one completion per prompt; average ground-truth reward and response KL."""
    if not prompts:
        raise ValueError("eval_frontier: no prompts")
    responses, truncated = [], []
    for i, prompt in enumerate(prompts):
        rng = np.random.default_rng([seed, i])
        resp, trunc = policy.sample_batch([prompt], max_len, temperature, top_p, rng,
                                          eos_id=spec.eos)
        responses.append(resp[0])
        truncated.append(trunc[0])
    rewards = np.array([_score(r, spec) for r in responses])
    kls = response_kl(policy, reference, prompts, responses)
    return FrontierPoint(run_id, float(beta), int(step), float(rewards.mean()), float(kls.mean()),
                         len(prompts), float(np.mean(truncated)))


def _snapshots(run_dir: Path) -> list[tuple[int, Path]]:
    snaps = []
    for p in sorted(run_dir.glob("snapshot_step*.npz")):
        m = re.search(r"snapshot_step(\d+)\.npz$", p.name)
        if m:
            snaps.append((int(m.group(1)), p))
    return snaps


def frontier(run_dirs, prompts, spec: VocabSpec, out=None, max_len: int = 16,
             temperature: float = 1.0, top_p: float = 1.0, seed: int = 0) -> list[FrontierPoint]:
    """One frontier point per snapshot of every run directory."""
    points = []
    for rd in map(Path, run_dirs):
        for step, path in _snapshots(rd):
            run = load_po_checkpoint(path)
            points.append(eval_frontier(run.policy, run.reference, prompts, spec, max_len,
                                        temperature, top_p, seed, rd.name, run.cfg.beta, step))
    points.sort(key=lambda p: (p.beta, p.run_id, p.step))
    if out is not None:
        write_table(out, "sparsepo-frontier", FRONTIER_COLUMNS, [asdict(p) for p in points])
    return points


# ---- sparsity report ------------------------------------------------------
def sparsity_report(run_dirs, out=None) -> tuple[list[dict], list[str]]:
    """Per-run time series of mask sparsity and mean token-level KL.

    Returns ``(rows, missing)``; runs without a metrics log, or whose log
    lacks a column, are listed in ``missing`` and skipped.
    """
    rows, missing = [], []
    for rd in map(Path, run_dirs):
        path = rd / "metrics.jsonl"
        if not path.exists():
            missing.append(f"{rd}: no metrics.jsonl")
            continue
        header, recs = read_metrics(path)
        absent = [c for c in METRICS_FIELDS if recs and c not in recs[0]]
        if not recs or absent:
            missing.append(f"{rd}: missing {absent or 'records'}")
            continue
        for r in recs:
            rows.append({"run_id": rd.name, "beta": header.get("beta"), "step": r["step"],
                         **{c: r[c] for c in SPARSITY_COLUMNS[3:]}})
    rows.sort(key=lambda r: (r["beta"], r["run_id"], r["step"]))
    if out is not None:
        write_table(out, "sparsepo-sparsity", SPARSITY_COLUMNS, rows)
    return rows, missing


# ---- delimited tables -----------------------------------------------------
def write_table(path, fmt: str, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# format={fmt} version=1\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in columns})
    path.write_text(buf.getvalue())
    return path


def read_table(path) -> tuple[str, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# format="):
        raise ValueError(f"{path}: missing format line")
    fmt = lines[0].split("format=", 1)[1].split()[0]
    return fmt, list(csv.DictReader(lines[1:]))


# ---- heatmaps -------------------------------------------------------------
def minmax_scale(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Affine map onto [0, 1]; constant rows become all 0.5 and are flagged."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.full_like(v, 0.5), True
    return (v - lo) / (hi - lo), False


def heatmap_records(policy: TransformerLM, reference: TransformerLM, pair, strategy: str = "all-ones",
                    mask_nets=None, epsilon: float = 0.01, beta: float = 1.0, seed: int = 0) -> list[dict]:
    """Token-level rewards and KLs for both responses of one pair, before and after masking."""
    batch = PairBatch.from_pairs([pair])
    with T.no_grad():
        pc, pr = L.pair_traces(policy, batch, grad=False)
        rc, rr = L.pair_traces(reference, batch, capture_taps=(strategy == "mapo"), grad=False)
        mu, md = L.build_masks(strategy, rc, rr, epsilon, mask_nets, seed)
        records = []
        for side, p, r, m_u, m_d in (("chosen", pc, rc, mu[0], md[0]),
                                     ("rejected", pr, rr, mu[1], md[1])):
            n = int(p.response_mask[0].sum())
            reward = beta * L.token_log_ratio(p, r).data[0, :n]
            kl = L.token_kl_all(p, r).data[0, :n]
            rows = {"reward": reward, "kl": kl,
                    "reward_masked": reward * m_u.values[0, :n],
                    "kl_masked": kl * m_d.values[0, :n]}
            rec = {"side": side, "tokens": p.response_tokens[0, :n].tolist(),
                   "strategy": strategy, "beta": beta,
                   "mask_u": m_u.values[0, :n].tolist(), "mask_d": m_d.values[0, :n].tolist(),
                   "scaling": "per-sequence min-max"}
            for name, vals in rows.items():
                scaled, degenerate = minmax_scale(vals)
                rec[name] = vals.tolist()
                rec[f"{name}_scaled"] = scaled.tolist()
                rec[f"{name}_degenerate"] = degenerate
            records.append(rec)
    return records


def export_heatmap(policy, reference, pairs, out, strategy: str = "all-ones", mask_nets=None,
                   epsilon: float = 0.01, beta: float = 1.0) -> Path:
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": HEATMAP_FORMAT, "version": 1, "strategy": strategy}) + "\n")
        for i, pair in enumerate(pairs):
            for rec in heatmap_records(policy, reference, pair, strategy, mask_nets, epsilon, beta, i):
                fh.write(json.dumps({"pair": i, **rec}) + "\n")
    return path


# ---- mask selectivity -----------------------------------------------------
@dataclass
class Selectivity:
    cue_mean: float
    filler_mean: float
    p_value: float
    n_responses: int


def mask_selectivity(reference: TransformerLM, mask_net: M.MaskNetwork, pairs, spec: VocabSpec,
                     epsilon: float = 0.01, batch_size: int = 64) -> Selectivity:
    """Compare m_u on positive-cue vs filler tokens of chosen responses.

    The p-value is a one-sided Mann-Whitney U test of cue > filler.
    """
    cue_vals, fill_vals = [], []
    for chunk in _chunks(list(pairs), batch_size):
        batch = PairBatch.from_pairs(chunk)
        rc, _ = L.pair_traces(reference, batch, grad=False)
        with T.no_grad():
            m = M.learned_mask_forward(mask_net, rc.hidden_states, epsilon, rc.response_mask)
        toks, valid = rc.response_tokens, rc.response_mask
        cue_vals.append(m.values[np.isin(toks, spec.positive_cues) & valid])
        fill_vals.append(m.values[np.isin(toks, spec.filler) & valid])
    cue, fill = np.concatenate(cue_vals), np.concatenate(fill_vals)
    p = float(mannwhitneyu(cue, fill, alternative="greater").pvalue)
    return Selectivity(float(cue.mean()), float(fill.mean()), p, len(pairs))
