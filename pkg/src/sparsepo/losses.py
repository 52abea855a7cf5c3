"""Preference-optimization objectives over policy/reference traces.

Every method reduces to ``-log sigmoid(u - delta)`` per pair, averaged over
the batch, where ``u`` is a reward difference and ``delta`` a divergence or
margin term:

=============  ==========================================================
dpo            u = beta * (sum lr_c - sum lr_r),  delta = 0
tdpo1          masked objective with m_u = m_d = 1
tdpo2          u as dpo, delta = alpha * beta * (KL_r - stopgrad(KL_c))
simpo          u = beta * (mean lp_c - mean lp_r), delta = gamma_margin
dpop           u as dpo, delta = lam * max(0, sum lp_ref_c - sum lp_c)
masked         u = beta * (sum m_u lr_c - sum m_u lr_r),
               delta = beta * (sum m_d KL_c - sum m_d KL_r)
=============  ==========================================================

``lr`` is the per-token log-ratio log(pi / pi_ref) and ``KL`` the per-token
KL(pi || pi_ref) over the next-token distribution. Prompt tokens never enter
any sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import masks as M
from . import tensor as T
from .model import ForwardTrace, TransformerLM
from .tensor import Tensor

METHODS = ("dpo", "tdpo1", "tdpo2", "simpo", "dpop", "mapo", "sparse-common",
           "sparse-indep", "mask-random", "mask-binary")
MASK_STRATEGY = {
    "tdpo1": "all-ones",
    "mapo": "mapo",
    "sparse-common": "learned-common",
    "sparse-indep": "learned-independent",
    "mask-random": "random",
    "mask-binary": "binary",
}
NORMALIZATION_TOL = 1e-6


@dataclass
class LossConfig:
    method: str = "sparse-common"
    beta: float = 0.1
    alpha: float = 0.7
    gamma_margin: float = 0.3
    lam: float = 50.0
    epsilon: float = 0.01
    l1_coeff: float = 0.001
    mask_stop_gradient: bool = False
    zero_threshold: float | None = None  # sparsity cutoff; None means epsilon

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.gamma_margin < 0 or self.lam < 0 or self.l1_coeff < 0:
            raise ValueError("gamma_margin, lam and l1_coeff must be >= 0")

    @property
    def mask_strategy(self) -> str | None:
        return MASK_STRATEGY.get(self.method)

    @property
    def uses_reference(self) -> bool:
        return self.method != "simpo"


@dataclass
class LossBreakdown:
    loss: Tensor
    u: np.ndarray
    delta: np.ndarray
    pair_losses: np.ndarray
    logratio_chosen: np.ndarray
    logratio_rejected: np.ndarray
    kl_chosen: np.ndarray
    kl_rejected: np.ndarray
    masked_reward_chosen: np.ndarray
    masked_reward_rejected: np.ndarray
    masked_kl_chosen: np.ndarray
    masked_kl_rejected: np.ndarray
    mask_chosen: np.ndarray
    mask_rejected: np.ndarray
    response_mask_chosen: np.ndarray
    response_mask_rejected: np.ndarray
    sparsity_mu: float = 0.0
    sparsity_md: float = 0.0
    mask_l1: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def margin(self) -> np.ndarray:
        return self.u - self.delta

    def metrics(self) -> dict:
        """Scalar summary for the metrics log."""
        mc, mr = self.response_mask_chosen, self.response_mask_rejected
        return {
            "loss": float(self.loss.item()),
            "objective": float(np.mean(self.pair_losses)),
            "u": float(np.mean(self.u)),
            "delta": float(np.mean(self.delta)),
            "sparsity_mu": float(self.sparsity_mu),
            "sparsity_md": float(self.sparsity_md),
            "mean_token_kl_chosen": float(self.kl_chosen[mc].mean()),
            "mean_token_kl_rejected": float(self.kl_rejected[mr].mean()),
            "mask_l1": float(self.mask_l1),
            "reward_accuracy": float(np.mean(self.margin > 0)),
        }


# ---- per-token quantities -------------------------------------------------
def _check_aligned(policy: ForwardTrace, ref: ForwardTrace, op: str) -> None:
    if policy.response_mask.shape != ref.response_mask.shape or \
            not np.array_equal(policy.response_mask, ref.response_mask):
        raise ValueError(f"{op}: policy and reference responses differ in length "
                         f"({policy.response_mask.shape} vs {ref.response_mask.shape})")
    if not np.array_equal(policy.response_tokens, ref.response_tokens):
        raise ValueError(f"{op}: policy and reference traces cover different tokens")


def token_log_ratio(policy: ForwardTrace, ref: ForwardTrace) -> Tensor:
    """log pi(y_t | .) - log pi_ref(y_t | .) per response token (0 at padding)."""
    _check_aligned(policy, ref, "token_log_ratio")
    return policy.token_log_probs - ref.token_log_probs


def kl_from_log_dists(logp: Tensor, logq: Tensor, check: bool = True) -> Tensor:
    """sum_v p(v) (log p(v) - log q(v)) along the last axis."""
    if check:
        for name, t in (("policy", logp), ("reference", logq)):
            lse = np.log(np.exp(t.data).sum(axis=-1))
            bad = np.abs(lse) > NORMALIZATION_TOL
            if np.any(bad):
                idx = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ValueError(f"token_kl: {name} distribution at {idx} is not normalized "
                                 f"(logsumexp={lse[idx]:.3g})")
    return T.sum_(T.exp(logp) * (logp - logq), axis=-1)


def token_kl_all(policy: ForwardTrace, ref: ForwardTrace) -> Tensor:
    """Per-position next-token KL(pi || pi_ref), shape (B, T), 0 at padding."""
    _check_aligned(policy, ref, "token_kl")
    kl = kl_from_log_dists(policy.vocab_log_dist, ref.vocab_log_dist)
    return T.where(policy.response_mask, kl, 0.0)


def token_kl(policy: ForwardTrace, ref: ForwardTrace, t: int, row: int = 0) -> float:
    """KL(pi || pi_ref) of the next-token distributions behind response token ``t``."""
    if not policy.response_mask[row, t]:
        raise IndexError(f"token_kl: position {t} is outside response row {row}")
    lp = Tensor(policy.vocab_log_dist.data[row, t])
    lq = Tensor(ref.vocab_log_dist.data[row, t])
    return kl_from_log_dists(lp, lq).item()


def masked_seq_kl(policy: ForwardTrace, ref: ForwardTrace, m_d: M.MaskValues) -> Tensor:
    """sum_t m_d[t] * KL_t per row."""
    kl = token_kl_all(policy, ref)
    if m_d.weights.shape != kl.shape:
        raise ValueError(f"masked_seq_kl: mask shape {m_d.weights.shape} vs response {kl.shape}")
    return T.sum_(m_d.weights * kl, axis=-1)


def _sum_lp(trace: ForwardTrace) -> Tensor:
    return T.sum_(trace.token_log_probs, axis=-1)


# ---- scalar objectives over per-token tensors -----------------------------
def masked_objective(lr_c, lr_r, kl_c, kl_r, mu_c, mu_r, md_c, md_r, beta: float):
    """Return ``(pair_losses, u, delta)`` for the masked token-level objective."""
    u = beta * (T.sum_(mu_c * lr_c, axis=-1) - T.sum_(mu_r * lr_r, axis=-1))
    delta = beta * (T.sum_(md_c * kl_c, axis=-1) - T.sum_(md_r * kl_r, axis=-1))
    return -T.log_sigmoid(u - delta), u, delta


def _breakdown(pair_losses, u, delta, extra_loss, lr_c, lr_r, kl_c, kl_r, pc, pr,
               mu=None, md=None, **kw) -> LossBreakdown:
    loss = T.mean(pair_losses)
    if extra_loss is not None:
        loss = loss + extra_loss
    rc, rr = pc.response_mask, pr.response_mask
    ones_c, ones_r = rc.astype(float), rr.astype(float)
    mu_c, mu_r = (ones_c, ones_r) if mu is None else (mu[0].values, mu[1].values)
    md_c, md_r = (ones_c, ones_r) if md is None else (md[0].values, md[1].values)
    lrc, lrr = lr_c.data, lr_r.data
    klc, klr = kl_c.data, kl_r.data
    return LossBreakdown(
        loss=loss, u=np.asarray(u.data, float).copy(), delta=np.broadcast_to(
            np.asarray(delta.data if isinstance(delta, Tensor) else delta, float), u.shape).copy(),
        pair_losses=pair_losses.data.copy(), logratio_chosen=lrc, logratio_rejected=lrr,
        kl_chosen=klc, kl_rejected=klr,
        masked_reward_chosen=mu_c * lrc, masked_reward_rejected=mu_r * lrr,
        masked_kl_chosen=md_c * klc, masked_kl_rejected=md_r * klr,
        mask_chosen=mu_c, mask_rejected=mu_r,
        response_mask_chosen=rc, response_mask_rejected=rr, **kw)


def dpo_from_traces(pc, rc, pr, rr, beta: float) -> LossBreakdown:
    lr_c, lr_r = token_log_ratio(pc, rc), token_log_ratio(pr, rr)
    u = beta * (T.sum_(lr_c, axis=-1) - T.sum_(lr_r, axis=-1))
    with T.no_grad():
        kl_c, kl_r = token_kl_all(pc, rc), token_kl_all(pr, rr)
    return _breakdown(-T.log_sigmoid(u), u, np.zeros(u.shape), None,
                      lr_c, lr_r, kl_c, kl_r, pc, pr)


def tdpo2_from_traces(pc, rc, pr, rr, beta: float, alpha: float) -> LossBreakdown:
    lr_c, lr_r = token_log_ratio(pc, rc), token_log_ratio(pr, rr)
    kl_c, kl_r = token_kl_all(pc, rc), token_kl_all(pr, rr)
    u = beta * (T.sum_(lr_c, axis=-1) - T.sum_(lr_r, axis=-1))
    delta = alpha * beta * (T.sum_(kl_r, axis=-1) - T.stop_gradient(T.sum_(kl_c, axis=-1)))
    return _breakdown(-T.log_sigmoid(u - delta), u, delta, None,
                      lr_c, lr_r, kl_c, kl_r, pc, pr)


def simpo_from_traces(pc, pr, beta: float, gamma_margin: float, rc=None, rr=None) -> LossBreakdown:
    nc, nr = pc.response_mask.sum(axis=1), pr.response_mask.sum(axis=1)
    if np.any(nc == 0) or np.any(nr == 0):
        raise ValueError("simpo: zero-length response")
    u = beta * (_sum_lp(pc) / nc - _sum_lp(pr) / nr)
    delta = np.full(u.shape, float(gamma_margin))
    if rc is not None and rr is not None:
        lr_c, lr_r = token_log_ratio(pc, rc), token_log_ratio(pr, rr)
        with T.no_grad():
            kl_c, kl_r = token_kl_all(pc, rc), token_kl_all(pr, rr)
    else:
        lr_c, lr_r = Tensor(np.zeros(pc.response_mask.shape)), Tensor(np.zeros(pr.response_mask.shape))
        kl_c, kl_r = lr_c, lr_r
    return _breakdown(-T.log_sigmoid(u - delta), u, delta, None, lr_c, lr_r, kl_c, kl_r, pc, pr)


def dpop_from_traces(pc, rc, pr, rr, beta: float, lam: float) -> LossBreakdown:
    lr_c, lr_r = token_log_ratio(pc, rc), token_log_ratio(pr, rr)
    u = beta * (T.sum_(lr_c, axis=-1) - T.sum_(lr_r, axis=-1))
    delta = lam * T.relu(_sum_lp(rc) - _sum_lp(pc))
    with T.no_grad():
        kl_c, kl_r = token_kl_all(pc, rc), token_kl_all(pr, rr)
    return _breakdown(-T.log_sigmoid(u - delta), u, delta, None,
                      lr_c, lr_r, kl_c, kl_r, pc, pr)


def sparsepo_from_traces(pc, rc, pr, rr, mu: tuple, md: tuple, beta: float,
                         l1_coeff: float = 0.0, stop_mask_grad: bool = False,
                         zero_threshold: float | None = None) -> LossBreakdown:
    """Masked objective; ``mu``/``md`` are (chosen, rejected) MaskValues pairs."""
    lr_c, lr_r = token_log_ratio(pc, rc), token_log_ratio(pr, rr)
    kl_c, kl_r = token_kl_all(pc, rc), token_kl_all(pr, rr)
    for m, ref in ((mu[0], lr_c), (mu[1], lr_r), (md[0], kl_c), (md[1], kl_r)):
        if m.weights.shape != ref.shape:
            raise ValueError(f"mask shape {m.weights.shape} vs response shape {ref.shape}")
    w = [m.weights for m in (*mu, *md)]
    if stop_mask_grad:
        w = [T.stop_gradient(x) for x in w]
    pair_losses, u, delta = masked_objective(lr_c, lr_r, kl_c, kl_r, *w, beta)
    l1_total = T.sum_(mu[0].weights) + T.sum_(mu[1].weights) + T.sum_(md[0].weights) \
        + T.sum_(md[1].weights)
    n_pairs = lr_c.shape[0]
    extra = l1_coeff * l1_total / n_pairs if l1_coeff > 0 else None
    sp_mu = M.sparsity(mu[0], zero_threshold)
    sp_md = M.sparsity(md[0], zero_threshold)
    return _breakdown(pair_losses, u, delta, extra, lr_c, lr_r, kl_c, kl_r, pc, pr, mu, md,
                      sparsity_mu=sp_mu, sparsity_md=sp_md,
                      mask_l1=float(l1_total.data) / n_pairs,
                      extra={"sparsity_mu_rejected": M.sparsity(mu[1], zero_threshold),
                             "sparsity_md_rejected": M.sparsity(md[1], zero_threshold)})


# ---- model-level entry points ---------------------------------------------
@dataclass
class PairBatch:
    prompts: list
    chosen: list
    rejected: list

    def __post_init__(self):
        if not self.prompts:
            raise ValueError("empty batch")
        if not len(self.prompts) == len(self.chosen) == len(self.rejected):
            raise ValueError("prompts, chosen and rejected differ in count")
        for i, (c, r) in enumerate(zip(self.chosen, self.rejected)):
            if len(c) < 1 or len(r) < 1:
                raise ValueError(f"pair {i}: responses must have length >= 1")

    @classmethod
    def from_pairs(cls, pairs) -> "PairBatch":
        return cls([list(p.prompt) for p in pairs], [list(p.chosen) for p in pairs],
                   [list(p.rejected) for p in pairs])

    def __len__(self) -> int:
        return len(self.prompts)


def _split(trace: ForwardTrace, n: int) -> tuple[ForwardTrace, ForwardTrace]:
    """Split a 2n-row trace into its first and last n rows (trim padding)."""
    halves = []
    for rows in (slice(0, n), slice(n, 2 * n)):
        mask = trace.response_mask[rows]
        t_max = max(int(mask.sum(axis=1).max()), 1)
        sl = (rows, slice(0, t_max))
        halves.append(ForwardTrace(
            tokens=trace.tokens[rows], logits=trace.logits[rows], log_dist=trace.log_dist[rows],
            positions=trace.positions[sl], response_mask=mask[:, :t_max],
            response_tokens=trace.response_tokens[sl],
            token_log_probs=trace.token_log_probs[sl],
            vocab_log_dist=trace.vocab_log_dist[sl],
            hidden_states=[h[sl] for h in trace.hidden_states],
            activation_taps={k: v[sl] for k, v in trace.activation_taps.items()}))
    return halves[0], halves[1]


def pair_traces(model: TransformerLM, batch: PairBatch, capture_taps: bool = False,
                grad: bool = True):
    """Forward chosen and rejected sequences in one pass; returns (chosen, rejected)."""
    seqs = [p + c for p, c in zip(batch.prompts, batch.chosen)] + \
           [p + r for p, r in zip(batch.prompts, batch.rejected)]
    plens = np.array([len(p) for p in batch.prompts] * 2)
    if grad:
        tr = model.forward(seqs, plens, capture_taps)
    else:
        with T.no_grad():
            tr = model.forward(seqs, plens, capture_taps)
    return _split(tr, len(batch))


def build_masks(strategy: str, ref_c: ForwardTrace, ref_r: ForwardTrace, eps: float,
                mask_nets=None, rng=None):
    """Return (m_u pair, m_d pair) for a strategy, each as (chosen, rejected)."""
    if strategy == "all-ones":
        ones = (M.all_ones_mask(ref_c.response_mask), M.all_ones_mask(ref_r.response_mask))
        return ones, ones
    if strategy == "mapo":
        m = (M.compute_mapo_mask(ref_c, eps), M.compute_mapo_mask(ref_r, eps))
        return m, m
    if strategy == "random":
        rng = np.random.default_rng(rng)
        m = (M.random_mask(ref_c.response_mask, eps, rng), M.random_mask(ref_r.response_mask, eps, rng))
        return m, m
    if mask_nets is None:
        raise ValueError(f"mask strategy {strategy!r} needs mask network parameters")
    if strategy == "binary":
        net = mask_nets[0]
        m = (M.binary_mask(net, ref_c.hidden_states, eps, ref_c.response_mask),
             M.binary_mask(net, ref_r.hidden_states, eps, ref_r.response_mask))
        return m, m
    if strategy == "learned-common":
        net = mask_nets[0]
        m = (M.learned_mask_forward(net, ref_c.hidden_states, eps, ref_c.response_mask, strategy),
             M.learned_mask_forward(net, ref_r.hidden_states, eps, ref_r.response_mask, strategy))
        return m, m
    if strategy == "learned-independent":
        if len(mask_nets) != 2:
            raise ValueError("learned-independent masks need two mask networks")
        nu, nd = mask_nets
        mu = (M.learned_mask_forward(nu, ref_c.hidden_states, eps, ref_c.response_mask, strategy),
              M.learned_mask_forward(nu, ref_r.hidden_states, eps, ref_r.response_mask, strategy))
        md = (M.learned_mask_forward(nd, ref_c.hidden_states, eps, ref_c.response_mask, strategy),
              M.learned_mask_forward(nd, ref_r.hidden_states, eps, ref_r.response_mask, strategy))
        return mu, md
    raise ValueError(f"unknown mask strategy {strategy!r}")


def compute_loss(batch: PairBatch, policy: TransformerLM, reference: TransformerLM | None,
                 config: LossConfig, mask_nets=None, rng=None) -> LossBreakdown:
    """Forward both models on a batch and evaluate ``config.method``."""
    pc, pr = pair_traces(policy, batch)
    method = config.method
    if method == "simpo":
        rc = rr = None
        if reference is not None:
            rc, rr = pair_traces(reference, batch, grad=False)
        return simpo_from_traces(pc, pr, config.beta, config.gamma_margin, rc, rr)
    if reference is None:
        raise ValueError(f"method {method!r} needs a reference model")
    strategy = config.mask_strategy
    rc, rr = pair_traces(reference, batch, capture_taps=(strategy == "mapo"), grad=False)
    if method == "dpo":
        return dpo_from_traces(pc, rc, pr, rr, config.beta)
    if method == "tdpo2":
        return tdpo2_from_traces(pc, rc, pr, rr, config.beta, config.alpha)
    if method == "dpop":
        return dpop_from_traces(pc, rc, pr, rr, config.beta, config.lam)
    mu, md = build_masks(strategy, rc, rr, config.epsilon, mask_nets, rng)
    l1 = config.l1_coeff if strategy in M.LEARNED else 0.0
    return sparsepo_from_traces(pc, rc, pr, rr, mu, md, config.beta, l1, config.mask_stop_gradient,
                                config.zero_threshold)


def sparsepo_loss(batch, policy, reference, config: LossConfig, mask_nets=None, rng=None):
    return compute_loss(batch, policy, reference, config, mask_nets, rng)


def dpo_loss(batch, policy, reference, config: LossConfig):
    pc, pr = pair_traces(policy, batch)
    rc, rr = pair_traces(reference, batch, grad=False)
    return dpo_from_traces(pc, rc, pr, rr, config.beta)


def tdpo_loss(batch, policy, reference, config: LossConfig, version: int = 1):
    if version not in (1, 2):
        raise ValueError(f"TDPO version must be 1 or 2, got {version}")
    pc, pr = pair_traces(policy, batch)
    rc, rr = pair_traces(reference, batch, grad=False)
    if version == 2:
        return tdpo2_from_traces(pc, rc, pr, rr, config.beta, config.alpha)
    mu, md = build_masks("all-ones", rc, rr, config.epsilon)
    return sparsepo_from_traces(pc, rc, pr, rr, mu, md, config.beta)


def simpo_loss(batch, policy, config: LossConfig):
    pc, pr = pair_traces(policy, batch)
    return simpo_from_traces(pc, pr, config.beta, config.gamma_margin)


def dpop_loss(batch, policy, reference, config: LossConfig):
    pc, pr = pair_traces(policy, batch)
    rc, rr = pair_traces(reference, batch, grad=False)
    return dpop_from_traces(pc, rc, pr, rr, config.beta, config.lam)


def preference_margins(policy: TransformerLM, reference: TransformerLM | None, batch: PairBatch,
                       method: str = "dpo", beta: float = 1.0, gamma_margin: float = 0.0) -> np.ndarray:
    """Per-pair preference margin used for accuracy; positive means chosen wins."""
    with T.no_grad():
        pc, pr = pair_traces(policy, batch, grad=False)
        if method == "simpo":
            nc, nr = pc.response_mask.sum(1), pr.response_mask.sum(1)
            return beta * (_sum_lp(pc).data / nc - _sum_lp(pr).data / nr) - gamma_margin
        if reference is None:
            raise ValueError(f"method {method!r} needs a reference model")
        rc, rr = pair_traces(reference, batch, grad=False)
        lr_c = token_log_ratio(pc, rc).data.sum(axis=1)
        lr_r = token_log_ratio(pr, rr).data.sum(axis=1)
        return beta * (lr_c - lr_r)
