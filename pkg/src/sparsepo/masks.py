"""Token-level weights for rewards and KL terms.

Weights live on response tokens only and are clamped into ``[eps, 1]``.
Padded slots hold 0 and never enter a sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ForwardTrace
from .tensor import Tensor

STRATEGIES = ("all-ones", "random", "binary", "mapo", "learned-common", "learned-independent")
LEARNED = ("learned-common", "learned-independent")
STD_STABILIZER = 1e-12


@dataclass
class MaskValues:
    weights: Tensor
    response_mask: np.ndarray
    strategy: str
    epsilon: float
    pre_clamp: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.weights.data

    def valid(self) -> np.ndarray:
        """Flat array of weights at real response positions."""
        return self.weights.data[self.response_mask]

    def l1(self) -> Tensor:
        return T.sum_(self.weights)


def _finish(raw: Tensor, response_mask: np.ndarray, eps: float, strategy: str, **info) -> MaskValues:
    if not 0 <= eps <= 1:
        raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
    w = T.where(response_mask, T.clamp(raw, eps, 1.0), 0.0)
    return MaskValues(w, response_mask, strategy, eps, raw.data.copy(), info)


def all_ones_mask(response_mask: np.ndarray) -> MaskValues:
    w = Tensor(response_mask.astype(np.float64))
    return MaskValues(w, response_mask, "all-ones", 0.0, w.data.copy())


# ---- MaPO: activation-based -------------------------------------------------
def mapo_standardized(trace: ForwardTrace, sites=None) -> dict[str, Tensor]:
    """Per site, the dimension-mean activation standardized along each sequence."""
    taps = trace.activation_taps
    if not taps:
        raise ValueError("compute_mapo_mask: trace carries no activation taps "
                         "(run the reference forward with capture_taps=True)")
    if sites is None:
        sites = list(taps)
    mask = trace.response_mask
    n = mask.sum(axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("compute_mapo_mask: response length T == 0")
    fmask = mask.astype(np.float64)
    out = {}
    for site in sites:
        if site not in taps:
            raise ValueError(f"compute_mapo_mask: missing activation tap {site!r}")
        a_bar = T.mean(taps[site], axis=-1)
        mu = T.sum_(a_bar * fmask, axis=1, keepdims=True) / n
        centered = (a_bar - mu) * fmask
        # stabilizer inside the root: zero-variance sites map to 0, and the
        # standardized std stays within ~1e-24 / var of 1 even for tiny spreads
        var = T.sum_(centered * centered, axis=1, keepdims=True) / n
        out[site] = centered / T.sqrt(var + STD_STABILIZER ** 2)
    return out


def compute_mapo_mask(trace: ForwardTrace, eps: float = 0.01, sites=None) -> MaskValues:
    """Mean over activation sites of the standardized per-token activation."""
    std = mapo_standardized(trace, sites)
    raw = T.mean(T.stack(list(std.values()), axis=0), axis=0)
    return _finish(raw, trace.response_mask, eps, "mapo", sites=list(std))


# ---- learned masks --------------------------------------------------------
class MaskNetwork:
    """One ReLU unit per model layer, merged by a linear layer and a ReLU.

    ``m_l = relu(H_l @ w_l + b_l)`` and ``m = relu(concat(m_1..m_L) @ w_o)``.
    """

    def __init__(self, n_layers: int, d_model: int, seed: int = 0, init_bias: float = 0.5,
                 init_std: float = 0.02):
        rng = np.random.default_rng(seed)
        self.w = [Tensor(rng.normal(0.0, init_std, size=d_model), requires_grad=True)
                  for _ in range(n_layers)]
        self.b = [Tensor(np.array([init_bias]), requires_grad=True) for _ in range(n_layers)]
        self.w_o = Tensor(np.full(n_layers, 1.0 / n_layers), requires_grad=True)

    @property
    def n_layers(self) -> int:
        return len(self.w)

    def parameters(self) -> list[Tensor]:
        return [*self.w, *self.b, self.w_o]

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {f"w{l}": w.data.copy() for l, w in enumerate(self.w)}
        sd.update({f"b{l}": b.data.copy() for l, b in enumerate(self.b)})
        sd["w_o"] = self.w_o.data.copy()
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        for l in range(self.n_layers):
            self.w[l].data = np.array(sd[f"w{l}"], dtype=np.float64)
            self.b[l].data = np.array(sd[f"b{l}"], dtype=np.float64)
        self.w_o.data = np.array(sd["w_o"], dtype=np.float64)

    def zero_(self) -> "MaskNetwork":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self

    def layer_masks(self, hidden: list) -> list[Tensor]:
        if len(hidden) != self.n_layers:
            raise ValueError(f"mask network has {self.n_layers} layers but got "
                             f"{len(hidden)} hidden-state tensors")
        return [T.relu(H @ w + b) for H, w, b in zip(hidden, self.w, self.b)]

    def merged_preactivation(self, hidden: list) -> Tensor:
        per_layer = self.layer_masks(hidden)
        return T.stack(per_layer, axis=-1) @ self.w_o

    def __call__(self, hidden: list) -> Tensor:
        return T.relu(self.merged_preactivation(hidden))


def learned_mask_forward(net: MaskNetwork, hidden: list, eps: float = 0.01,
                         response_mask: np.ndarray | None = None,
                         strategy: str = "learned-common") -> MaskValues:
    if response_mask is None:
        response_mask = np.ones(hidden[0].shape[:-1], dtype=bool)
    return _finish(net(hidden), response_mask, eps, strategy)


def binary_mask(net: MaskNetwork, hidden: list, eps: float = 0.01,
                response_mask: np.ndarray | None = None) -> MaskValues:
    """1 where the merged pre-activation is positive, eps elsewhere; no gradient."""
    with T.no_grad():
        pre = net.merged_preactivation(hidden).data
    if response_mask is None:
        response_mask = np.ones(pre.shape, dtype=bool)
    raw = Tensor(np.where(pre > 0, 1.0, eps))
    return _finish(raw, response_mask, eps, "binary")


def random_mask(response_mask: np.ndarray, eps: float = 0.01, rng=None) -> MaskValues:
    """iid uniform [0, 1] per token, floored at eps."""
    rng = np.random.default_rng(rng)
    raw = Tensor(rng.uniform(0.0, 1.0, size=response_mask.shape))
    return _finish(raw, response_mask, eps, "random")


def ablation_masks(kind: str, response_mask: np.ndarray, eps: float = 0.01, *, rng=None,
                   net: MaskNetwork | None = None, hidden: list | None = None) -> MaskValues:
    if kind == "random":
        return random_mask(response_mask, eps, rng)
    if kind == "binary":
        if net is None or hidden is None:
            raise ValueError("binary ablation needs a mask network and hidden states")
        return binary_mask(net, hidden, eps, response_mask)
    raise ValueError(f"unknown ablation mask kind {kind!r}")


def sparsity(mask: MaskValues, zero_threshold: float | None = None) -> float:
    """Fraction of response-token weights at or below ``zero_threshold`` (default eps)."""
    thr = mask.epsilon if zero_threshold is None else zero_threshold
    if thr < 0:
        raise ValueError("zero_threshold must be >= 0")
    vals = mask.valid()
    if vals.size == 0:
        raise ValueError("sparsity: empty mask")
    # the floor is applied by clamp, so compare with a tiny tolerance on the threshold
    return float(np.mean(vals <= thr + 1e-12))


def sparsity_rows(mask: MaskValues, zero_threshold: float | None = None) -> np.ndarray:
    thr = mask.epsilon if zero_threshold is None else zero_threshold
    hit = (mask.values <= thr + 1e-12) & mask.response_mask
    return hit.sum(axis=1) / np.maximum(mask.response_mask.sum(axis=1), 1)
