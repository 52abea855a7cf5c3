"""Tiny pre-norm decoder-only transformer used as both policy and reference."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .tensor import Tensor

TAP_SITES = ("attn", "ffn", "resid")
_NEG = -1e30


@dataclass
class ModelConfig:
    vocab_size: int = 64
    context_len: int = 64
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: float = 4.0
    seed: int = 0
    tap_sites: tuple = TAP_SITES

    def __post_init__(self):
        self.tap_sites = tuple(self.tap_sites)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        for site in self.tap_sites:
            if site not in TAP_SITES:
                raise ValueError(f"unknown tap site {site!r}; expected a subset of {TAP_SITES}")
        for name in ("vocab_size", "context_len", "n_layers", "d_model", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def d_ffn(self) -> int:
        return int(round(self.ffn_mult * self.d_model))


@dataclass
class ForwardTrace:
    """Outputs of one batched forward pass, aligned to response tokens.

    Response token ``t`` of row ``b`` sits at absolute position
    ``positions[b, t]``; its log-probability comes from the distribution
    predicted at ``positions[b, t] - 1``. Hidden states and taps are taken at
    the token's own position, so they see the prefix up to and including it.
    Padded slots have ``response_mask == False``.
    """

    tokens: np.ndarray
    logits: Tensor
    log_dist: Tensor
    positions: np.ndarray
    response_mask: np.ndarray
    response_tokens: np.ndarray
    token_log_probs: Tensor
    vocab_log_dist: Tensor
    hidden_states: list = field(default_factory=list)
    activation_taps: dict = field(default_factory=dict)

    @property
    def lengths(self) -> np.ndarray:
        return self.response_mask.sum(axis=1)


def _pad(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lens.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


class TransformerLM:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.frozen = False
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        c = self.config
        rng = np.random.default_rng(c.seed)
        d, f = c.d_model, c.d_ffn
        resid_std = 0.02 / np.sqrt(2 * c.n_layers)

        def normal(*shape, std=0.02):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(v, *shape):
            return Tensor(np.full(shape, v), requires_grad=True)

        p = {"tok_emb": normal(c.vocab_size, d), "pos_emb": normal(c.context_len, d)}
        for l in range(c.n_layers):
            p[f"h{l}.ln1.g"] = const(1.0, d)
            p[f"h{l}.ln1.b"] = const(0.0, d)
            p[f"h{l}.attn.w_qkv"] = normal(d, 3 * d)
            p[f"h{l}.attn.b_qkv"] = const(0.0, 3 * d)
            p[f"h{l}.attn.w_o"] = normal(d, d, std=resid_std)
            p[f"h{l}.attn.b_o"] = const(0.0, d)
            p[f"h{l}.ln2.g"] = const(1.0, d)
            p[f"h{l}.ln2.b"] = const(0.0, d)
            p[f"h{l}.ffn.w1"] = normal(d, f)
            p[f"h{l}.ffn.b1"] = const(0.0, f)
            p[f"h{l}.ffn.w2"] = normal(f, d, std=resid_std)
            p[f"h{l}.ffn.b2"] = const(0.0, d)
        p["ln_f.g"] = const(1.0, d)
        p["ln_f.b"] = const(0.0, d)
        p["head.w"] = normal(d, c.vocab_size)
        p["head.b"] = const(0.0, c.vocab_size)
        return p

    # ---- parameter management ---------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def freeze(self) -> "TransformerLM":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def copy(self) -> "TransformerLM":
        new = TransformerLM(copy.deepcopy(self.config),
                            {k: Tensor(v.data.copy(), requires_grad=True)
                             for k, v in self.params.items()})
        return new

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path):
        return save_arrays(path, {"kind": "model", "model_config": asdict(self.config)},
                           {f"model/{k}": v for k, v in self.state_dict().items()})

    @classmethod
    def load(cls, path) -> "TransformerLM":
        meta, arrays = load_arrays(path)
        return cls.from_arrays(meta, arrays)

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict) -> "TransformerLM":
        cfg = ModelConfig(**meta["model_config"])
        model = cls(cfg)
        model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
        return model

    # ---- forward ----------------------------------------------------------
    def _block(self, l: int, x: Tensor, causal: np.ndarray, taps: dict | None) -> Tensor:
        c, p = self.config, self.params
        B, S, d = x.shape
        h, dh = c.n_heads, d // c.n_heads
        a = T.layer_norm(x, p[f"h{l}.ln1.g"], p[f"h{l}.ln1.b"])
        qkv = a @ p[f"h{l}.attn.w_qkv"] + p[f"h{l}.attn.b_qkv"]
        qkv = T.transpose(T.reshape(qkv, (B, S, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)) + causal
        att = T.softmax(scores, axis=-1) @ v
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, S, d))
        attn_out = att @ p[f"h{l}.attn.w_o"] + p[f"h{l}.attn.b_o"]
        x = x + attn_out
        f = T.layer_norm(x, p[f"h{l}.ln2.g"], p[f"h{l}.ln2.b"])
        f = T.relu(f @ p[f"h{l}.ffn.w1"] + p[f"h{l}.ffn.b1"])
        ffn_out = f @ p[f"h{l}.ffn.w2"] + p[f"h{l}.ffn.b2"]
        x = x + ffn_out
        if taps is not None:
            taps[f"layer{l}.attn"] = attn_out
            taps[f"layer{l}.ffn"] = ffn_out
            taps[f"layer{l}.resid"] = x
        return x

    def forward(self, sequences, prompt_lens=None, capture_taps: bool = False) -> ForwardTrace:
        """Run the model on a batch of token sequences.

        ``sequences`` is a list of int sequences (or a single sequence).
        ``prompt_lens`` gives how many leading tokens are context; response
        tokens are the rest. It defaults to 1 (the first token is context).
        """
        c, p = self.config, self.params
        if len(sequences) and np.isscalar(sequences[0]):
            sequences = [sequences]
        seqs = [list(map(int, s)) for s in sequences]
        if not seqs or any(len(s) == 0 for s in seqs):
            raise ValueError("forward: empty sequence")
        for b, s in enumerate(seqs):
            if len(s) > c.context_len:
                raise ValueError(f"forward: row {b} has length {len(s)} > context_len {c.context_len}")
            for pos, tok in enumerate(s):
                if not 0 <= tok < c.vocab_size:
                    raise ValueError(f"forward: token id {tok} at row {b}, position {pos} "
                                     f"outside [0, {c.vocab_size})")
        tokens, lens = _pad(seqs)
        B, S = tokens.shape
        if prompt_lens is None:
            prompt_lens = np.ones(B, dtype=np.int64)
        prompt_lens = np.broadcast_to(np.asarray(prompt_lens, dtype=np.int64), (B,))
        if np.any(prompt_lens < 1) or np.any(prompt_lens > lens):
            raise ValueError("forward: prompt_lens must lie in [1, len(sequence)]")

        x = T.embedding(p["tok_emb"], tokens) + p["pos_emb"][np.arange(S)]
        causal = np.triu(np.full((S, S), _NEG), k=1)
        taps: dict | None = {} if capture_taps else None
        resid = []
        for l in range(c.n_layers):
            x = self._block(l, x, causal, taps)
            resid.append(x)
        x = T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = x @ p["head.w"] + p["head.b"]
        log_dist = T.log_softmax(logits, axis=-1)

        resp_lens = lens - prompt_lens
        Tm = max(int(resp_lens.max()), 1)
        steps = np.arange(Tm)
        mask = steps[None, :] < resp_lens[:, None]
        positions = np.where(mask, prompt_lens[:, None] + steps[None, :], 1)
        positions = np.minimum(positions, S - 1)
        rows = np.arange(B)[:, None]
        resp_tokens = np.where(mask, tokens[rows, positions], 0)

        vocab_log_dist = log_dist[rows, positions - 1]
        tlp = T.gather_last(vocab_log_dist, resp_tokens)
        tlp = T.where(mask, tlp, 0.0)
        hidden = [h[rows, positions] for h in resid]
        act = {}
        if taps is not None:
            act = {k: v[rows, positions] for k, v in taps.items()
                   if k.split(".")[1] in c.tap_sites}
        return ForwardTrace(tokens=tokens, logits=logits, log_dist=log_dist,
                            positions=positions, response_mask=mask,
                            response_tokens=resp_tokens, token_log_probs=tlp,
                            vocab_log_dist=vocab_log_dist, hidden_states=hidden,
                            activation_taps=act)

    __call__ = forward

    # ---- sampling ---------------------------------------------------------
    def sample(self, prompt, max_len: int, temperature: float = 1.0, top_p: float = 1.0,
               rng=None, greedy: bool = False, eos_id: int | None = None):
        out, _ = self.sample_batch([prompt], max_len, temperature, top_p, rng, greedy, eos_id)
        return out[0]

    def sample_batch(self, prompts, max_len: int, temperature: float = 1.0, top_p: float = 1.0,
                     rng=None, greedy: bool = False, eos_id: int | None = None):
        """Autoregressive sampling for several prompts.

        Returns ``(responses, truncated)``; ``truncated[i]`` is True when
        row ``i`` hit ``max_len`` without emitting ``eos_id``.
        """
        if temperature <= 0:
            raise ValueError("temperature must be > 0 (use greedy=True for argmax decoding)")
        if not 0 < top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        rng = np.random.default_rng(rng)
        seqs = [list(map(int, pr)) for pr in prompts]
        done = [False] * len(seqs)
        responses: list[list[int]] = [[] for _ in seqs]
        limit = self.config.context_len
        with T.no_grad():
            for _ in range(max_len):
                active = [i for i, d in enumerate(done) if not d and len(seqs[i]) < limit]
                if not active:
                    break
                tr = self.forward([seqs[i] for i in active])
                last = np.array([len(seqs[i]) - 1 for i in active])
                logits = tr.logits.data[np.arange(len(active)), last]
                for row, i in enumerate(active):
                    tok = _pick(logits[row], temperature, top_p, rng, greedy)
                    seqs[i].append(tok)
                    responses[i].append(tok)
                    if eos_id is not None and tok == eos_id:
                        done[i] = True
        truncated = [not d for d in done]
        return responses, truncated


def _pick(logits: np.ndarray, temperature: float, top_p: float, rng, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(logits))
    z = logits / temperature
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    if top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        keep = order[: int(np.searchsorted(cum, top_p) + 1)]
        trimmed = np.zeros_like(probs)
        trimmed[keep] = probs[keep]
        probs = trimmed / trimmed.sum()
    return int(rng.choice(len(probs), p=probs))


def forward(model: TransformerLM, sequences, prompt_lens=None, capture_taps: bool = False) -> ForwardTrace:
    return model.forward(sequences, prompt_lens, capture_taps)


def sample(model: TransformerLM, prompt, max_len: int, temperature: float = 1.0,
           top_p: float = 1.0, rng=None, greedy: bool = False, eos_id: int | None = None):
    return model.sample(prompt, max_len, temperature, top_p, rng, greedy, eos_id)
