"""Builders shared by the test modules."""
import numpy as np

from sparsepo import tensor as T
from sparsepo.data import PreferencePair, VocabSpec
from sparsepo.masks import MaskValues
from sparsepo.model import ForwardTrace, ModelConfig, TransformerLM


def random_dist(rng, v):
    p = rng.dirichlet(np.ones(v))
    p = np.maximum(p, 1e-3)
    return p / p.sum()


def trace_from_dists(dists, toks, requires_grad=False, taps=None):
    """One-row ForwardTrace whose next-token distributions are given directly.

    ``dists`` is a (T, V) array of probabilities and ``toks`` the T response ids.
    """
    logd = T.Tensor(np.log(np.asarray(dists, float))[None], requires_grad=requires_grad)
    toks = np.asarray(toks)[None]
    return trace_from_logdist(logd, toks, taps)


def trace_from_logdist(logd, toks, taps=None):
    b, t, _ = logd.shape
    mask = np.ones((b, t), dtype=bool)
    tlp = T.gather_last(logd, toks)
    return ForwardTrace(tokens=toks, logits=logd, log_dist=logd,
                        positions=np.tile(np.arange(1, t + 1), (b, 1)), response_mask=mask,
                        response_tokens=toks, token_log_probs=tlp, vocab_log_dist=logd,
                        hidden_states=[], activation_taps=taps or {})


def fixed_mask(values, eps=0.01, requires_grad=False):
    w = T.Tensor(np.asarray(values, float)[None], requires_grad=requires_grad)
    return MaskValues(w, np.ones(w.shape, dtype=bool), "fixed", eps, w.data.copy())


def tiny_model(seed=0, vocab=24, layers=2, d=16, heads=2, ctx=32):
    return TransformerLM(ModelConfig(vocab_size=vocab, context_len=ctx, n_layers=layers,
                                     d_model=d, n_heads=heads, ffn_mult=2.0, seed=seed))


def tiny_spec(vocab=24):
    return VocabSpec(vocab, (3, 4, 5), (6, 7, 8))


def random_pairs(rng, n, vocab=24, plen=3, clen=4, rlen=3):
    out = []
    for _ in range(n):
        out.append(PreferencePair(
            [1] + rng.integers(9, vocab, size=plen - 1).tolist(),
            rng.integers(3, vocab, size=clen).tolist(), rng.integers(3, vocab, size=rlen).tolist(),
            1.0, 0.0))
    return out


def perturb(model, scale, seed):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + scale * rng.normal(size=p.data.shape)
    return model


# ---- loss cases shared by unit and acceptance tests -----------------------
def loss_case(rng, v, tc, tr):
    """Random policy/reference distributions for one pair, as lists and traces."""
    side = {}
    for name, n in (("c", tc), ("r", tr)):
        pol = [random_dist(rng, v) for _ in range(n)]
        ref = [random_dist(rng, v) for _ in range(n)]
        toks = rng.integers(0, v, size=n).tolist()
        side[name] = {"pol": [p.tolist() for p in pol], "ref": [q.tolist() for q in ref], "toks": toks}
    return side


def case_traces(case, requires_grad=False):
    c, r = case["c"], case["r"]
    pc = trace_from_dists(c["pol"], c["toks"], requires_grad)
    rc = trace_from_dists(c["ref"], c["toks"])
    pr = trace_from_dists(r["pol"], r["toks"], requires_grad)
    rr = trace_from_dists(r["ref"], r["toks"])
    return pc, rc, pr, rr
