"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .data import PreferencePair, VocabSpec, validate_pair


def _ids(seq, name: str, where: str) -> list:
    arr = np.asarray(seq)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{where}: {name} must be a non-empty 1-d sequence of token ids")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError(f"{where}: {name} holds non-integer ids")
    return arr.astype(int).tolist()


def check_pairs(X, spec: VocabSpec | None = None) -> list[PreferencePair]:
    """Accept PreferencePair objects, mappings or (prompt, chosen, rejected) tuples."""
    if X is None or len(X) == 0:
        raise ValueError("expected at least one preference pair")
    out = []
    for i, x in enumerate(X):
        where = f"pair {i}"
        if isinstance(x, PreferencePair):
            pair = x
        elif isinstance(x, Mapping):
            pair = PreferencePair(_ids(x["prompt"], "prompt", where), _ids(x["chosen"], "chosen", where),
                                  _ids(x["rejected"], "rejected", where),
                                  float(x.get("chosen_score", 1.0)), float(x.get("rejected_score", 0.0)))
        elif isinstance(x, (tuple, list)) and len(x) == 3:
            pair = PreferencePair(*(_ids(s, n, where) for s, n in zip(x, ("prompt", "chosen", "rejected"))),
                                  1.0, 0.0)
        else:
            raise TypeError(f"{where}: unsupported type {type(x).__name__}")
        if spec is not None:
            validate_pair(pair, spec, where)
        out.append(pair)
    return out


def check_sequences(X, spec: VocabSpec | None = None) -> list[dict]:
    """Accept {prompt, response} mappings or (prompt, response) tuples."""
    if X is None or len(X) == 0:
        raise ValueError("expected at least one sequence")
    out = []
    for i, x in enumerate(X):
        where = f"sequence {i}"
        if isinstance(x, Mapping):
            prompt, resp = x["prompt"], x["response"]
        elif isinstance(x, (tuple, list)) and len(x) == 2:
            prompt, resp = x
        else:
            raise TypeError(f"{where}: unsupported type {type(x).__name__}")
        rec = {"prompt": _ids(prompt, "prompt", where), "response": _ids(resp, "response", where)}
        if spec is not None:
            toks = rec["prompt"] + rec["response"]
            if min(toks) < 0 or max(toks) >= spec.vocab_size:
                raise ValueError(f"{where}: token ids outside [0, {spec.vocab_size})")
        out.append(rec)
    return out

