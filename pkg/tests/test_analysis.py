import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import perturb, random_pairs, tiny_model, tiny_spec
from sparsepo import analysis as A
from sparsepo.config import TrainConfig
from sparsepo.trainer import run_po


def test_minmax_examples():
    s, deg = A.minmax_scale(np.array([2.0, 4.0, 3.0]))
    np.testing.assert_allclose(s, [0.0, 1.0, 0.5])
    assert not deg
    s, deg = A.minmax_scale(np.array([0.7, 0.7]))
    assert deg and np.array_equal(s, [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
def test_minmax_preserves_argmax(vals):
    v = np.array(vals)
    s, deg = A.minmax_scale(v)
    assert s.min() >= 0 and s.max() <= 1
    if not deg:
        assert s[np.argmax(v)] == 1.0 and s[np.argmin(v)] == 0.0


def test_accuracy_ties_count_half():
    m = tiny_model()
    pairs = random_pairs(np.random.default_rng(0), 6)
    assert A.preference_accuracy(m, m.copy(), pairs) == 0.5
    with pytest.raises(ValueError, match="empty"):
        A.preference_accuracy(m, m, [])


def test_frontier_point_identity_policy_has_zero_kl():
    m = tiny_model()
    spec = tiny_spec()
    prompts = [[1, 10, 11], [1, 12, 13, 14], [1, 20]]
    pt = A.eval_frontier(m, m.copy(), prompts, spec, max_len=6, seed=3)
    assert abs(pt.kl) <= 1e-9 and 0.0 <= pt.reward <= 1.0 and pt.n_prompts == 3
    again = A.eval_frontier(m, m.copy(), prompts, spec, max_len=6, seed=3)
    assert pt == again


def test_response_kl_positive_for_perturbed_policy():
    ref = tiny_model()
    pol = perturb(ref.copy(), 0.3, 1)
    kl = A.response_kl(pol, ref, [[1, 10], [1, 11]], [[3, 4, 2], []])
    assert kl[0] > 0 and kl[1] == 0.0


def _cfg(**kw):
    return TrainConfig(vocab_size=24, context_len=32, n_layers=2, d_model=16, n_heads=2,
                       ffn_mult=2.0, batch_size=4, epochs=1, **kw)


def test_frontier_and_sparsity_tables(tmp_path):
    pairs = random_pairs(np.random.default_rng(1), 8)
    for beta in (0.1, 1.0):
        run_po(tiny_model(), pairs, _cfg(method="sparse-common", beta=beta, eval_every=1),
               out_dir=tmp_path / f"b{beta}")
    dirs = [tmp_path / "b0.1", tmp_path / "b1.0"]
    pts = A.frontier(dirs, [[1, 10, 11]] * 4, tiny_spec(), out=tmp_path / "f.csv", max_len=5)
    fmt, rows = A.read_table(tmp_path / "f.csv")
    assert fmt == "sparsepo-frontier" and list(rows[0]) == list(A.FRONTIER_COLUMNS)
    assert len(rows) == len(pts) == 2 * 3
    assert {float(r["beta"]) for r in rows} == {0.1, 1.0}
    step0 = [p for p in pts if p.step == 0]
    assert all(abs(p.kl) <= 1e-9 for p in step0)

    srows, missing = A.sparsity_report(dirs + [tmp_path / "nope"], out=tmp_path / "s.csv")
    assert len(missing) == 1 and "nope" in missing[0]
    fmt, rows = A.read_table(tmp_path / "s.csv")
    assert fmt == "sparsepo-sparsity" and list(rows[0]) == list(A.SPARSITY_COLUMNS)
    assert len(rows) == len(srows) == 4


def test_read_table_requires_format_line(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="format"):
        A.read_table(tmp_path / "x.csv")


def test_heatmap_export(tmp_path):
    ref = tiny_model()
    pol = perturb(ref.copy(), 0.2, 2)
    pairs = random_pairs(np.random.default_rng(2), 2)
    path = A.export_heatmap(pol, ref, pairs, tmp_path / "h.jsonl", strategy="mapo")
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines[0]["format"] == A.HEATMAP_FORMAT and len(lines) == 1 + 2 * 2
    for rec in lines[1:]:
        n = len(rec["tokens"])
        for key in ("reward", "kl", "reward_masked", "kl_masked"):
            assert len(rec[key]) == len(rec[f"{key}_scaled"]) == n
            assert min(rec[f"{key}_scaled"]) >= 0 and max(rec[f"{key}_scaled"]) <= 1
        np.testing.assert_allclose(rec["reward_masked"], np.multiply(rec["reward"], rec["mask_u"]))


def test_heatmap_identity_policy_is_degenerate():
    m = tiny_model()
    recs = A.heatmap_records(m, m.copy(), random_pairs(np.random.default_rng(3), 1)[0])
    assert all(r["kl_degenerate"] and r["reward_degenerate"] for r in recs)
