import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from helpers import fixed_mask, trace_from_dists
from sparsepo import masks as M
from sparsepo import tensor as T
from sparsepo.gradcheck import check_gradient

EPS = 0.01


def _trace_with_sites(site_values):
    """site_values: name -> (T, d) activations for one response of length T."""
    n = len(next(iter(site_values.values())))
    taps = {k: T.Tensor(np.asarray(v, float)[None]) for k, v in site_values.items()}
    return trace_from_dists(np.full((n, 2), 0.5), [0] * n, taps=taps)


def test_mapo_constant_site_gives_floor():
    m = M.compute_mapo_mask(_trace_with_sites({"s": [[2.0], [2.0], [2.0]]}), EPS)
    assert np.array_equal(m.values[0], [EPS] * 3)


def test_mapo_rounding_noise_is_not_amplified():
    # 0.1 + 0.2 differs from 0.3 only in the last bit
    m = M.compute_mapo_mask(_trace_with_sites({"s": [[0.1 + 0.2], [0.3], [0.3]]}), EPS)
    assert np.array_equal(m.values[0], [EPS] * 3)
    assert np.abs(m.pre_clamp).max() < 1e-3


def test_mapo_single_site_example():
    tr = _trace_with_sites({"s": [[1.0], [2.0], [3.0]]})
    std = M.mapo_standardized(tr)["s"].data[0]
    np.testing.assert_allclose(std, [-1.224745, 0.0, 1.224745], atol=1e-6)
    m = M.compute_mapo_mask(tr, EPS)
    np.testing.assert_allclose(m.values[0], [0.01, 0.01, 1.0])


def test_mapo_opposite_sites_cancel():
    a = np.array([[0.3], [1.2], [-0.7], [2.0]])
    m = M.compute_mapo_mask(_trace_with_sites({"a": a, "b": -a}), EPS)
    np.testing.assert_allclose(m.pre_clamp[0], 0.0, atol=1e-12)
    assert np.array_equal(m.values[0], [EPS] * 4)


def test_mapo_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, d = rng.integers(1, 6), rng.integers(1, 4)
        sites = {f"g{i}": rng.normal(size=(n, d)) for i in range(rng.integers(1, 4))}
        got = M.compute_mapo_mask(_trace_with_sites(sites), EPS).values[0]
        want = oracle.mapo_mask([v.mean(1).tolist() for v in sites.values()], EPS)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_mapo_errors():
    tr = trace_from_dists(np.full((2, 2), 0.5), [0, 1])
    with pytest.raises(ValueError, match="no activation taps"):
        M.compute_mapo_mask(tr)
    with pytest.raises(ValueError, match="missing activation tap 'zz'"):
        M.compute_mapo_mask(_trace_with_sites({"s": [[1.0], [2.0]]}), sites=["zz"])


def _net(L, d, w, b, w_o):
    net = M.MaskNetwork(L, d)
    for l in range(L):
        net.w[l].data = np.asarray(w[l], float)
        net.b[l].data = np.asarray([b[l]], float)
    net.w_o.data = np.asarray(w_o, float)
    return net


def test_learned_mask_negative_bias_floor():
    net = _net(2, 3, [np.zeros(3)] * 2, [-1.0, -1.0], [0.5, 0.5])
    h = [T.Tensor(np.random.default_rng(0).normal(size=(1, 4, 3))) for _ in range(2)]
    assert np.array_equal(M.learned_mask_forward(net, h, EPS).values, np.full((1, 4), EPS))


def test_learned_mask_hand_examples():
    net = _net(1, 2, [[0.5, 0.5]], [0.0], [1.0])
    m = M.learned_mask_forward(net, [T.Tensor([[[1.0, -1.0]]])], EPS)
    assert m.values[0, 0] == EPS
    net = _net(2, 1, [[0.0], [0.0]], [0.3, 0.4], [1.0, 1.0])
    h = [T.Tensor([[[5.0]]]), T.Tensor([[[-2.0]]])]
    assert M.learned_mask_forward(net, h, EPS).values[0, 0] == pytest.approx(0.7, abs=1e-15)


def test_learned_mask_layer_mismatch():
    net = M.MaskNetwork(2, 4)
    with pytest.raises(ValueError, match="2 layers"):
        net([T.Tensor(np.ones((1, 3, 4)))])


def test_learned_mask_gradient():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = M.MaskNetwork(2, 3, seed=seed, init_bias=0.3, init_std=0.1)
        h = [T.Tensor(rng.normal(scale=0.3, size=(2, 4, 3))) for _ in range(2)]
        wt = rng.normal(size=(2, 4))

        def f(*_params):
            return T.sum_(M.learned_mask_forward(net, h, EPS).weights * wt)

        # keep every token strictly inside (eps, 1) so no clamp kink is crossed
        v = M.learned_mask_forward(net, h, EPS).values
        assert v.min() > EPS + 1e-3 and v.max() < 1 - 1e-3
        rep = check_gradient(f, net.parameters())
        assert rep.passed, rep


def test_sparsity_examples():
    assert M.sparsity(fixed_mask([EPS] * 4)) == 1.0
    assert M.sparsity(fixed_mask([1.0] * 4)) == 0.0
    assert M.sparsity(fixed_mask([EPS, 0.5, EPS, 1.0]), EPS) == 0.5
    empty = M.MaskValues(T.Tensor(np.zeros((1, 2))), np.zeros((1, 2), bool), "x", EPS)
    with pytest.raises(ValueError, match="empty"):
        M.sparsity(empty)


def test_random_mask_reproducible_and_floored():
    rm = np.ones((3, 5), bool)
    a, b = M.random_mask(rm, EPS, 7), M.random_mask(rm, EPS, 7)
    assert np.array_equal(a.values, b.values)
    assert a.values.min() >= EPS and a.values.max() <= 1.0


def test_binary_mask_signs():
    h = [T.Tensor(np.ones((1, 3, 2)))]
    pos = _net(1, 2, [[1.0, 1.0]], [0.0], [1.0])
    neg = _net(1, 2, [[1.0, 1.0]], [-5.0], [1.0])
    assert np.array_equal(M.ablation_masks("binary", np.ones((1, 3), bool), EPS, net=pos,
                                           hidden=h).values, np.ones((1, 3)))
    assert np.array_equal(M.binary_mask(neg, h, EPS).values, np.full((1, 3), EPS))
    with pytest.raises(ValueError):
        M.ablation_masks("nope", np.ones((1, 3), bool))


def test_padding_positions_are_zero():
    rm = np.array([[True, True, False]])
    net = M.MaskNetwork(1, 2, init_bias=0.5)
    m = M.learned_mask_forward(net, [T.Tensor(np.ones((1, 3, 2)))], EPS, rm)
    assert m.values[0, 2] == 0.0 and m.values[0, 0] > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5), st.floats(-2, 2))
def test_learned_mask_within_bounds(seed, eps, bias):
    rng = np.random.default_rng(seed)
    net = M.MaskNetwork(2, 4, seed=seed, init_bias=bias, init_std=1.0)
    h = [T.Tensor(rng.normal(scale=3, size=(2, 5, 4))) for _ in range(2)]
    v = M.learned_mask_forward(net, h, eps).values
    assert v.min() >= eps and v.max() <= 1.0
