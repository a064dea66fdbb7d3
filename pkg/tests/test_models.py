import math

import mpmath
import numpy as np
import pytest

from sgdd import autodiff as ad
from sgdd.autodiff import Tape, Tensor, finite_diff_check
from sgdd.errors import InputError, ParseError
from sgdd.graph import normalized_laplacian
from sgdd.models import (
    ARCHITECTURES,
    cheby_forward,
    cross_entropy,
    gcn_forward,
    gcn_normalize,
    gen_forward,
    gnn_forward,
    init_gen,
    init_gnn,
    load_params,
    mlp_forward,
    params_from_json,
    params_to_json,
    sample_coordinates,
    save_params,
    sgc_forward,
)


def random_adj(rng, n, density=0.5):
    a = np.triu((rng.random((n, n)) < density).astype(float), 1)
    return a + a.T


def zero_params(params):
    for t in params.parameters():
        t.data = np.zeros_like(t.data)
    return params


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_weights_give_zero_logits(arch, rng):
    p = zero_params(init_gnn(arch, 4, 3, hidden=8, rng=rng))
    out = gnn_forward(p, random_adj(rng, 5), rng.standard_normal((5, 4)))
    assert out.shape == (5, 3) and np.array_equal(out.data, np.zeros((5, 3)))


def test_gcn_single_node_identity_feature(rng):
    p = init_gnn("gcn", 3, 2, hidden=4, rng=rng)
    x = np.array([[0.0, 1.0, 0.0]])
    out = gcn_forward(p, np.zeros((1, 1)), x).data
    expect = np.maximum(p["W1"].data[1] + p["b1"].data[0], 0) @ p["W2"].data + p["b2"].data
    assert np.allclose(out, expect, atol=1e-14)


def test_gcn_normalize_matches_direct_formula(rng):
    a = random_adj(rng, 6)
    a_hat = a + np.eye(6)
    d = a_hat.sum(axis=1) ** -0.5
    assert np.allclose(gcn_normalize(a).data, d[:, None] * a_hat * d[None, :], atol=1e-15)


def test_gcn_accepts_sparse_and_weighted_dense(rng):
    import scipy.sparse as sp

    p = init_gnn("gcn", 3, 2, hidden=4, rng=rng)
    a = random_adj(rng, 5)
    x = rng.standard_normal((5, 3))
    assert np.allclose(gcn_forward(p, sp.csr_matrix(a), x).data, gcn_forward(p, a, x).data)
    w = a * rng.random((5, 5))
    assert np.all(np.isfinite(gcn_forward(p, 0.5 * (w + w.T), x).data))


def test_feature_dimension_mismatch_is_input_error(rng):
    p = init_gnn("gcn", 3, 2, hidden=4, rng=rng)
    with pytest.raises(InputError):
        gcn_forward(p, np.zeros((2, 2)), np.zeros((2, 5)))
    with pytest.raises(InputError):
        init_gnn("gat", 3, 2)


@pytest.mark.parametrize("seed", range(3))
def test_gcn_cross_entropy_gradient_w1(seed):
    rng = np.random.default_rng(seed)
    p = init_gnn("gcn", 4, 3, hidden=5, rng=rng)
    a, x, y = random_adj(rng, 6), rng.standard_normal((6, 4)), rng.integers(0, 3, 6)

    def f(w1):
        q = dict(p.tensors, W1=w1)
        return cross_entropy(gcn_forward(type(p)("gcn", q, 5), a, x), y)

    assert finite_diff_check(f, p["W1"].data) < 1e-4


def test_sgc_on_edgeless_graph_is_linear(rng):
    p = init_gnn("sgc", 4, 3, rng=rng)
    x = rng.standard_normal((5, 4))
    out = sgc_forward(p, np.zeros((5, 5)), x).data
    assert np.allclose(out, x @ p["W"].data + p["b"].data, atol=1e-14)


def test_mlp_ignores_structure(rng):
    p = init_gnn("mlp", 4, 3, hidden=6, rng=rng)
    x = rng.standard_normal((5, 4))
    a = gnn_forward(p, random_adj(rng, 5), x).data
    b = gnn_forward(p, random_adj(rng, 5, 0.9), x).data
    assert np.array_equal(a, b) and np.array_equal(a, mlp_forward(p, x).data)


def test_cheby_t0_term_alone_is_linear(rng):
    p = init_gnn("cheby", 3, 2, hidden=4, rng=rng)
    for name in ("W1_1", "W1_2", "W2_1", "W2_2"):
        p[name].data = np.zeros_like(p[name].data)
    x = rng.standard_normal((4, 3))
    out = cheby_forward(p, random_adj(rng, 4), x).data
    h = np.maximum(x @ p["W1_0"].data + p["b1"].data, 0)
    assert np.allclose(out, h @ p["W2_0"].data + p["b2"].data, atol=1e-14)


def test_cheby_matches_polynomial_expansion():
    rng = np.random.default_rng(4)
    a = np.array([[0, 1, 1, 0], [1, 0, 1, 0], [1, 1, 0, 1], [0, 0, 1, 0]], float)
    p = init_gnn("cheby", 3, 2, hidden=5, rng=rng)
    x = rng.standard_normal((4, 3))
    lhat = normalized_laplacian(a) - np.eye(4)
    t = [np.eye(4), lhat, 2 * lhat @ lhat - np.eye(4)]

    def layer(h, k):
        return sum(t[i] @ h @ p[f"W{k}_{i}"].data for i in range(3)) + p[f"b{k}"].data

    expect = layer(np.maximum(layer(x, 1), 0), 2)
    assert np.allclose(cheby_forward(p, a, x).data, expect, atol=1e-12)


@pytest.mark.parametrize("arch", ["gcn", "sgc"])
@pytest.mark.parametrize("seed", range(4))
def test_permutation_equivariance(arch, seed):
    rng = np.random.default_rng(seed)
    p = init_gnn(arch, 3, 2, hidden=4, rng=rng)
    a, x = random_adj(rng, 6), rng.standard_normal((6, 3))
    perm = rng.permutation(6)
    out = gnn_forward(p, a, x).data
    out_perm = gnn_forward(p, a[np.ix_(perm, perm)], x[perm]).data
    assert np.allclose(out_perm, out[perm], atol=1e-12)


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("seed", range(10))
def test_every_parameter_gets_finite_gradient(arch, seed):
    rng = np.random.default_rng(seed)
    p = init_gnn(arch, 4, 3, hidden=6, rng=rng)
    a, x, y = random_adj(rng, 7), rng.standard_normal((7, 4)), rng.integers(0, 3, 7)
    with Tape() as tape:
        grads = tape.grad(cross_entropy(gnn_forward(p, a, x), y), p.parameters())
    assert all(np.all(np.isfinite(g.data)) for g in grads)


def test_cross_entropy_uniform_and_confident():
    assert cross_entropy(np.zeros((4, 5)), [0, 1, 2, 3]).item() == pytest.approx(math.log(5), abs=1e-15)
    logits = np.full((2, 3), -500.0)
    logits[[0, 1], [2, 0]] = 500.0
    assert cross_entropy(logits, [2, 0]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_high_precision_reference():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((5, 3)) * 4
    labels = rng.integers(0, 3, 5)
    mask = np.array([True, False, True, True, True])
    mpmath.mp.dps = 50
    terms = []
    for i in np.flatnonzero(mask):
        row = [mpmath.mpf(float(v)) for v in logits[i]]
        terms.append(mpmath.log(sum(mpmath.exp(v) for v in row)) - row[labels[i]])
    oracle = float(sum(terms) / len(terms))
    assert abs(cross_entropy(logits, labels, mask).item() - oracle) < 1e-10


def test_cross_entropy_empty_mask_rejected():
    with pytest.raises(InputError):
        cross_entropy(np.zeros((2, 2)), [0, 1], [False, False])


def make_gen(rng, n=5, d=3, c=2):
    phi = init_gen(d, c, rng, hidden=6, cond_width=4)
    return phi, sample_coordinates(n, rng), rng.standard_normal((n, d)), rng.integers(0, c, n)


@pytest.mark.parametrize("seed", range(10))
def test_generator_output_is_valid_condensed_adjacency(seed):
    rng = np.random.default_rng(seed)
    phi, z, x, y = make_gen(rng)
    a = gen_forward(phi, z, x, y).data
    off = a[~np.eye(5, dtype=bool)]
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 0)
    assert np.all((off > 0) & (off < 1))


def test_generator_identical_inputs_give_identical_rows(rng):
    phi, z, x, y = make_gen(rng)
    z[3], x[3], y[3] = z[1], x[1], y[1]
    a = gen_forward(phi, z, x, y).data
    others = [0, 2, 4]
    assert np.allclose(a[1, others], a[3, others], atol=1e-15)


def test_generator_dimension_mismatch(rng):
    phi, z, x, y = make_gen(rng)
    with pytest.raises(InputError):
        gen_forward(phi, z[:4], x, y)
    with pytest.raises(InputError):
        gen_forward(phi, z, x[:, :2], y)


def test_coordinates_in_unit_interval(rng):
    z = sample_coordinates(50, rng)
    assert z.shape == (50,) and z.min() >= 0 and z.max() <= 1


@pytest.mark.parametrize("seed", range(3))
def test_generator_gradients(seed):
    rng = np.random.default_rng(seed)
    phi, z, x, y = make_gen(rng, n=4)
    assert finite_diff_check(lambda t: ad.sum_(gen_forward(phi, z, t, y)), x) < 1e-4
    for name in ("W1", "Ci2", "Wout"):
        def f(w, name=name):
            saved = phi.tensors[name]
            phi.tensors[name] = w
            try:
                return ad.sum_(gen_forward(phi, z, x, y))
            finally:
                phi.tensors[name] = saved

        assert finite_diff_check(f, phi[name].data) < 1e-4, name


def test_generator_frequency_matrix_is_immutable(rng):
    phi, *_ = make_gen(rng)
    with pytest.raises(ValueError):
        phi.freq[0, 0] = 1.0


def test_forward_is_deterministic(rng):
    phi, z, x, y = make_gen(rng)
    assert gen_forward(phi, z, x, y).data.tobytes() == gen_forward(phi, z, x, y).data.tobytes()


def test_checkpoint_round_trip(tmp_path, rng):
    gnn = init_gnn("cheby", 3, 2, hidden=4, rng=rng)
    save_params(gnn, tmp_path / "gnn.json")
    back = load_params(tmp_path / "gnn.json")
    assert back.arch == "cheby" and all(np.array_equal(back[k].data, v.data) for k, v in gnn.tensors.items())
    phi, *_ = make_gen(rng)
    back = params_from_json(params_to_json(phi))
    assert np.array_equal(back.freq, phi.freq) and back.cond_dim == phi.cond_dim
    with pytest.raises(ParseError):
        params_from_json("{")
