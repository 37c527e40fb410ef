import numpy as np
import pytest

from pigcl import autodiff as ad
from pigcl import graph as gr
from pigcl import noise as nz


def two_edge_graph(seed=0, feat_dim=3):
    feats = np.random.default_rng(seed).normal(size=(3, feat_dim))
    return gr.build_graph(3, np.array([[0, 1], [1, 2]]), feats)


def path4(seed=0, feat_dim=3):
    feats = np.random.default_rng(seed).normal(size=(4, feat_dim))
    return gr.build_graph(4, np.array([[0, 1], [1, 2], [2, 3]]), feats)


def edge_mlp_oracle(g, params):
    """Hand-rolled dense recomputation of the per-edge drop probabilities."""
    x2 = np.hstack([g.features[g.edge_u], g.features[g.edge_v]])
    h = np.maximum(x2 @ params.w1.values + params.b1.values, 0.0)
    logits = h @ params.w2.values + params.b2.values
    return 1.0 / (1.0 + np.exp(-(logits[:, 1] - logits[:, 0])))


def test_zero_weight_generator_gives_half_drop_probability():
    g = two_edge_graph()
    params = nz.init_edge_gen(0, 3, hidden=5)
    for t in params.tensors():
        t.values[:] = 0.0
    probs = nz.edge_drop_probs(g, params)
    np.testing.assert_array_equal(probs.values, [0.5, 0.5])


def test_drop_probability_monotone_in_drop_bias():
    g = two_edge_graph()
    params = nz.init_edge_gen(1, 3, hidden=5)
    last = np.zeros(2)
    for bias in (0.0, 2.0, 5.0, 20.0):
        params.b2.values[:] = [0.0, bias]
        probs = nz.edge_drop_probs(g, params).values
        assert np.all(probs >= last - 1e-15)
        last = probs
    assert np.all(last > 0.999999)


def test_edge_drop_probs_match_dense_mlp_oracle():
    g = two_edge_graph(seed=3)
    params = nz.init_edge_gen(7, 3, hidden=6)
    got = nz.edge_drop_probs(g, params).values
    want = edge_mlp_oracle(g, params)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_edge_drop_probs_requires_edges():
    g = gr.build_graph(2, np.empty((0, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="no edges"):
        nz.edge_drop_probs(g, nz.init_edge_gen(0, 3))


def test_low_temperature_relaxed_sample_approaches_hard_argmax():
    probs = ad.Tensor(np.full(64, 0.5))
    keep, soft, hard = nz.sample_edge_noise(probs, temperature=1e-4, seed=9)
    assert np.array_equal(keep.values, hard)
    mask = np.abs(soft.values - hard) < 1e-8
    assert mask.all()
    # hard decision is the argmax of the Gumbel-perturbed logits
    g = nz.gumbel_draws((64, 2), 9)
    margin = np.log(0.5) + g[:, 0] - (np.log(0.5) + g[:, 1])
    np.testing.assert_array_equal(hard, (margin > 0).astype(float))


@pytest.mark.parametrize("p", [0.1, 0.5, 0.8])
def test_hard_drop_frequency_calibrated(p):
    n = 100_000
    probs = ad.Tensor(np.full(n, p))
    _, _, hard = nz.sample_edge_noise(probs, temperature=1.0, seed=123)
    dropped = n - hard.sum()
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(dropped - n * p) < 4 * sigma


def test_sample_edge_noise_deterministic_per_seed():
    probs = ad.Tensor(np.full(100, 0.3))
    a = nz.sample_edge_noise(probs, 1.0, seed=5)
    b = nz.sample_edge_noise(probs, 1.0, seed=5)
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[1].values, b[1].values)


def test_straight_through_gradient_equals_relaxed_gradient_on_linear_loss():
    g = two_edge_graph(seed=11)
    params = nz.init_edge_gen(3, 3, hidden=4)
    weights = np.array([2.0, -1.5])

    grads = {}
    for hard in (True, False):
        tape = ad.Tape()
        for t in params.tensors():
            tape.watch(t)
        probs = nz.edge_drop_probs(g, params)
        keep, _, _ = nz.sample_edge_noise(probs, 1.0, seed=4, hard=hard)
        tape.backward(ad.sum_(ad.mul(keep, weights)))
        grads[hard] = [t.grad.copy() for t in params.tensors()]
    for gh, gs in zip(grads[True], grads[False]):
        np.testing.assert_array_equal(gh, gs)


def test_zero_weight_attr_generator_is_identity_reparameterization():
    g = two_edge_graph()
    params = nz.init_attr_gen(0, 3, hidden=4)
    for t in params.tensors():
        t.values[:] = 0.0
    mu, sigma, eps_hat, noise = nz.sample_attr_noise(g.features, params, seed=2)
    assert np.array_equal(mu.values, np.zeros((3, 3)))
    assert np.array_equal(sigma.values, np.ones((3, 3)))
    assert np.array_equal(noise.values, eps_hat)


def test_attr_noise_reparameterization_identity_bit_exact():
    g = two_edge_graph(seed=5)
    params = nz.init_attr_gen(8, 3, hidden=6)
    mu, sigma, eps_hat, noise = nz.sample_attr_noise(g.features, params, seed=3)
    assert np.array_equal(noise.values, mu.values + sigma.values * eps_hat)


def test_attr_noise_mean_matches_mu_statistically():
    n, d = 1000, 100  # 1e5 scalar draws
    x = np.random.default_rng(0).normal(size=(n, d))
    params = nz.init_attr_gen(1, d, hidden=8)
    mu, sigma, eps_hat, noise = nz.sample_attr_noise(x, params, seed=77)
    centered = noise.values - mu.values
    # centered = sigma * eps, mean 0 with std sigma/sqrt(N) per the CLT
    total = centered.sum()
    std_total = np.sqrt((sigma.values ** 2).sum())
    assert abs(total) < 4 * std_total
    # empirical variance of eps reconstructed from the draw
    eps = centered / sigma.values
    assert abs(eps.var() - 1.0) < 4 * np.sqrt(2.0 / eps.size)


def test_attr_sigma_gradient_matches_finite_differences():
    g = two_edge_graph(seed=9)
    params = nz.init_attr_gen(4, 3, hidden=4)

    def build(tape):
        _, _, _, noise = nz.sample_attr_noise(g.features, params, seed=13)
        return ad.sum_(noise)

    report = ad.gradcheck(build, params.tensors())
    assert report.ok, report.summary()


def test_apply_identity_noise_is_bit_equal_to_clean_view():
    g = path4(seed=1)
    sample = nz.NoiseSample(
        edge_keep=ad.Tensor(np.ones(g.num_edges)),
        edge_keep_hard=np.ones(g.num_edges),
        attr_noise=ad.Tensor(np.zeros_like(g.features)),
    )
    a_eps, x_eps = nz.apply_noise(g, sample)
    clean = gr.normalize(g)
    assert np.array_equal(a_eps.value_array(), clean.value_array())
    assert np.array_equal(x_eps.values, g.features)


def test_dropping_only_edge_leaves_self_loops():
    g = gr.build_graph(2, np.array([[0, 1]]), np.zeros((2, 2)))
    sample = nz.NoiseSample(edge_keep=ad.Tensor(np.zeros(1)),
                            edge_keep_hard=np.zeros(1))
    a_eps, _ = nz.apply_noise(g, sample)
    np.testing.assert_array_equal(a_eps.to_dense(), np.eye(2))


def test_all_edges_dropped_logs_warning(caplog):
    g = path4()
    sample = nz.NoiseSample(edge_keep=ad.Tensor(np.zeros(3)),
                            edge_keep_hard=np.zeros(3))
    with caplog.at_level("WARNING", logger="pigcl.noise"):
        nz.apply_noise(g, sample)
    assert any("dropped" in r.message for r in caplog.records)


def test_mixed_mask_matches_dense_recomputation():
    g = path4(seed=2)
    keep = np.array([1.0, 0.0, 1.0])
    a_eps = nz.noisy_normalized_adjacency(g, ad.Tensor(keep))
    dense_adj = np.zeros((4, 4))
    for (u, v), k in zip(zip(g.edge_u, g.edge_v), keep):
        dense_adj[u, v] = dense_adj[v, u] = k
    a_hat = dense_adj + np.eye(4)
    d = a_hat.sum(axis=1)
    want = np.diag(d ** -0.5) @ a_hat @ np.diag(d ** -0.5)
    np.testing.assert_allclose(a_eps.to_dense(), want, rtol=1e-12, atol=1e-15)


def test_both_directed_entries_share_the_keep_decision():
    g = path4(seed=4)
    keep = np.array([0.3, 0.8, 0.1])
    dense = nz.noisy_normalized_adjacency(g, ad.Tensor(keep)).to_dense()
    np.testing.assert_array_equal(dense, dense.T)


def test_noisy_adjacency_gradients_match_finite_differences():
    g = path4(seed=6)
    params = nz.init_edge_gen(2, 3, hidden=5)

    def build(tape):
        probs = nz.edge_drop_probs(g, params)
        keep, _, _ = nz.sample_edge_noise(probs, 0.8, seed=21, hard=False)
        a_eps = nz.noisy_normalized_adjacency(g, keep)
        prod = ad.spmm(a_eps, np.arange(8.0).reshape(4, 2))
        return ad.sum_(ad.mul(prod, prod))

    report = ad.gradcheck(build, params.tensors())
    assert report.ok, report.summary()


def test_generate_noise_deterministic_and_partial_sides():
    g = path4(seed=3)
    ep = nz.init_edge_gen(1, 3)
    a = nz.generate_noise(g, ep, None, seed=10)
    b = nz.generate_noise(g, ep, None, seed=10)
    np.testing.assert_array_equal(a.edge_keep_hard, b.edge_keep_hard)
    assert a.attr_noise is None
    ap = nz.init_attr_gen(1, 3)
    c = nz.generate_noise(g, None, ap, seed=10)
    assert c.edge_keep is None and c.attr_noise is not None


def test_edge_noise_exports(tmp_path):
    g = path4(seed=7)
    probs = np.array([0.2, 0.9, 0.4])
    kept = np.array([1, 0, 1])
    tsv = tmp_path / "edge_noise.tsv"
    nz.export_edge_noise_tsv(tsv, g, probs, kept)
    lines = tsv.read_text().strip().splitlines()
    assert lines[0] == "u\tv\tdrop_prob\tkept"
    assert len(lines) == 4
    assert lines[2].split("\t") == ["1", "2", "0.900000", "0"]

    dot = tmp_path / "edge_noise.dot"
    nz.export_edge_noise_dot(dot, g, probs)
    text = dot.read_text()
    assert text.startswith("graph noise {")
    assert "--" in text
