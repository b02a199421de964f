import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedepi import autodiff as ad
from fedepi import hypergraph, mobility
from helpers import assert_grad_close, central_difference


def dense_layer_oracle(h, x, theta):
    """Explicit D_v^-1 H D_e^-1 H^T X Theta evaluation with dense matrices."""
    d_v = h.sum(axis=1)
    d_e = h.sum(axis=0)
    dv_inv = np.diag(np.where(d_v > 0, 1.0 / np.where(d_v > 0, d_v, 1.0), 0.0))
    de_inv = np.diag(1.0 / d_e)
    pre = dv_inv @ h @ de_inv @ h.T @ x @ theta
    return 1.0 / (1.0 + np.exp(-pre))


def test_build_two_user_example():
    visits = np.array(
        [[1, 2], [1, mobility.UNREPORTED]], dtype=np.int64
    )
    pop = mobility.Population(visits=visits, n_regions=3, interval_hours=2.0)
    g = hypergraph.build(pop)
    assert g.n_edges == 2
    index = g.cell_index()
    e_shared = index[(1, 0)]
    e_single = index[(2, 1)]
    assert g.members_of(e_shared).tolist() == [0, 1]
    assert g.members_of(e_single).tolist() == [0]
    assert g.d_v.tolist() == [2, 1]
    assert sorted(g.d_e.tolist()) == [1, 2]


def test_build_single_edge_degenerate():
    visits = np.zeros((7, 1), dtype=np.int64)
    pop = mobility.Population(visits=visits, n_regions=1, interval_hours=2.0)
    g = hypergraph.build(pop)
    assert g.n_edges == 1
    assert g.d_e.tolist() == [7]


def test_build_matches_hash_group_oracle():
    pop = mobility.generate_population(31, 30, 7, 20)
    g = hypergraph.build(pop)
    expected = {}
    for u in range(30):
        for t in range(20):
            expected.setdefault((pop.visits[u, t], t), set()).add(u)
    index = g.cell_index()
    assert set(index) == set(expected)
    for cell, members in expected.items():
        assert set(g.members_of(index[cell]).tolist()) == members
    assert np.all(g.d_e >= 1)
    assert np.array_equal(
        g.d_v, np.array([20] * 30)
    )  # fully reported: every interval contributes one membership


def test_duplicate_visits_collapse():
    g = hypergraph.from_visits(
        2, 3, 2, nodes=[0, 0, 1], ts=[0, 0, 0], regions=[1, 1, 1]
    )
    assert g.n_edges == 1
    assert g.d_e.tolist() == [2]


def test_forward_single_self_edge():
    g = hypergraph.from_visits(1, 1, 1, nodes=[0], ts=[0], regions=[0])
    x = np.array([[0.3, -0.2]])
    out = hypergraph.hgnn_forward(g, x, [np.eye(2)])
    assert np.allclose(out.data, 1.0 / (1.0 + np.exp(-x)))


def test_forward_pair_edge_mean():
    g = hypergraph.from_visits(2, 1, 1, nodes=[0, 1], ts=[0, 0], regions=[0, 0])
    x = np.array([[2.0], [4.0]])
    out = hypergraph.hgnn_forward(g, x, [np.eye(1)])
    expected = 1.0 / (1.0 + np.exp(-3.0))
    assert np.allclose(out.data, [[expected], [expected]])


def test_forward_matches_dense_oracle():
    pop = mobility.generate_population(5, 25, 6, 12)
    g = hypergraph.build(pop)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(25, 4))
    thetas = [rng.normal(size=(4, 4)), rng.normal(size=(4, 3))]
    out = hypergraph.hgnn_forward(g, x, thetas)
    h = g.dense_incidence()
    expected = dense_layer_oracle(h, x, thetas[0])
    expected = dense_layer_oracle(h, expected, thetas[1])
    assert np.abs(out.data - expected).max() < 1e-10


def test_isolated_node_zero_row():
    g = hypergraph.from_visits(3, 2, 1, nodes=[0, 1], ts=[0, 0], regions=[0, 1])
    x = np.array([[1.0], [2.0], [3.0]])
    out = hypergraph.hgnn_forward(g, x, [np.eye(1)])
    assert out.data[2, 0] == pytest.approx(0.5)  # sigmoid(0): zero aggregate


def test_edge_and_node_means_are_exact_means():
    pop = mobility.generate_population(8, 20, 5, 10)
    g = hypergraph.build(pop)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 3))
    e = hypergraph.edge_means(g, ad.Tensor(x)).data
    for edge in range(g.n_edges):
        assert np.allclose(e[edge], x[g.members_of(edge)].mean(axis=0), atol=1e-12)
    nodes = hypergraph.node_means(g, ad.Tensor(e)).data
    for u in range(20):
        incident = g.member_edge[g.member_node == u]
        assert np.allclose(nodes[u], e[incident].mean(axis=0), atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n, m, t = 12, 4, 6
    visits = rng.integers(0, m, size=(n, t))
    pop = mobility.Population(visits=visits, n_regions=m, interval_hours=2.0)
    g = hypergraph.build(pop)
    x = rng.normal(size=(n, 3))
    theta = rng.normal(size=(3, 2))
    out = hypergraph.hgnn_forward(g, x, [theta]).data

    perm = rng.permutation(n)
    pop_p = mobility.Population(
        visits=visits[perm], n_regions=m, interval_hours=2.0
    )
    g_p = hypergraph.build(pop_p)
    out_p = hypergraph.hgnn_forward(g_p, x[perm], [theta]).data
    assert np.abs(out_p - out[perm]).max() < 1e-12


def test_forward_gradcheck():
    pop = mobility.generate_population(9, 10, 4, 6)
    g = hypergraph.build(pop)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 3))
    theta = rng.normal(size=(3, 2))
    y = rng.integers(0, 2, size=10)

    def run(theta_v, x_v):
        with ad.Tape() as tape:
            t_leaf = ad.Tensor(theta_v, requires_grad=True)
            x_leaf = ad.Tensor(x_v, requires_grad=True)
            out = hypergraph.hgnn_forward(g, x_leaf, [t_leaf])
            loss = ad.softmax_xent(out, y)
            grads = tape.gradients(loss, [t_leaf, x_leaf])
            return loss.item(), grads[t_leaf], grads[x_leaf]

    _, g_theta, g_x = run(theta, x)
    assert_grad_close(g_theta, central_difference(lambda v: run(v, x)[0], theta))
    assert_grad_close(g_x, central_difference(lambda v: run(theta, v)[0], x))


def test_complexity_linear_in_visits():
    # structure size equals total visit count, never N^2
    pop = mobility.generate_population(7, 40, 9, 15)
    g = hypergraph.build(pop)
    assert g.n_memberships == 40 * 15
    assert g.n_memberships < 40 * 40


def test_incidence_csv(tmp_path):
    pop = mobility.generate_population(7, 6, 4, 5)
    g = hypergraph.build(pop)
    hypergraph.export_incidence_csv(g, tmp_path / "inc.csv")
    lines = (tmp_path / "inc.csv").read_text().strip().splitlines()
    assert lines[0] == "edge_id,region,t,member_count"
    assert len(lines) == g.n_edges + 1


def test_shape_mismatch_rejected():
    g = hypergraph.from_visits(2, 2, 1, nodes=[0, 1], ts=[0, 0], regions=[0, 1])
    with pytest.raises(ValueError):
        hypergraph.hgnn_forward(g, np.ones((2, 3)), [np.eye(4)])
