"""Spatio-temporal hypergraph construction and the centralized layer rule.

One hyperedge per occupied (region, interval) cell; its members are every
user reporting a visit to that cell. Membership is binary, so duplicate
(user, cell) visits collapse. The layer rule averages node features into
hyperedges, averages incident hyperedge features back onto nodes,
multiplies by the layer weights and applies a sigmoid; the hyperedge
weight matrix is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mobility import UNREPORTED


@dataclass(frozen=True)
class STHypergraph:
    """Incidence between user nodes and (region, interval) hyperedges.

    Membership is stored twice as flat index pairs: sorted by edge
    (member_node, member_edge aligned with edge_ptr) and the raw pair
    list also serves as the node->edge view. D_v and D_e are the node and
    edge degree vectors.
    """

    n_nodes: int
    n_regions: int
    n_intervals: int
    edge_region: np.ndarray  # (E,)
    edge_t: np.ndarray  # (E,)
    member_node: np.ndarray  # (V,) node of each membership, grouped by edge
    member_edge: np.ndarray  # (V,) edge of each membership
    d_v: np.ndarray  # (N,)
    d_e: np.ndarray  # (E,)

    @property
    def n_edges(self):
        return self.edge_region.size

    @property
    def n_memberships(self):
        return self.member_node.size

    def cell_index(self):
        """Map (region, t) -> edge id."""
        return {
            (int(r), int(t)): e
            for e, (r, t) in enumerate(zip(self.edge_region, self.edge_t))
        }

    def members_of(self, edge):
        return np.sort(self.member_node[self.member_edge == edge])

    def dense_incidence(self):
        """Dense 0/1 incidence matrix H (nodes x edges); test-oracle sized."""
        h = np.zeros((self.n_nodes, self.n_edges))
        h[self.member_node, self.member_edge] = 1.0
        return h


def from_visits(n_nodes, n_regions, n_intervals, nodes, ts, regions):
    """Build the hypergraph from flat visit triples (duplicates collapse)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    regions = np.asarray(regions, dtype=np.int64)
    if not (nodes.size == ts.size == regions.size):
        raise ValueError("visit arrays must have equal length")
    if nodes.size == 0:
        raise ValueError("cannot build a hypergraph from zero visits")
    cell = regions * n_intervals + ts
    pair = np.unique(np.stack([cell, nodes], axis=1), axis=0)
    cells, member_node = pair[:, 0], pair[:, 1]
    unique_cells, member_edge = np.unique(cells, return_inverse=True)
    edge_region = unique_cells // n_intervals
    edge_t = unique_cells % n_intervals
    d_e = np.bincount(member_edge, minlength=unique_cells.size)
    d_v = np.bincount(member_node, minlength=n_nodes)
    return STHypergraph(
        n_nodes=n_nodes,
        n_regions=n_regions,
        n_intervals=n_intervals,
        edge_region=edge_region.astype(np.int64),
        edge_t=edge_t.astype(np.int64),
        member_node=member_node,
        member_edge=member_edge,
        d_v=d_v,
        d_e=d_e,
    )


def build(pop):
    """Hypergraph over a Population's reported visits."""
    nodes, ts = np.nonzero(pop.visits != UNREPORTED)
    regions = pop.visits[nodes, ts]
    return from_visits(pop.n_users, pop.n_regions, pop.n_intervals, nodes, ts, regions)


def edge_means(graph, x):
    """Mean of member node features per hyperedge (D_e^-1 H^T X); traced."""
    gathered = ad.gather_rows(x, graph.member_node)
    sums = ad.scatter_sum(gathered, graph.member_edge, graph.n_edges)
    return ad.mul(sums, ad.Tensor(1.0 / graph.d_e[:, None]))


def node_means(graph, edge_feats):
    """Mean of incident hyperedge features per node (D_v^-1 H E); traced.

    Isolated nodes (degree zero) get a zero row rather than a division
    error.
    """
    gathered = ad.gather_rows(edge_feats, graph.member_edge)
    sums = ad.scatter_sum(gathered, graph.member_node, graph.n_nodes)
    inv = np.zeros(graph.n_nodes)
    nz = graph.d_v > 0
    inv[nz] = 1.0 / graph.d_v[nz]
    return ad.mul(sums, ad.Tensor(inv[:, None]))


def hgnn_forward(graph, x, thetas):
    """Stacked layers of sigma(D_v^-1 H D_e^-1 H^T X Theta).

    ``thetas`` is a list of weight matrices, one per layer; the returned
    node features feed the classification head. Fully traced, so
    gradients flow through every layer when a tape is active.
    """
    out = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    for theta in thetas:
        theta = theta if isinstance(theta, ad.Tensor) else ad.Tensor(theta)
        if theta.shape[0] != out.shape[1]:
            raise ValueError(
                f"layer weight expects width {theta.shape[0]}, features have {out.shape[1]}"
            )
        agg = node_means(graph, edge_means(graph, out))
        out = ad.sigmoid(ad.matmul(agg, theta))
    return out


def export_incidence_csv(graph, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("edge_id,region,t,member_count\n")
        for e in range(graph.n_edges):
            fh.write(f"{e},{graph.edge_region[e]},{graph.edge_t[e]},{graph.d_e[e]}\n")
