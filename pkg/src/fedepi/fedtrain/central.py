"""Centralized trainer over the whole hypergraph.

Serves two roles: the oracle for the protocol-equivalence checks (same
update semantics as the federated loop, computed through traced
gather/scatter hypergraph ops instead of protocol message passing) and
the plain centralized baseline (whole-graph gradients, optionally with
multi-layer propagation and injected edge noise to mimic the privacy
channel).
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..errors import DivergenceError
from ..hypergraph import edge_means, node_means
from ..seeding import as_seed_sequence
from . import model as fm
from .protocol import ModelConfig, ServerState, TrainResult


def _forward(graph, emb_leaf, params_leaves, macro_cells, masks, sigma, rng, propagation):
    """Traced forward pass; returns logits for every node."""
    hidden, head = params_leaves[:-1], params_leaves[-1]

    def aggregate(feats):
        e = edge_means(graph, feats)
        if sigma > 0.0:
            e = ad.add(e, ad.Tensor(rng.normal(0.0, sigma, size=e.shape)))
        if macro_cells is not None:
            e = ad.concat(e, ad.Tensor(macro_cells), axis=1)
        return node_means(graph, e)

    h = aggregate(emb_leaf)
    for i, w in enumerate(hidden):
        if propagation == "eq3" and i > 0:
            h = aggregate(h)
        h = ad.sigmoid(ad.matmul(h, w))
        if masks is not None:
            h = ad.mul(h, ad.Tensor(masks[i]))
    return ad.matmul(h, head)


def train_centralized(
    graph,
    labels,
    train_users,
    params0,
    emb0,
    cfg: ModelConfig,
    epochs,
    seed,
    embedding_grad="local",
    propagation="detached",
    sigma_location=0.0,
    macro_hidden=None,
    loss_tol=1e6,
):
    """Full-batch centralized training over the hypergraph.

    embedding_grad "local" takes each labeled user's own-loss gradient
    for its embedding row (mirroring the federated client rule); "full"
    is standard whole-graph training. propagation "detached" aggregates
    once and treats further layers as node-local; "eq3" re-aggregates at
    every layer (the classic multi-layer rule).
    """
    labels = np.asarray(labels, dtype=np.int64)
    train_users = np.asarray(train_users, dtype=np.int64)
    visited = graph.d_v > 0
    trainable = train_users[visited[train_users]]
    if trainable.size == 0:
        raise ValueError("no labeled user has any reported visit")
    if propagation not in ("detached", "eq3"):
        raise ValueError(f"unknown propagation {propagation!r}")

    seq = as_seed_sequence(seed)
    noise_rng, dropout_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    params = params0.copy()
    emb = np.array(emb0, dtype=np.float64, copy=True)
    opt_theta = fm.make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    opt_emb = fm.make_optimizer(cfg.optimizer, cfg.lr)
    macro_cells = (
        None
        if macro_hidden is None
        else macro_hidden[graph.edge_region, graph.edge_t]
    )
    loss_history = []

    for epoch in range(epochs):
        masks = None
        if cfg.dropout > 0.0 and cfg.n_layers > 0:
            masks = [
                (dropout_rng.random((graph.n_nodes, cfg.hidden_dim)) >= cfg.dropout)
                / (1.0 - cfg.dropout)
                for _ in range(cfg.n_layers)
            ]
        theta_leaves = [ad.Tensor(w, requires_grad=True) for w in params.arrays()]
        with ad.Tape() as tape:
            emb_leaf = ad.Tensor(emb, requires_grad=True)
            logits = _forward(
                graph, emb_leaf, theta_leaves, macro_cells, masks,
                sigma_location, noise_rng, propagation,
            )
            loss = ad.softmax_xent(logits, labels, mask=trainable, reduction="mean")
            wanted = list(theta_leaves) + [emb_leaf]
            grads = tape.gradients(loss, wanted)
            loss_val = loss.item()
            if not np.isfinite(loss_val) or loss_val > loss_tol:
                raise DivergenceError(f"non-finite or exploding loss at epoch {epoch}")
            loss_history.append(loss_val)

            if embedding_grad == "local":
                # each labeled user's unscaled own-loss gradient for its row
                losses_vec = ad.xent_rows(logits, labels)
                g_emb = np.zeros_like(emb)
                for u in trainable:
                    sel = np.zeros(graph.n_nodes)
                    sel[u] = 1.0
                    loss_u = ad.tsum(ad.mul(losses_vec, ad.Tensor(sel)))
                    g_emb[u] = tape.gradients(loss_u, [emb_leaf])[emb_leaf][u]
            elif embedding_grad == "full":
                g_emb = grads[emb_leaf]
            else:
                raise ValueError(f"unknown embedding_grad {embedding_grad!r}")

        new_arrays = [
            opt_theta.step(name, arr, grads[leaf], decay=True)
            for name, arr, leaf in zip(params.flat_names(), params.arrays(), theta_leaves)
        ]
        emb = opt_emb.step("emb", emb, g_emb)
        params.set_arrays(new_arrays)

    theta_final = [ad.Tensor(w) for w in params.arrays()]
    logits = _forward(
        graph, ad.Tensor(emb), theta_final, macro_cells, None,
        sigma_location, noise_rng, propagation,
    )
    probs = ad.softmax(logits).data
    edge_final = edge_means(graph, ad.Tensor(emb)).data
    server = ServerState(params=params, edge_embeddings=edge_final, epoch=epochs)
    return TrainResult(
        server=server,
        embeddings=emb,
        scores=probs[:, 1],
        probs=probs,
        loss_history=loss_history,
        transcript=None,
        skipped_users=np.flatnonzero(~visited),
    )
