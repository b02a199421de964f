"""The detached federated training protocol.

Each epoch: the server distributes model parameters, per-cell member
counts, and the previous edge embeddings; every client uploads one
(clipped, noised) contribution per claimed location cell, a zero-content
contribution for its decoy cells; the server re-aggregates the cell
embeddings from the uploads; clients download the cell embeddings (with
the macro hidden state concatenated), average them into a node feature,
run the local model, and upload DPSGD-sanitized parameter gradients plus
apply a local embedding step. The server averages gradients over the
submitting clients and steps the global parameters.

Every client computation is a pure function of (downloaded state, local
state); the loop below evaluates all clients batched, which is
observationally identical and keeps desk-scale runs fast. The standalone
per-client functions used by unit tests live alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .. import autodiff as ad
from ..errors import DivergenceError
from ..seeding import as_seed_sequence
from . import model as fm
from .privacy import PrivacyConfig, clip_coords


@dataclass
class ModelConfig:
    embed_dim: int = 16
    hidden_dim: int = 16
    n_layers: int = 2
    lr: float = 0.001
    dropout: float = 0.2
    weight_decay: float = 0.0005
    optimizer: str = "adam"
    n_classes: int = 2


@dataclass
class ServerState:
    """What the server holds between rounds."""

    params: fm.ModelParams
    edge_embeddings: np.ndarray  # (cells, embed_dim)
    epoch: int


@dataclass
class Transcript:
    """Recorded server-observable protocol messages.

    mode "norms": keep only per-visit upload-norm maxima (enough for the
    gradient-inference adversary). mode "full": keep entire payloads for
    the audit test; only sensible for small runs.
    """

    mode: str = "norms"
    update_norm_max: np.ndarray | None = None
    messages: list = field(default_factory=list)

    def note_upload_norms(self, norms):
        if self.update_norm_max is None:
            self.update_norm_max = norms.copy()
        else:
            np.maximum(self.update_norm_max, norms, out=self.update_norm_max)

    def add_message(self, kind, epoch, **payload):
        if self.mode == "full":
            self.messages.append({"kind": kind, "epoch": epoch, **payload})


@dataclass
class TrainResult:
    server: ServerState
    embeddings: np.ndarray
    scores: np.ndarray  # P(infected) per user
    probs: np.ndarray
    loss_history: list
    transcript: Transcript | None
    skipped_users: np.ndarray  # users with no reported visits


def _macro_per_cell(view, macro_hidden):
    if macro_hidden is None:
        return None
    return macro_hidden[view.cell_region, view.cell_t]


def _push_uploads(view, emb, privacy, rng, transcript, per_visit_noise, epoch):
    """One round of client contribution uploads, aggregated per cell.

    Returns the new edge embedding matrix. Real visits contribute
    clip(e_u / N_obs); decoy visits contribute zero content; every upload
    carries Gaussian noise of scale sigma_location. When per-visit noise
    is not required (no adversary recording, no full transcript), the
    per-cell noise sum is drawn directly from its exact distribution
    N(0, sigma^2 * uploads_per_cell).
    """
    f = emb.shape[1]
    real = view.visit_is_real
    content = emb[view.visit_user[real]] / view.n_obs[view.visit_cell[real]][:, None]
    clip_mask = None
    if np.isfinite(privacy.clip_location):
        clip_mask = np.abs(content) < privacy.clip_location
        content = clip_coords(content, privacy.clip_location)
    edges = np.zeros((view.n_cells, f))
    np.add.at(edges, view.visit_cell[real], content)
    sigma = privacy.sigma_location
    if per_visit_noise:
        uploads = np.zeros((view.n_visits, f))
        uploads[real] = content
        if sigma > 0.0:
            uploads += rng.normal(0.0, sigma, size=uploads.shape)
        if transcript is not None:
            transcript.note_upload_norms(np.linalg.norm(uploads, axis=1))
            transcript.add_message(
                "location_uploads",
                epoch=epoch,
                visit_user=view.visit_user.copy(),
                visit_region=view.visit_region.copy(),
                visit_t=view.visit_t.copy(),
                values=uploads.copy(),
            )
        edges = np.zeros((view.n_cells, f))
        np.add.at(edges, view.visit_cell, uploads)
    elif sigma > 0.0:
        edges += rng.normal(0.0, 1.0, size=edges.shape) * (
            sigma * np.sqrt(view.n_obs)[:, None]
        )
    return edges, clip_mask


def _embedding_coefficients(view, clip_mask, embed_dim):
    """d x_u / d e_u for each user (per coordinate when clipping bites)."""
    real = view.visit_is_real
    w_over_n = view.weight[real] / view.n_obs[view.visit_cell[real]]
    users = view.visit_user[real]
    if clip_mask is None:
        coef = np.bincount(users, weights=w_over_n, minlength=view.n_users)
        return coef[:, None]
    coef = np.zeros((view.n_users, embed_dim))
    for f in range(embed_dim):
        coef[:, f] = np.bincount(
            users, weights=w_over_n * clip_mask[:, f], minlength=view.n_users
        )
    return coef


def train(
    view,
    labels,
    train_users,
    params0,
    emb0,
    cfg: ModelConfig,
    privacy: PrivacyConfig,
    epochs,
    seed,
    macro_hidden=None,
    transcript_mode=None,
    loss_tol=1e6,
):
    """Run the full federated loop; deterministic per seed.

    ``labels`` is the (N,) ground-truth vector; only entries for
    ``train_users`` are ever read (the labeled split). ``macro_hidden``
    is an (M, T, F_m) array of frozen macroscopic hidden states or None.
    """
    labels = np.asarray(labels, dtype=np.int64)
    train_users = np.asarray(train_users, dtype=np.int64)
    n_users = view.n_users
    visited = view.reported_intervals > 0
    skipped = np.flatnonzero(~visited)
    trainable = train_users[visited[train_users]]
    if trainable.size == 0:
        raise ValueError("no labeled user has any reported visit")

    seq = as_seed_sequence(seed)
    noise_rng, dpsgd_rng, dropout_rng = (
        np.random.default_rng(s) for s in seq.spawn(3)
    )

    params = params0.copy()
    emb = np.array(emb0, dtype=np.float64, copy=True)
    opt_theta = fm.make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    opt_emb = fm.make_optimizer(cfg.optimizer, cfg.lr)

    transcript = Transcript(mode=transcript_mode) if transcript_mode else None
    per_visit_noise = transcript is not None
    macro_cells = _macro_per_cell(view, macro_hidden)
    targets = labels[trainable]
    loss_history = []

    for epoch in range(epochs):
        if transcript is not None:
            transcript.add_message(
                "distribute",
                epoch=epoch,
                theta=[w.copy() for w in params.arrays()],
                n_obs=view.n_obs.copy(),
            )
        edges, clip_mask = _push_uploads(
            view, emb, privacy, noise_rng, transcript, per_visit_noise, epoch
        )
        if transcript is not None:
            transcript.add_message(
                "edge_state",
                epoch=epoch,
                cell_region=view.cell_region.copy(),
                cell_t=view.cell_t.copy(),
                values=edges.copy(),
            )
        feats = edges if macro_cells is None else np.concatenate([edges, macro_cells], axis=1)
        x = view.agg_matrix @ feats

        masks = None
        if cfg.dropout > 0.0 and cfg.n_layers > 0:
            masks = [
                (dropout_rng.random((trainable.size, cfg.hidden_dim)) >= cfg.dropout)
                / (1.0 - cfg.dropout)
                for _ in range(cfg.n_layers)
            ]
        grads, grad_x, losses = fm.per_user_param_grads(
            params, x[trainable], targets, masks
        )
        loss = float(losses.mean())
        if not np.isfinite(loss) or loss > loss_tol:
            raise DivergenceError(f"non-finite or exploding loss at epoch {epoch}: {loss}")
        loss_history.append(loss)

        # DPSGD: per-client norm clip, noise, then average on the server
        flat = np.concatenate([g.reshape(trainable.size, -1) for g in grads], axis=1)
        if np.isfinite(privacy.clip_gradient):
            norms = np.linalg.norm(flat, axis=1)
            scale = np.minimum(1.0, privacy.clip_gradient / np.maximum(norms, 1e-300))
            flat = flat * scale[:, None]
        if privacy.sigma_gradient > 0.0:
            flat = flat + dpsgd_rng.normal(0.0, privacy.sigma_gradient, size=flat.shape)
        if transcript is not None:
            transcript.add_message(
                "gradients", epoch=epoch, users=trainable.copy(), values=flat.copy()
            )
        mean_flat = flat.mean(axis=0)
        offset = 0
        new_arrays = []
        for name, arr in zip(params.flat_names(), params.arrays()):
            g = mean_flat[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size
            new_arrays.append(opt_theta.step(name, arr, g, decay=True))

        # local embedding steps from each client's own-loss gradient
        coef = _embedding_coefficients(view, clip_mask, cfg.embed_dim)
        g_emb = np.zeros_like(emb)
        g_emb[trainable] = coef[trainable] * grad_x[:, : cfg.embed_dim]
        emb = opt_emb.step("emb", emb, g_emb)
        params.set_arrays(new_arrays)

    # deployment pass: final aggregation with final embeddings and weights
    edges, _ = _push_uploads(
        view, emb, privacy, noise_rng, transcript, per_visit_noise, epochs
    )
    feats = edges if macro_cells is None else np.concatenate([edges, macro_cells], axis=1)
    x = view.agg_matrix @ feats
    probs = fm.predict_proba(params, x)
    server = ServerState(params=params, edge_embeddings=edges, epoch=epochs)
    return TrainResult(
        server=server,
        embeddings=emb,
        scores=probs[:, 1],
        probs=probs,
        loss_history=loss_history,
        transcript=transcript,
        skipped_users=skipped,
    )


# ---------------------------------------------------------------------------
# standalone per-client pieces (unit-test surface mirroring the batched loop)


@dataclass
class ClientState:
    """One client's local data: its trajectory, decoys, and embedding."""

    user_id: int
    real_cells: list  # [(region, t)] reported visits
    pseudo_cells: list  # [(region, t)] decoy claims (may repeat real cells)
    embedding: np.ndarray
    label: int | None = None


@dataclass
class ClientResult:
    status: str
    x: np.ndarray | None = None
    prediction: np.ndarray | None = None
    grad_params: list | None = None
    new_embedding: np.ndarray | None = None
    loss: float | None = None


def client_update(
    state: ClientState,
    edge_embeddings,
    params,
    n_obs,
    lr,
    macro_states=None,
):
    """One client's local round: aggregate, predict, and (if labeled)
    compute gradients and take the embedding step.

    ``edge_embeddings`` and ``n_obs`` map (region, t) cells to the
    downloaded vectors / member counts; ``macro_states`` optionally maps
    cells to frozen macroscopic hidden vectors.
    """
    cells_by_t = {}
    for r, t in list(state.real_cells) + list(state.pseudo_cells):
        cells_by_t.setdefault(t, set()).add((r, t))
    if not cells_by_t:
        return ClientResult(status="no_visits")
    t_u = len(cells_by_t)

    f = state.embedding.size
    width = f if macro_states is None else f + next(iter(macro_states.values())).size
    x = np.zeros(width)
    real_set = set(state.real_cells)
    coef = 0.0
    for t, cells in cells_by_t.items():
        m_ut = len(cells)
        for cell in cells:
            vec = np.asarray(edge_embeddings[cell], dtype=np.float64)
            if macro_states is not None:
                vec = np.concatenate([vec, macro_states[cell]])
            x += vec / (t_u * m_ut)
            if cell in real_set:
                coef += 1.0 / (t_u * m_ut * n_obs[cell])

    prediction = ad.softmax(fm.forward_logits(params, x[None, :])).data[0]
    if state.label is None:
        return ClientResult(status="ok", x=x, prediction=prediction)

    theta_leaves = [ad.Tensor(w, requires_grad=True) for w in params.arrays()]
    leaf_params = fm.ModelParams(hidden=theta_leaves[:-1], head=theta_leaves[-1])
    with ad.Tape() as tape:
        x_leaf = ad.Tensor(x[None, :], requires_grad=True)
        logits = fm.forward_logits(leaf_params, x_leaf)
        loss = ad.softmax_xent(logits, np.array([state.label]))
        grads = tape.gradients(loss, theta_leaves + [x_leaf])
    g_params = [grads[t] for t in theta_leaves]
    g_emb = coef * grads[x_leaf][0, :f]
    return ClientResult(
        status="ok",
        x=x,
        prediction=prediction,
        grad_params=g_params,
        new_embedding=state.embedding - lr * g_emb,
        loss=loss.item(),
    )
