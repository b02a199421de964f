"""Region-level case forecasting with a dynamic-graph diffusion GRU.

A time-varying flow graph (transition counts between consecutive
intervals) drives a diffusion convolution inside each GRU gate:
conv(Z) = sum_k A_fwd^k Z Theta_fk + A_bwd^k Z Theta_bk (k < K, the k=0
identity term shared once), with A_fwd/A_bwd the row-normalized flow
matrix and its transpose. The encoder is trained sequence-to-one against
the case value ``horizon`` intervals past the window; its per-interval
hidden states are exported for the cooperative coupling and are never
written to by the microscopic model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .errors import DivergenceError
from .fedtrain.model import make_optimizer
from .mobility import UNREPORTED


@dataclass
class FlowGraph:
    """Per-interval directed transition counts between regions."""

    matrices: list  # T-1 sparse (M, M) count matrices
    n_regions: int

    @property
    def n_steps(self):
        return len(self.matrices)


def build_flow_graph(traces, n_regions):
    """Count r -> r' moves between consecutive reported intervals.

    ``traces`` is any (rows, T) int array with UNREPORTED gaps; rows are
    independent trajectories (a Population's visits, or the server's
    observed trace stack).
    """
    traces = np.asarray(traces)
    if traces.shape[1] < 2:
        raise ValueError("need at least two intervals to build a flow graph")
    mats = []
    for t in range(traces.shape[1] - 1):
        a, b = traces[:, t], traces[:, t + 1]
        ok = (a != UNREPORTED) & (b != UNREPORTED)
        mat = sparse.coo_matrix(
            (np.ones(int(ok.sum())), (a[ok], b[ok])), shape=(n_regions, n_regions)
        )
        mats.append(mat.tocsr())
        mats[-1].sum_duplicates()
    return FlowGraph(matrices=mats, n_regions=n_regions)


def _row_normalized(mat):
    """Row-stochastic version; zero-out-degree rows become self-loops."""
    mat = mat.tocsr().astype(np.float64)
    deg = np.asarray(mat.sum(axis=1)).ravel()
    zero = deg == 0
    inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, deg))
    out = sparse.diags(inv) @ mat
    if np.any(zero):
        idx = np.flatnonzero(zero)
        out = out + sparse.coo_matrix(
            (np.ones(idx.size), (idx, idx)), shape=mat.shape
        ).tocsr()
    return out.tocsr()


def supports_for_step(flow, t):
    """Forward and backward diffusion supports for interval t -> t+1."""
    w = flow.matrices[t]
    return _row_normalized(w), _row_normalized(w.T.tocsr())


@dataclass
class DCGRUParams:
    """Gate weights per diffusion term plus biases and the readout."""

    gates: dict  # {"r"|"u"|"c": list of (in_dim, hidden) arrays}
    biases: dict  # {"r"|"u"|"c": (hidden,) arrays}
    w_out: np.ndarray  # (hidden, 1)
    b_out: np.ndarray  # (1,)
    k_diffusion: int

    def arrays(self):
        out = []
        for g in ("r", "u", "c"):
            out.extend(self.gates[g])
            out.append(self.biases[g])
        out.extend([self.w_out, self.b_out])
        return out

    def set_arrays(self, arrays):
        it = iter(arrays)
        n_terms = len(self.gates["r"])
        for g in ("r", "u", "c"):
            self.gates[g] = [next(it) for _ in range(n_terms)]
            self.biases[g] = next(it)
        self.w_out = next(it)
        self.b_out = next(it)

    def copy(self):
        return DCGRUParams(
            gates={g: [w.copy() for w in ws] for g, ws in self.gates.items()},
            biases={g: b.copy() for g, b in self.biases.items()},
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
            k_diffusion=self.k_diffusion,
        )


def init_dcgru(rng, hidden_dim, k_diffusion, in_dim=1):
    n_terms = 1 + 2 * (k_diffusion - 1)
    width = in_dim + hidden_dim
    gates = {
        g: [rng.uniform(-0.1, 0.1, size=(width, hidden_dim)) for _ in range(n_terms)]
        for g in ("r", "u", "c")
    }
    biases = {g: np.zeros(hidden_dim) for g in ("r", "u", "c")}
    w_out = rng.uniform(-0.1, 0.1, size=(hidden_dim, 1))
    return DCGRUParams(
        gates=gates, biases=biases, w_out=w_out, b_out=np.zeros(1), k_diffusion=k_diffusion
    )


def _diffusion_terms(z, support_fwd, support_bwd, k_diffusion):
    """[Z, A_f Z, A_b Z, A_f^2 Z, ...] up to k_diffusion - 1 hops."""
    terms = [z]
    cur_f, cur_b = z, z
    for _ in range(k_diffusion - 1):
        cur_f = ad.spmm(support_fwd, cur_f)
        cur_b = ad.spmm(support_bwd, cur_b)
        terms.extend([cur_f, cur_b])
    return terms


def _gate(terms, weights, bias):
    acc = ad.matmul(terms[0], ad.Tensor(weights[0]) if not isinstance(weights[0], ad.Tensor) else weights[0])
    for term, w in zip(terms[1:], weights[1:]):
        w_t = w if isinstance(w, ad.Tensor) else ad.Tensor(w)
        acc = ad.add(acc, ad.matmul(term, w_t))
    b_t = bias if isinstance(bias, ad.Tensor) else ad.Tensor(bias)
    return ad.add(acc, b_t)


def dcgru_cell(x, h_prev, support_fwd, support_bwd, params):
    """One recurrent step; all arguments may be stacked over windows.

    x: (rows, in_dim) case inputs; h_prev: (rows, hidden); the supports
    are (rows, rows) sparse constants (block-diagonal when batched).
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    h_prev = h_prev if isinstance(h_prev, ad.Tensor) else ad.Tensor(h_prev)
    z = ad.concat(x, h_prev, axis=1)
    terms = _diffusion_terms(z, support_fwd, support_bwd, params.k_diffusion)
    r = ad.sigmoid(_gate(terms, params.gates["r"], params.biases["r"]))
    u = ad.sigmoid(_gate(terms, params.gates["u"], params.biases["u"]))
    zc = ad.concat(x, ad.mul(r, h_prev), axis=1)
    terms_c = _diffusion_terms(zc, support_fwd, support_bwd, params.k_diffusion)
    c = ad.tanh(_gate(terms_c, params.gates["c"], params.biases["c"]))
    one_minus_u = ad.sub(ad.Tensor(np.ones(u.shape)), u)
    return ad.add(ad.mul(u, h_prev), ad.mul(one_minus_u, c))


def upsample_daily(cases, n_intervals, intervals_per_day):
    """Piecewise-constant daily -> interval upsampling."""
    idx = np.minimum(np.arange(n_intervals) // intervals_per_day, cases.shape[1] - 1)
    return cases[:, idx].astype(np.float64)


@dataclass
class MacroResult:
    params: DCGRUParams
    loss_history: list
    norm_mean: float
    norm_std: float


def _window_supports(flow, starts, encoder_len):
    """Block-diagonal supports per encoder step, batched over windows."""
    sup = []
    for i in range(encoder_len):
        fwd = sparse.block_diag(
            [supports_for_step(flow, s + i)[0] for s in starts], format="csr"
        )
        bwd = sparse.block_diag(
            [supports_for_step(flow, s + i)[1] for s in starts], format="csr"
        )
        sup.append((fwd, bwd))
    return sup


def train_macro(
    flow,
    cases_intervals,
    horizon,
    encoder_len,
    epochs,
    seed,
    hidden_dim=8,
    k_diffusion=2,
    lr=0.01,
    loss_tol=1e9,
    max_windows=32,
):
    """Sequence-to-one MSE training over sliding windows.

    ``cases_intervals`` is the (M, T) interval-aligned case matrix; the
    window starting at s encodes intervals [s, s + encoder_len) and
    regresses the (normalized) cases at s + encoder_len - 1 + horizon.
    When more than ``max_windows`` starts exist, an evenly spaced subset
    is trained on to bound the batched support matrices.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    m, n_t = cases_intervals.shape
    last_start = n_t - encoder_len - horizon
    if last_start < 0 or flow.n_steps < n_t - 1:
        raise ValueError("not enough history for the requested window layout")
    starts = np.arange(last_start + 1)
    if starts.size > max_windows:
        starts = starts[np.linspace(0, starts.size - 1, max_windows).astype(int)]
    mean = float(cases_intervals.mean())
    std = float(cases_intervals.std())
    std = std if std > 0 else 1.0
    normed = (cases_intervals - mean) / std

    rng = np.random.default_rng(seed)
    params = init_dcgru(rng, hidden_dim, k_diffusion)
    opt = make_optimizer("adam", lr)
    sup = _window_supports(flow, starts, encoder_len)
    rows = starts.size * m
    targets = normed[:, starts + encoder_len - 1 + horizon].T.reshape(rows, 1)

    loss_history = []
    for epoch in range(epochs):
        leaves = [ad.Tensor(w, requires_grad=True) for w in params.arrays()]
        shadow = params.copy()
        shadow.set_arrays(leaves)
        with ad.Tape() as tape:
            h = ad.Tensor(np.zeros((rows, hidden_dim)))
            for i in range(encoder_len):
                x_i = normed[:, starts + i].T.reshape(rows, 1)
                h = dcgru_cell(ad.Tensor(x_i), h, sup[i][0], sup[i][1], shadow)
            pred = ad.add(ad.matmul(h, shadow.w_out), shadow.b_out)
            err = ad.sub(pred, ad.Tensor(targets))
            loss = ad.tmean(ad.mul(err, err))
            grads = tape.gradients(loss, leaves)
        loss_val = loss.item()
        if not np.isfinite(loss_val) or loss_val > loss_tol:
            raise DivergenceError(f"macro training diverged at epoch {epoch}")
        loss_history.append(loss_val)
        new_arrays = [
            opt.step(str(i), arr, grads[leaf])
            for i, (arr, leaf) in enumerate(zip(params.arrays(), leaves))
        ]
        params.set_arrays(new_arrays)
    return MacroResult(params=params, loss_history=loss_history, norm_mean=mean, norm_std=std)


def export_hidden(result, flow, cases_intervals, occupied=None):
    """Encoder hidden state per (region, interval) from one full pass.

    Read-only with respect to training state; deterministic. ``occupied``
    optionally masks (M, T) cells without a hyperedge to zero vectors.
    """
    m, n_t = cases_intervals.shape
    normed = (cases_intervals - result.norm_mean) / result.norm_std
    hidden_dim = result.params.w_out.shape[0]
    out = np.zeros((m, n_t, hidden_dim))
    h = ad.Tensor(np.zeros((m, hidden_dim)))
    for t in range(n_t):
        step = min(t, flow.n_steps - 1)
        fwd, bwd = supports_for_step(flow, step)
        h = dcgru_cell(ad.Tensor(normed[:, t : t + 1]), h, fwd, bwd, result.params)
        out[:, t, :] = h.data
    if occupied is not None:
        out[~occupied] = 0.0
    return out


def forecast(result, flow, cases_intervals, encoder_len, horizon):
    """Denormalized per-region predictions for every valid window start.

    Returns (starts, predictions) where predictions[w, r] targets
    interval starts[w] + encoder_len - 1 + horizon.
    """
    m, n_t = cases_intervals.shape
    last_start = n_t - encoder_len - horizon
    if last_start < 0:
        raise ValueError("not enough history to forecast")
    starts = np.arange(last_start + 1)
    normed = (cases_intervals - result.norm_mean) / result.norm_std
    sup = _window_supports(flow, starts, encoder_len)
    rows = starts.size * m
    h = ad.Tensor(np.zeros((rows, result.params.w_out.shape[0])))
    for i in range(encoder_len):
        x_i = normed[:, starts + i].T.reshape(rows, 1)
        h = dcgru_cell(ad.Tensor(x_i), h, sup[i][0], sup[i][1], result.params)
    pred = (h.data @ result.params.w_out + result.params.b_out).reshape(starts.size, m)
    return starts, pred * result.norm_std + result.norm_mean


def export_forecast_csv(path, starts, predictions, encoder_len, horizon, intervals_per_day):
    """Per-day forecast CSV; reports the prediction targeting the first
    interval of each day where one exists."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("region_id,day,predicted_new_cases\n")
        for w, s in enumerate(starts):
            target = s + encoder_len - 1 + horizon
            if target % intervals_per_day != 0:
                continue
            day = target // intervals_per_day
            for r in range(predictions.shape[1]):
                fh.write(f"{r},{day},{float(predictions[w, r])!r}\n")


def export_hidden_npz(path, hidden):
    np.savez_compressed(path, version=1, hidden=hidden)
