"""Client-side prediction model and optimizers.

The model maps a user's aggregated cell features through zero or more
sigmoid hidden layers and a linear head into class logits; probabilities
come from a softmax (no bias terms). Parameters are initialized from
seeded uniform(-0.1, 0.1) draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad


@dataclass
class ModelParams:
    """Hidden-layer weights plus the linear classification head."""

    hidden: list  # list of (in, hidden) float64 arrays
    head: np.ndarray  # (hidden_or_in, n_classes)

    def copy(self):
        return ModelParams([w.copy() for w in self.hidden], self.head.copy())

    def flat_names(self):
        return [f"hidden{i}" for i in range(len(self.hidden))] + ["head"]

    def arrays(self):
        return list(self.hidden) + [self.head]

    def set_arrays(self, arrays):
        self.hidden = list(arrays[:-1])
        self.head = arrays[-1]

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())


def init_params(rng, in_dim, hidden_dim, n_layers, n_classes=2):
    hidden = []
    width = in_dim
    for _ in range(n_layers):
        hidden.append(rng.uniform(-0.1, 0.1, size=(width, hidden_dim)))
        width = hidden_dim
    head = rng.uniform(-0.1, 0.1, size=(width, n_classes))
    return ModelParams(hidden=hidden, head=head)


def init_embeddings(rng, n_users, embed_dim):
    return rng.uniform(-0.1, 0.1, size=(n_users, embed_dim))


def forward_logits(params, x, dropout_masks=None):
    """Traced forward pass from aggregated features to logits.

    ``dropout_masks`` holds one pre-scaled (inverted dropout) mask per
    hidden layer, or None for evaluation mode.
    """
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    for i, w in enumerate(params.hidden):
        w_t = w if isinstance(w, ad.Tensor) else ad.Tensor(w)
        h = ad.sigmoid(ad.matmul(h, w_t))
        if dropout_masks is not None:
            h = ad.mul(h, ad.Tensor(dropout_masks[i]))
    head = params.head if isinstance(params.head, ad.Tensor) else ad.Tensor(params.head)
    return ad.matmul(h, head)


def predict_proba(params, x):
    """Evaluation-mode class probabilities (no tape, no dropout)."""
    return ad.softmax(forward_logits(params, x)).data


def per_user_param_grads(params, x_rows, targets, dropout_masks=None):
    """Per-row gradients of each row's cross-entropy loss w.r.t. Theta.

    Replicates the parameters once per row so a single backward pass of
    the summed loss yields unscaled per-user gradients; the aggregated
    feature rows also receive their per-user gradients.

    Returns (per-user grads aligned with ``params.arrays()``, grad of x,
    per-row losses).
    """
    n = x_rows.shape[0]
    reps = [
        ad.Tensor(np.repeat(w[None, :, :], n, axis=0), requires_grad=True)
        for w in params.arrays()
    ]
    with ad.Tape() as tape:
        x_leaf = ad.Tensor(x_rows, requires_grad=True)
        cur = x_leaf
        for i in range(len(params.hidden)):
            cur3 = _as_batch_col(cur)
            cur = _squeeze_mid(ad.bmm(cur3, reps[i]))
            cur = ad.sigmoid(cur)
            if dropout_masks is not None:
                cur = ad.mul(cur, ad.Tensor(dropout_masks[i]))
        logits = _squeeze_mid(ad.bmm(_as_batch_col(cur), reps[-1]))
        losses = ad.xent_rows(logits, targets)
        total = ad.tsum(losses)
        grads = tape.gradients(total, reps + [x_leaf])
    per_user = [grads[r] for r in reps]
    return per_user, grads[x_leaf], losses.data


def _as_batch_col(t):
    """(n, d) -> (n, 1, d) view as a traced reshape."""
    data = t.data[:, None, :]
    out = ad.Tensor(data, requires_grad=t.requires_grad, _unsafe=True)
    tape = ad._active_tape()
    if tape is not None and t.requires_grad:
        tape._record(out, (t,), lambda g: (g[:, 0, :],))
    return out


def _squeeze_mid(t):
    """(n, 1, d) -> (n, d) as a traced reshape."""
    data = t.data[:, 0, :]
    out = ad.Tensor(data, requires_grad=t.requires_grad, _unsafe=True)
    tape = ad._active_tape()
    if tape is not None and t.requires_grad:
        tape._record(out, (t,), lambda g: (g[:, None, :],))
    return out


class PlainSGD:
    """Theta <- Theta - lr * (grad + weight_decay * Theta)."""

    def __init__(self, lr, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, key, value, grad, decay=False):
        g = grad + (self.weight_decay * value if decay else 0.0)
        return value - self.lr * g


class Adam:
    """Adam with per-key first/second moment state."""

    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {}
        self._v = {}
        self._t = {}

    def step(self, key, value, grad, decay=False):
        g = grad + (self.weight_decay * value if decay else 0.0)
        m = self._m.get(key)
        if m is None:
            m = np.zeros_like(value)
            self._v[key] = np.zeros_like(value)
            self._t[key] = 0
        v = self._v[key]
        self._t[key] += 1
        t = self._t[key]
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self._m[key], self._v[key] = m, v
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name, lr, weight_decay=0.0):
    if name == "gd":
        return PlainSGD(lr, weight_decay)
    if name == "adam":
        return Adam(lr, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
