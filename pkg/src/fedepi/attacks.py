"""Server-side adversaries used to quantify the privacy budget.

The gradient-norm adversary watches the per-location upload norms: decoy
uploads carry zero content, so without noise they are exactly
distinguishable; it picks the largest-norm candidate per (user,
interval). The localization adversary runs a log-space forward-backward
pass over each user's candidate sets under the population mobility prior
and picks the posterior mode per interval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mobility import UNREPORTED


@dataclass
class ObservationLog:
    """Per (user, interval) candidate location lists, real index hidden."""

    regions: np.ndarray  # (N, T, K) candidate regions, UNREPORTED where absent
    real_pos: np.ndarray  # (N, T) ground truth index, harness-only

    @classmethod
    def from_view(cls, view):
        return cls(regions=view.obs_regions, real_pos=view.obs_real_pos)

    @property
    def n_candidates(self):
        return self.regions.shape[2]


@dataclass
class AttackReport:
    attack: str
    params: dict
    error_rate: float
    n_decisions: int
    detail: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {
                "attack": self.attack,
                "params": self.params,
                "error_rate": self.error_rate,
                "n_decisions": self.n_decisions,
            },
            sort_keys=True,
        )


def gradient_inference_attack(view, transcript, threshold=None):
    """Pick the max-norm candidate per (user, interval) cell.

    ``transcript.update_norm_max`` holds, per observed visit, the largest
    upload 2-norm seen over training. Ties break toward the lowest region
    id. When ``threshold`` is given, the per-candidate above/below
    classification error is reported as detail.
    """
    if transcript is None or transcript.update_norm_max is None:
        raise ValueError("transcript with recorded upload norms required")
    norms = transcript.update_norm_max
    if norms.size != view.n_visits or norms.size == 0:
        raise ValueError("transcript does not match the observed view")

    group = view.visit_user * view.n_intervals + view.visit_t
    # lexsort: group asc, norm desc, region asc -> first row per group wins
    order = np.lexsort((view.visit_region, -norms, group))
    g_sorted = group[order]
    first = np.ones(g_sorted.size, dtype=bool)
    first[1:] = g_sorted[1:] != g_sorted[:-1]
    picked = order[first]
    hits = view.visit_is_real[picked]
    n_decisions = int(first.sum())
    error = 1.0 - hits.sum() / n_decisions

    detail = {}
    if threshold is not None:
        above = norms > threshold
        mis = (above != view.visit_is_real).sum()
        detail["threshold_error"] = float(mis / norms.size)
        detail["threshold"] = float(threshold)
    return AttackReport(
        attack="gradient_inference",
        params={"threshold": threshold},
        error_rate=float(error),
        n_decisions=n_decisions,
        detail=detail,
    )


def _forward_backward_log(cand_list, log_init, log_trans):
    """Log-space forward-backward over per-step candidate sets.

    cand_list[i] holds the sorted candidate regions of observed step i;
    emissions are indicators on set membership, so the recursion lives on
    the candidate trellis only. Returns per-step posteriors.
    """
    n_steps = len(cand_list)
    alphas, betas = [], []
    alpha = log_init[cand_list[0]]
    if np.all(np.isneginf(alpha)):
        raise AssertionError("forward mass vanished at the first step")
    alphas.append(alpha)
    for i in range(1, n_steps):
        trans = log_trans[np.ix_(cand_list[i - 1], cand_list[i])]
        alpha = _logsumexp_cols(alphas[-1][:, None] + trans)
        if np.all(np.isneginf(alpha)):
            raise AssertionError(f"forward mass vanished at step {i}")
        alphas.append(alpha)
    beta = np.zeros(cand_list[-1].size)
    betas.append(beta)
    for i in range(n_steps - 2, -1, -1):
        trans = log_trans[np.ix_(cand_list[i], cand_list[i + 1])]
        beta = _logsumexp_rows(trans + betas[0][None, :])
        betas.insert(0, beta)
    posteriors = []
    for a, b in zip(alphas, betas):
        lp = a + b
        lp -= _logsumexp(lp)
        posteriors.append(np.exp(lp))
    return posteriors


def _logsumexp(v):
    m = v.max()
    if np.isneginf(m):
        return m
    return m + np.log(np.exp(v - m).sum())


def _logsumexp_cols(mat):
    m = mat.max(axis=0)
    safe = np.where(np.isneginf(m), 0.0, m)
    out = safe + np.log(np.exp(mat - safe[None, :]).sum(axis=0))
    return np.where(np.isneginf(m), -np.inf, out)


def _logsumexp_rows(mat):
    m = mat.max(axis=1)
    safe = np.where(np.isneginf(m), 0.0, m)
    out = safe + np.log(np.exp(mat - safe[:, None]).sum(axis=1))
    return np.where(np.isneginf(m), -np.inf, out)


def localization_attack(obs, visit_dist, transition, return_posteriors=False):
    """HMM inference of the true location per interval.

    States are regions; the initial distribution is the population visit
    distribution at the user's first reported interval, transitions are
    the aggregate mobility rows (consecutive reported intervals are
    treated as adjacent steps, matching how decoys resume across gaps),
    and the emission is the indicator of candidate-set membership. The
    adversary picks the posterior mode, ties toward the lowest region id.
    """
    regions = obs.regions
    n_users, n_t, _ = regions.shape
    with np.errstate(divide="ignore"):
        log_trans = np.log(np.asarray(transition, dtype=np.float64))
        log_init_all = np.log(np.asarray(visit_dist, dtype=np.float64))
    errors = 0
    decisions = 0
    posteriors_out = [] if return_posteriors else None
    for u in range(n_users):
        steps = [t for t in range(n_t) if regions[u, t, 0] != UNREPORTED]
        if not steps:
            if return_posteriors:
                posteriors_out.append([])
            continue
        cand_list = [np.unique(regions[u, t]) for t in steps]
        post = _forward_backward_log(cand_list, log_init_all[steps[0]], log_trans)
        if return_posteriors:
            posteriors_out.append(list(zip(steps, cand_list, post)))
        for i, t in enumerate(steps):
            pick = cand_list[i][int(np.argmax(post[i]))]
            true_region = regions[u, t, obs.real_pos[u, t]]
            decisions += 1
            if pick != true_region:
                errors += 1
    if decisions == 0:
        raise ValueError("observation log contains no reported intervals")
    report = AttackReport(
        attack="localization",
        params={},
        error_rate=errors / decisions,
        n_decisions=decisions,
    )
    if return_posteriors:
        return report, posteriors_out
    return report


def write_sweep_csv(path, rows):
    """Privacy-utility sweep rows: kind,n_p,sigma_l,attack_error,auc,f1."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind,n_p,sigma_l,attack_error,auc,f1\n")
        for row in rows:
            fh.write(
                f"{row['kind']},{row['n_p']},{float(row['sigma_l'])!r},"
                f"{float(row['attack_error'])!r},{float(row['auc'])!r},{float(row['f1'])!r}\n"
            )
