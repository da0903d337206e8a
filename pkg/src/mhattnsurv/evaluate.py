"""Survival metrics and head-level model analysis.

Metrics here favor transparent arithmetic over speed: the concordance
index counts pairs with integers, and the IPCW AUC accumulates its double
sum in dataset index order, so both can be checked against brute-force
enumeration bit for bit. Everything is deterministic given predictions and
labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2 as _chi2

from . import model as _model
from .errors import DegenerateWeightError, DimensionError, DomainError, NumericError
from .numerics import RngStream, sample_patches


def _validate_labels(times, events) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events)
    if t.ndim != 1 or e.shape != t.shape:
        raise DimensionError(
            f"times and events must be equal-length vectors, got {t.shape} and {e.shape}"
        )
    if t.size == 0:
        raise DomainError("no records")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise DomainError("times must be finite and positive")
    if not np.all(np.isin(e, (0, 1))):
        raise DomainError("events must be 0 or 1")
    return t, e.astype(np.int64)


def _validate_risks(risks, n: int) -> np.ndarray:
    r = np.asarray(risks, dtype=np.float64)
    if r.shape != (n,):
        raise DimensionError(f"risks must have shape ({n},), got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise NumericError("risks contain non-finite values")
    return r


def c_index(risks, times, events) -> float:
    """Harrell concordance index.

    Pair (i, j) is comparable iff t_i < t_j and patient i had the event;
    it is concordant when the earlier-event patient got the higher risk,
    and tied risks count one half. Counts are integers, so the result is
    exactly the brute-force pair enumeration.
    """
    t, e = _validate_labels(times, events)
    r = _validate_risks(risks, t.size)
    comparable = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    total = int(np.count_nonzero(comparable))
    if total == 0:
        raise DomainError("no comparable pairs")
    concordant = int(np.count_nonzero(comparable & (r[:, None] > r[None, :])))
    tied = int(np.count_nonzero(comparable & (r[:, None] == r[None, :])))
    return (2 * concordant + tied) / (2 * total)


@dataclass
class KMCurve:
    """Product-limit survival estimate as a right-continuous step function.

    ``times`` holds the distinct event times in ascending order;
    ``survival[k]`` is S just after times[k]; ``at_risk``/``deaths`` are
    the risk-set size and event count at each step. S starts at 1.
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    deaths: np.ndarray
    n_start: int

    def survival_at(self, t: float) -> float:
        """S(t), right-continuous: drops at event times count at t itself."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def survival_before(self, t: float) -> float:
        """Left limit S(t-): only drops strictly before t count."""
        idx = int(np.searchsorted(self.times, t, side="left")) - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def km_estimator(times, events) -> KMCurve:
    """Kaplan-Meier estimator S(t) = prod_{t_k <= t} (1 - d_k / n_k).

    Records censored exactly at an event time still count as at risk for
    that time. With no events at all the curve stays at 1.
    """
    t, e = _validate_labels(times, events)
    event_times = np.unique(t[e == 1])
    at_risk = np.empty(event_times.size, dtype=np.int64)
    deaths = np.empty(event_times.size, dtype=np.int64)
    factors = np.empty(event_times.size, dtype=np.float64)
    for k, tau in enumerate(event_times):
        n_k = int(np.count_nonzero(t >= tau))
        d_k = int(np.count_nonzero((t == tau) & (e == 1)))
        at_risk[k] = n_k
        deaths[k] = d_k
        factors[k] = 1.0 - d_k / n_k
    return KMCurve(
        times=event_times,
        survival=np.cumprod(factors),
        at_risk=at_risk,
        deaths=deaths,
        n_start=t.size,
    )


def censoring_km(times, events) -> KMCurve:
    """KM estimate of the censoring survival function G (events flipped)."""
    t, e = _validate_labels(times, events)
    return km_estimator(t, 1 - e)


def logrank(groups) -> tuple[float, int, float]:
    """k-group log-rank test; returns (chi_square, dof, p).

    ``groups`` is a list of (times, events) pairs. At each distinct pooled
    event time the observed minus expected event counts accumulate along
    with the multivariate hypergeometric variance; the statistic is the
    quadratic form through a pseudo-inverse (the variance matrix has rank
    k - 1), with k - 1 degrees of freedom.
    """
    if len(groups) < 2:
        raise DomainError(f"log-rank needs >= 2 groups, got {len(groups)}")
    per_group = []
    for g, (gt, ge) in enumerate(groups):
        try:
            per_group.append(_validate_labels(gt, ge))
        except DomainError as exc:
            raise DomainError(f"group {g}: {exc}")
    k = len(per_group)
    t_all = np.concatenate([t for t, _ in per_group])
    e_all = np.concatenate([e for _, e in per_group])
    labels = np.concatenate(
        [np.full(t.size, g, dtype=np.int64) for g, (t, _) in enumerate(per_group)]
    )
    if not np.any(e_all == 1):
        raise DomainError("log-rank needs at least one event")
    observed = np.zeros(k)
    expected = np.zeros(k)
    variance = np.zeros((k, k))
    for tau in np.unique(t_all[e_all == 1]):
        at_risk = t_all >= tau
        n = int(np.count_nonzero(at_risk))
        dying = at_risk & (t_all == tau) & (e_all == 1)
        d = int(np.count_nonzero(dying))
        n_g = np.array(
            [np.count_nonzero(at_risk & (labels == g)) for g in range(k)], dtype=np.float64
        )
        d_g = np.array(
            [np.count_nonzero(dying & (labels == g)) for g in range(k)], dtype=np.float64
        )
        observed += d_g
        expected += d * n_g / n
        if n > 1:
            scale = d * (n - d) / (n - 1)
            variance += scale * (np.diag(n_g / n) - np.outer(n_g, n_g) / (n * n))
    diff = observed - expected
    stat = float(diff @ np.linalg.pinv(variance) @ diff)
    dof = k - 1
    p = float(_chi2.sf(stat, dof))
    return stat, dof, p


def ipcw_auc(risks, times, events, t: float) -> float:
    """Cumulative/dynamic AUC at horizon t with inverse-probability-of-
    censoring weights.

    Cases are patients with an observed event at or before t, weighted by
    1/G(t_i-); controls are patients still event-free after t, weighted by
    1/G(t); G is the Kaplan-Meier estimate of the censoring distribution.
    The accumulation runs case-major in dataset index order so a
    like-ordered enumeration reproduces it exactly.
    """
    tt, e = _validate_labels(times, events)
    r = _validate_risks(risks, tt.size)
    t = float(t)
    if not np.isfinite(t):
        raise DomainError(f"horizon must be finite, got {t}")
    cases = [i for i in range(tt.size) if tt[i] <= t and e[i] == 1]
    controls = [j for j in range(tt.size) if tt[j] > t]
    if not cases:
        raise DomainError(f"no cases at horizon {t}")
    if not controls:
        raise DomainError(f"no controls at horizon {t}")
    G = km_estimator(tt, 1 - e)
    g_t = G.survival_at(t)
    if g_t <= 0.0:
        raise DegenerateWeightError(f"censoring survival is 0 at horizon {t}")
    case_weights = []
    for i in cases:
        g = G.survival_before(tt[i])
        if g <= 0.0:
            raise DegenerateWeightError(
                f"censoring survival is 0 just before case time {tt[i]}"
            )
        case_weights.append(1.0 / g)
    control_weight = 1.0 / g_t
    numerator = 0.0
    sum_case = 0.0
    sum_control = 0.0
    for j in controls:
        sum_control += control_weight
    for i, w_i in zip(cases, case_weights):
        sum_case += w_i
        for j in controls:
            if r[i] > r[j]:
                numerator += w_i * control_weight
            elif r[i] == r[j]:
                numerator += 0.5 * w_i * control_weight
    return numerator / (sum_case * sum_control)


GROUP_NAMES = ("low", "medium", "high")


def tertile_groups(risks) -> np.ndarray:
    """Risk tertile labels 0/1/2 (low/medium/high).

    Thresholds are the nearest-rank 33rd and 67th percentiles (sorted
    values at ceil(N/3) and ceil(2N/3)); scores tied with a threshold go
    to the lower group, so all-equal scores land in one group.
    """
    r = np.asarray(risks, dtype=np.float64)
    if r.ndim != 1 or r.size < 3:
        raise DomainError(f"tertiles need >= 3 patients, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise NumericError("risks contain non-finite values")
    ordered = np.sort(r)
    n = r.size
    q1 = ordered[int(np.ceil(n / 3)) - 1]
    q2 = ordered[int(np.ceil(2 * n / 3)) - 1]
    labels = np.full(n, 2, dtype=np.int64)
    labels[r <= q2] = 1
    labels[r <= q1] = 0
    return labels


# ---------------------------------------------------------------------------
# Model-side evaluation: seeded test-time sampling, head analysis
# ---------------------------------------------------------------------------


def batch_risks(X: np.ndarray, params) -> np.ndarray:
    """Risk scores for a stacked (B, n, d) batch under any aggregator."""
    if isinstance(params, _model.ModelParams):
        risks, _ = _model.batch_forward(X, params)
    elif isinstance(params, _model.AvgPoolParams):
        risks, _ = _model.avgpool_batch_forward(X, params)
    elif isinstance(params, _model.GatedAttnParams):
        risks, _ = _model.gated_batch_forward(X, params)
    elif isinstance(params, _model.ClusterAttnParams):
        risks, _ = _model.cluster_batch_forward(X, params)
    else:
        raise DomainError(f"unknown parameter type {type(params).__name__}")
    return risks


def _sampled_bag_matrix(records, bags, n_patches: int, stream: RngStream) -> np.ndarray:
    """Stack one sampled (n_patches, d) matrix per patient.

    Sampling is keyed by patient id, so two models evaluated with the same
    stream see identical patches.
    """
    mats = []
    for rec in records:
        bag = bags.get(rec.patient_id)
        idx = sample_patches(bag.n, n_patches, stream.child(rec.patient_id))
        mats.append(bag.X[idx].astype(np.float64))
    return np.stack(mats)


def predict_risks(
    params, records, bags, stream: RngStream, n_patches: int = 1000, batch_size: int = 64
) -> np.ndarray:
    """Test-time risk scores with seeded per-patient patch sampling."""
    if not records:
        raise DomainError("no records to predict")
    out = np.empty(len(records))
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        X = _sampled_bag_matrix(chunk, bags, n_patches, stream)
        out[start : start + len(chunk)] = batch_risks(X, params)
    return out


def headwise_cindex(
    params: _model.ModelParams,
    records,
    bags,
    stream: RngStream,
    n_patches: int = 1000,
    batch_size: int = 64,
) -> tuple[np.ndarray, float]:
    """C-index of each head in isolation, plus all heads together.

    Head i's risk keeps only chunk i of the pooled representation before
    the risk head (the bias stays); sampling matches the main test-time
    protocol so the all-heads value is the headline number.
    """
    h = params.heads
    dh = params.d // h
    n = len(records)
    if n == 0:
        raise DomainError("no records")
    head_risks = np.empty((h, n))
    all_risks = np.empty(n)
    for start in range(0, n, batch_size):
        chunk = records[start : start + batch_size]
        X = _sampled_bag_matrix(chunk, bags, n_patches, stream)
        _, cache = _model.batch_forward(X, params)
        S = cache.S
        for i in range(h):
            sl = slice(i * dh, (i + 1) * dh)
            head_risks[i, start : start + len(chunk)] = S[:, sl] @ params.fc_w[sl] + params.fc_b
        all_risks[start : start + len(chunk)] = S @ params.fc_w + params.fc_b
    times = [r.time for r in records]
    events = [r.event for r in records]
    per_head = np.array([c_index(head_risks[i], times, events) for i in range(h)])
    return per_head, c_index(all_risks, times, events)


def _pearson_matrix(values: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlations of the rows; diagonal pinned to 1 and
    zero-variance pairs reported as NaN rather than dropped."""
    h = values.shape[0]
    centered = values - values.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    out = np.full((h, h), np.nan)
    for i in range(h):
        out[i, i] = 1.0
        for j in range(i + 1, h):
            if norms[i] > 0.0 and norms[j] > 0.0:
                out[i, j] = out[j, i] = float(
                    centered[i] @ centered[j] / (norms[i] * norms[j])
                )
    return out


def head_correlations(
    params: _model.ModelParams, records, bags
) -> tuple[np.ndarray, np.ndarray]:
    """Between-head correlation of attention scores and of patch risks.

    Every patch of every evaluation bag contributes one attention score
    (the pre-softmax logit, which does not depend on how patches are
    grouped) and one patch risk (head chunk of the risk head dotted with
    the patch's value chunk, no bias) per head; correlations pool all
    patches across patients.
    """
    score_cols = []
    risk_cols = []
    for rec in records:
        bag = bags.get(rec.patient_id)
        logits, patch_risks = _model.patch_scores(bag, params)
        score_cols.append(logits)
        risk_cols.append(patch_risks)
    if not score_cols:
        raise DomainError("no records")
    scores = np.concatenate(score_cols, axis=1)
    risks = np.concatenate(risk_cols, axis=1)
    if scores.shape[1] < 2:
        raise DomainError("need at least 2 patches for correlations")
    return _pearson_matrix(scores), _pearson_matrix(risks)
