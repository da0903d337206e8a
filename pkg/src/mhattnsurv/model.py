"""Bag aggregators and their gradients.

The main model pools a bag of patch embeddings with multi-head
query-key-value attention: keys are relu(dropout(X @ W_K)), values are the
raw embeddings, and a single learnable query vector is split across heads.
Softmax runs along the patch axis, so each head produces a convex
combination of its value chunk; the concatenated chunks feed a linear risk
head. There is no 1/sqrt(d/h) logit scaling.

Also here: the average-pooling, single gated-attention, and
cluster-attention baselines, head masking for per-head analysis, exact
reverse-mode gradients for every trainable aggregator, and binary
checkpoint I/O.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    UsageError,
)
from .numerics import RngStream, kmeans, softmax_stable

CHECKPOINT_MAGIC = b"MHCK"
BASELINE_MAGIC = b"MHCB"
ADAM_TAG = b"ADAM"
CHECKPOINT_VERSION = 1


@dataclass
class EmbeddingBag:
    """One patient's patch embeddings, an (n patches, d features) matrix."""

    patient_id: str
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise DomainError(
                f"bag {self.patient_id!r} must be a non-empty 2-D matrix, "
                f"got shape {self.X.shape}"
            )
        if not np.all(np.isfinite(self.X)):
            raise DomainError(f"bag {self.patient_id!r} contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class ModelParams:
    """Multi-head attention parameters plus the linear risk head."""

    W_K: np.ndarray  # (d, d) key projection
    Q: np.ndarray  # (d,) learnable query
    fc_w: np.ndarray  # (d,) risk head weights
    fc_b: float
    heads: int
    key_dropout_rate: float = 0.0

    @property
    def d(self) -> int:
        return self.Q.shape[0]


@dataclass
class AttentionOutput:
    S: np.ndarray  # (d,) concatenated head outputs
    attn: np.ndarray  # (heads, n) per-head patch weights, rows sum to 1
    risk: float


@dataclass
class GatedAttnParams:
    """Single-head tanh attention baseline (instance-level weighting)."""

    V_g: np.ndarray  # (L, d) hidden projection
    w_g: np.ndarray  # (L,) score vector
    fc_w: np.ndarray  # (d,)
    fc_b: float

    @property
    def L(self) -> int:
        return self.w_g.shape[0]

    @property
    def d(self) -> int:
        return self.fc_w.shape[0]


@dataclass
class ClusterAttnParams:
    """Cluster-then-attend baseline: frozen centroids, gated attention over
    per-cluster mean embeddings."""

    centroids: np.ndarray  # (k, d), fitted on training data only
    attn: GatedAttnParams

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class AvgPoolParams:
    fc_w: np.ndarray
    fc_b: float


def _check_heads(d: int, heads: int) -> int:
    if heads < 1:
        raise ConfigError(f"head count must be >= 1, got {heads}")
    if d % heads != 0:
        raise ConfigError(f"head count {heads} does not divide embedding dim {d}")
    return d // heads


def init_params(
    d: int,
    heads: int,
    seed: RngStream,
    key_dropout_rate: float = 0.0,
    dtype=np.float64,
) -> ModelParams:
    """Initialize all weights i.i.d. uniform on [-1/sqrt(d), +1/sqrt(d)].

    The query uses that rule by definition; the key projection and risk
    head reuse it for want of anything more specific. Bias starts at 0.
    """
    _check_heads(d, heads)
    if not 0.0 <= key_dropout_rate < 1.0:
        raise ConfigError(f"key_dropout_rate must be in [0, 1), got {key_dropout_rate}")
    rng = seed.generator()
    bound = 1.0 / np.sqrt(d)
    Q = rng.uniform(-bound, bound, size=d).astype(dtype)
    W_K = rng.uniform(-bound, bound, size=(d, d)).astype(dtype)
    fc_w = rng.uniform(-bound, bound, size=d).astype(dtype)
    return ModelParams(
        W_K=W_K, Q=Q, fc_w=fc_w, fc_b=0.0, heads=heads, key_dropout_rate=key_dropout_rate
    )


def init_gated_params(d: int, seed: RngStream, hidden: int = 64, dtype=np.float64) -> GatedAttnParams:
    if hidden < 1:
        raise ConfigError(f"hidden width must be >= 1, got {hidden}")
    rng = seed.generator()
    V_g = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(hidden, d)).astype(dtype)
    w_g = rng.uniform(-1.0 / np.sqrt(hidden), 1.0 / np.sqrt(hidden), size=hidden).astype(dtype)
    fc_w = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=d).astype(dtype)
    return GatedAttnParams(V_g=V_g, w_g=w_g, fc_w=fc_w, fc_b=0.0)


def init_avgpool_params(d: int, seed: RngStream, dtype=np.float64) -> AvgPoolParams:
    rng = seed.generator()
    fc_w = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=d).astype(dtype)
    return AvgPoolParams(fc_w=fc_w, fc_b=0.0)


def fit_cluster_centroids(
    patches: np.ndarray, k: int, seed: RngStream, max_iters: int = 50
) -> np.ndarray:
    """K-means centroids for the cluster-attention baseline. Training data only."""
    _, centroids = kmeans(patches, k, seed, max_iters=max_iters)
    return centroids


def init_cluster_params(
    d: int, centroids: np.ndarray, seed: RngStream, hidden: int = 64, dtype=np.float64
) -> ClusterAttnParams:
    centroids = np.asarray(centroids, dtype=dtype)
    if centroids.ndim != 2 or centroids.shape[1] != d:
        raise DimensionError(f"centroids must be (k, {d}), got {centroids.shape}")
    return ClusterAttnParams(
        centroids=centroids, attn=init_gated_params(d, seed, hidden=hidden, dtype=dtype)
    )


# ---------------------------------------------------------------------------
# Multi-head attention forward / backward
# ---------------------------------------------------------------------------


def _mh_core(X: np.ndarray, params: ModelParams, key_mask_scaled: np.ndarray | None):
    """Shared attention math over a stack of bags, X of shape (B, n, d).

    Returns (S, K, attn) with S (B, d), K (B, n, d) post-relu keys, and
    attn (B, heads, n).
    """
    B, n, d = X.shape
    dh = d // params.heads
    P = X @ params.W_K
    if key_mask_scaled is not None:
        P = P * key_mask_scaled
    K = np.maximum(P, 0.0)
    Kh = K.reshape(B, n, params.heads, dh)
    Qh = params.Q.reshape(params.heads, dh)
    logits = np.einsum("bnhc,hc->bhn", Kh, Qh)
    attn = softmax_stable(logits)
    Vh = X.reshape(B, n, params.heads, dh)
    S = np.einsum("bhn,bnhc->bhc", attn, Vh).reshape(B, d)
    return S, K, attn, logits


def _check_bag_dims(X: np.ndarray, d: int):
    if X.shape[-1] != d:
        raise DimensionError(f"bag dimension {X.shape[-1]} != model dimension {d}")
    if X.shape[-2] < 1:
        raise DomainError("bag has no patches")


def mh_forward(
    bag: EmbeddingBag,
    params: ModelParams,
    key_dropout_mask: np.ndarray | None = None,
    training: bool = False,
) -> AttentionOutput:
    """Multi-head attention pooling of one bag, plus the risk score.

    At inference key dropout is the identity. In training mode with a
    nonzero rate the caller must supply the boolean keep mask (n, d);
    survivors are scaled by 1/(1-rate).
    """
    _check_bag_dims(bag.X, params.d)
    mask_scaled = None
    if training and params.key_dropout_rate > 0.0:
        if key_dropout_mask is None:
            raise UsageError("training with key dropout requires an explicit mask")
        if key_dropout_mask.shape != bag.X.shape:
            raise DimensionError(
                f"key dropout mask shape {key_dropout_mask.shape} != bag shape {bag.X.shape}"
            )
        mask_scaled = key_dropout_mask.astype(np.float64) / (1.0 - params.key_dropout_rate)
    X = bag.X[None, :, :].astype(np.float64, copy=False)
    S, _, attn, _ = _mh_core(X, params, mask_scaled)
    S = S[0]
    risk = float(params.fc_w @ S + params.fc_b)
    return AttentionOutput(S=S, attn=attn[0], risk=risk)


def patch_scores(bag: EmbeddingBag, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch, per-head pre-softmax attention logits and patch risks.

    The patch risk of head i for patch j is the dot product of the risk
    head's chunk i with the patch's value chunk i; the bias is not
    attributable to a head and is excluded.
    """
    _check_bag_dims(bag.X, params.d)
    X = bag.X[None, :, :].astype(np.float64, copy=False)
    _, _, _, logits = _mh_core(X, params, None)
    dh = params.d // params.heads
    Vh = bag.X.reshape(bag.n, params.heads, dh)
    wh = params.fc_w.reshape(params.heads, dh)
    risks = np.einsum("nhc,hc->hn", Vh, wh)
    return logits[0], risks


def head_masked_forward(
    bag: EmbeddingBag, params: ModelParams, keep_heads: Iterable[int]
) -> float:
    """Risk with all head chunks outside ``keep_heads`` zeroed before the
    risk head. Heads are 0-indexed; the bias is always applied."""
    keep = sorted(set(int(i) for i in keep_heads))
    if any(i < 0 or i >= params.heads for i in keep):
        raise DomainError(f"head index out of range 0..{params.heads - 1}: {keep}")
    out = mh_forward(bag, params)
    dh = params.d // params.heads
    masked = np.zeros_like(out.S)
    for i in keep:
        masked[i * dh : (i + 1) * dh] = out.S[i * dh : (i + 1) * dh]
    return float(params.fc_w @ masked + params.fc_b)


@dataclass
class BatchCache:
    """Forward-pass state needed by the exact backward pass."""

    X: np.ndarray  # (B, n, d)
    K: np.ndarray  # (B, n, d) post-relu keys
    attn: np.ndarray  # (B, heads, n)
    S: np.ndarray  # (B, d)
    key_mask_scaled: np.ndarray | None
    feature_mask_scaled: np.ndarray | None  # (d,)


def batch_forward(
    X: np.ndarray,
    params: ModelParams,
    key_mask: np.ndarray | None = None,
    feature_mask_scaled: np.ndarray | None = None,
) -> tuple[np.ndarray, BatchCache]:
    """Risk scores for a stacked batch of equal-size bags, X (B, n, d).

    ``key_mask`` is the boolean keep mask for key dropout (already drawn by
    the caller); ``feature_mask_scaled`` is the shared, already-scaled
    feature dropout vector applied to every pooled representation before
    the risk head.
    """
    if X.ndim != 3:
        raise DimensionError(f"batch must be (B, n, d), got shape {X.shape}")
    _check_bag_dims(X, params.d)
    mask_scaled = None
    if key_mask is not None:
        if params.key_dropout_rate <= 0.0:
            raise UsageError("key mask supplied but key_dropout_rate is 0")
        mask_scaled = key_mask.astype(np.float64) / (1.0 - params.key_dropout_rate)
    S, K, attn, _ = _mh_core(X, params, mask_scaled)
    Sm = S if feature_mask_scaled is None else S * feature_mask_scaled
    risks = Sm @ params.fc_w + params.fc_b
    cache = BatchCache(
        X=X,
        K=K,
        attn=attn,
        S=S,
        key_mask_scaled=mask_scaled,
        feature_mask_scaled=feature_mask_scaled,
    )
    return risks, cache


def backward(
    params: ModelParams, cache: BatchCache, loss_grad_wrt_risks: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact gradients of sum_b loss_grad[b] * risk[b] w.r.t. all parameters.

    Dropout masks in the cache are treated as constants.
    """
    if cache is None:
        raise UsageError("backward requires the forward cache")
    dr = np.asarray(loss_grad_wrt_risks, dtype=np.float64)
    B, n, d = cache.X.shape
    if dr.shape != (B,):
        raise DimensionError(f"loss gradient must have shape ({B},), got {dr.shape}")
    h = params.heads
    dh = d // h
    m = cache.feature_mask_scaled
    Sm = cache.S if m is None else cache.S * m
    g_fc_b = dr.sum()
    g_fc_w = Sm.T @ dr
    dS = dr[:, None] * (params.fc_w if m is None else params.fc_w * m)[None, :]

    dSh = dS.reshape(B, h, dh)
    Vh = cache.X.reshape(B, n, h, dh)
    Kh = cache.K.reshape(B, n, h, dh)
    Qh = params.Q.reshape(h, dh)
    da = np.einsum("bhc,bnhc->bhn", dSh, Vh)
    inner = (cache.attn * da).sum(axis=2, keepdims=True)
    dlogits = cache.attn * (da - inner)
    g_Q = np.einsum("bhn,bnhc->hc", dlogits, Kh).reshape(d)
    dK = np.einsum("bhn,hc->bnhc", dlogits, Qh).reshape(B, n, d)
    dP = dK * (cache.K > 0.0)
    if cache.key_mask_scaled is not None:
        dP = dP * cache.key_mask_scaled
    g_WK = np.einsum("bnd,bne->de", cache.X, dP)
    return {"W_K": g_WK, "Q": g_Q, "fc_w": g_fc_w, "fc_b": np.float64(g_fc_b)}


# ---------------------------------------------------------------------------
# Baseline aggregators
# ---------------------------------------------------------------------------


def avgpool_forward(bag: EmbeddingBag, fc_w: np.ndarray, fc_b: float) -> float:
    """Risk of the mean-pooled bag: fc_w . column_mean(X) + fc_b."""
    _check_bag_dims(bag.X, fc_w.shape[0])
    return float(fc_w @ bag.X.mean(axis=0) + fc_b)


def avgpool_batch_forward(
    X: np.ndarray, params: AvgPoolParams, feature_mask_scaled: np.ndarray | None = None
) -> tuple[np.ndarray, dict]:
    _check_bag_dims(X, params.fc_w.shape[0])
    pooled = X.mean(axis=1)
    pm = pooled if feature_mask_scaled is None else pooled * feature_mask_scaled
    risks = pm @ params.fc_w + params.fc_b
    return risks, {"pooled": pooled, "feature_mask_scaled": feature_mask_scaled}


def avgpool_backward(
    params: AvgPoolParams, cache: dict, loss_grad_wrt_risks: np.ndarray
) -> dict[str, np.ndarray]:
    dr = np.asarray(loss_grad_wrt_risks, dtype=np.float64)
    m = cache["feature_mask_scaled"]
    pm = cache["pooled"] if m is None else cache["pooled"] * m
    return {"fc_w": pm.T @ dr, "fc_b": np.float64(dr.sum())}


def gated_attn_forward(
    bag: EmbeddingBag, params: GatedAttnParams
) -> tuple[float, np.ndarray]:
    """Tanh-attention pooling: score_j = w_g . tanh(V_g x_j), softmax over
    patches, weighted-average pooling, then the linear risk head."""
    _check_bag_dims(bag.X, params.d)
    H = np.tanh(bag.X @ params.V_g.T)
    attn = softmax_stable(H @ params.w_g)
    pooled = attn @ bag.X
    risk = float(params.fc_w @ pooled + params.fc_b)
    return risk, attn


def gated_batch_forward(
    X: np.ndarray, params: GatedAttnParams, feature_mask_scaled: np.ndarray | None = None
) -> tuple[np.ndarray, dict]:
    _check_bag_dims(X, params.d)
    H = np.tanh(X @ params.V_g.T)  # (B, n, L)
    attn = softmax_stable(H @ params.w_g)  # (B, n)
    pooled = np.einsum("bn,bnd->bd", attn, X)
    pm = pooled if feature_mask_scaled is None else pooled * feature_mask_scaled
    risks = pm @ params.fc_w + params.fc_b
    cache = {
        "X": X,
        "H": H,
        "attn": attn,
        "pooled": pooled,
        "feature_mask_scaled": feature_mask_scaled,
    }
    return risks, cache


def gated_backward(
    params: GatedAttnParams, cache: dict, loss_grad_wrt_risks: np.ndarray
) -> dict[str, np.ndarray]:
    dr = np.asarray(loss_grad_wrt_risks, dtype=np.float64)
    X, H, attn = cache["X"], cache["H"], cache["attn"]
    m = cache["feature_mask_scaled"]
    pm = cache["pooled"] if m is None else cache["pooled"] * m
    g_fc_b = np.float64(dr.sum())
    g_fc_w = pm.T @ dr
    dpooled = dr[:, None] * (params.fc_w if m is None else params.fc_w * m)[None, :]
    da = np.einsum("bd,bnd->bn", dpooled, X)
    dscores = attn * (da - (attn * da).sum(axis=1, keepdims=True))
    g_w_g = np.einsum("bn,bnl->l", dscores, H)
    dH = dscores[:, :, None] * params.w_g[None, None, :]
    dpre = dH * (1.0 - H * H)
    g_V_g = np.einsum("bnl,bnd->ld", dpre, X)
    return {"V_g": g_V_g, "w_g": g_w_g, "fc_w": g_fc_w, "fc_b": g_fc_b}


def cluster_embeddings(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Mean embedding per nearest-centroid cluster; empty clusters dropped."""
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    embeds = []
    for c in range(centroids.shape[0]):
        members = X[assign == c]
        if len(members):
            embeds.append(members.mean(axis=0))
    return np.asarray(embeds)


def cluster_attn_forward(bag: EmbeddingBag, params: ClusterAttnParams) -> float:
    """Gated attention over per-cluster mean embeddings, then the risk head."""
    _check_bag_dims(bag.X, params.centroids.shape[1])
    E = cluster_embeddings(bag.X, params.centroids)
    if len(E) == 0:
        raise DomainError("no non-empty clusters")
    risk, _ = gated_attn_forward(EmbeddingBag(bag.patient_id, E), params.attn)
    return risk


def cluster_batch_forward(
    X: np.ndarray, params: ClusterAttnParams, feature_mask_scaled: np.ndarray | None = None
) -> tuple[np.ndarray, dict]:
    """Per-bag cluster pooling; bags may activate different cluster subsets,
    so the gated stage runs bag by bag."""
    risks = np.empty(X.shape[0])
    caches = []
    for b in range(X.shape[0]):
        E = cluster_embeddings(X[b], params.centroids)
        r, cache = gated_batch_forward(E[None, :, :], params.attn, feature_mask_scaled)
        risks[b] = r[0]
        caches.append(cache)
    return risks, {"bags": caches}


def cluster_backward(
    params: ClusterAttnParams, cache: dict, loss_grad_wrt_risks: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients flow only into the attention stage; centroids are frozen."""
    total: dict[str, np.ndarray] | None = None
    for b, sub in enumerate(cache["bags"]):
        g = gated_backward(params.attn, sub, loss_grad_wrt_risks[b : b + 1])
        if total is None:
            total = g
        else:
            for k in total:
                total[k] = total[k] + g[k]
    assert total is not None
    return total


# ---------------------------------------------------------------------------
# Parameter <-> flat-array plumbing shared by the optimizer and checkpoints
# ---------------------------------------------------------------------------


def params_to_arrays(params) -> dict[str, np.ndarray]:
    """Named parameter arrays in a fixed order; scalars become 0-d arrays."""
    if isinstance(params, ModelParams):
        items = [("W_K", params.W_K), ("Q", params.Q), ("fc_w", params.fc_w)]
    elif isinstance(params, GatedAttnParams):
        items = [("V_g", params.V_g), ("w_g", params.w_g), ("fc_w", params.fc_w)]
    elif isinstance(params, ClusterAttnParams):
        return params_to_arrays(params.attn)
    elif isinstance(params, AvgPoolParams):
        items = [("fc_w", params.fc_w)]
    else:
        raise UsageError(f"unknown parameter type {type(params).__name__}")
    out = {k: np.asarray(v) for k, v in items}
    out["fc_b"] = np.asarray(params.fc_b)
    return out


def baseline_params_from_arrays(kind: str, arrays: Mapping[str, np.ndarray]):
    """Rebuild baseline parameters from a checkpoint's named arrays."""
    fc_b = float(arrays["fc_b"])
    if kind == "avgpool":
        return AvgPoolParams(fc_w=np.asarray(arrays["fc_w"]), fc_b=fc_b)
    if kind == "gated_attn":
        return GatedAttnParams(
            V_g=np.asarray(arrays["V_g"]),
            w_g=np.asarray(arrays["w_g"]),
            fc_w=np.asarray(arrays["fc_w"]),
            fc_b=fc_b,
        )
    if kind == "cluster_attn":
        return ClusterAttnParams(
            centroids=np.asarray(arrays["centroids"]),
            attn=GatedAttnParams(
                V_g=np.asarray(arrays["V_g"]),
                w_g=np.asarray(arrays["w_g"]),
                fc_w=np.asarray(arrays["fc_w"]),
                fc_b=fc_b,
            ),
        )
    raise FormatError(f"unknown baseline checkpoint kind {kind!r}")


def params_from_arrays(template, arrays: Mapping[str, np.ndarray]):
    """Rebuild a params object of the template's type from named arrays."""
    if isinstance(template, ModelParams):
        return replace(
            template,
            W_K=np.asarray(arrays["W_K"]),
            Q=np.asarray(arrays["Q"]),
            fc_w=np.asarray(arrays["fc_w"]),
            fc_b=float(arrays["fc_b"]),
        )
    if isinstance(template, GatedAttnParams):
        return replace(
            template,
            V_g=np.asarray(arrays["V_g"]),
            w_g=np.asarray(arrays["w_g"]),
            fc_w=np.asarray(arrays["fc_w"]),
            fc_b=float(arrays["fc_b"]),
        )
    if isinstance(template, ClusterAttnParams):
        return replace(template, attn=params_from_arrays(template.attn, arrays))
    if isinstance(template, AvgPoolParams):
        return replace(
            template, fc_w=np.asarray(arrays["fc_w"]), fc_b=float(arrays["fc_b"])
        )
    raise UsageError(f"unknown parameter type {type(template).__name__}")


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def _pack_f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}", offset=offset)
    return buf[offset : offset + count], offset + count


def save_checkpoint(
    path,
    params: ModelParams,
    optimizer_state: dict | None = None,
    metadata: dict | None = None,
) -> None:
    """Write the binary checkpoint: header, f32 arrays in fixed order, an
    optional tagged optimizer block, then length-prefixed JSON metadata."""
    d, h = params.d, params.heads
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<III", CHECKPOINT_VERSION, d, h),
        struct.pack("<d", params.key_dropout_rate),
        _pack_f32(params.W_K),
        _pack_f32(params.Q),
        _pack_f32(params.fc_w),
        struct.pack("<f", params.fc_b),
    ]
    if optimizer_state is not None:
        parts.append(ADAM_TAG)
        parts.append(
            struct.pack(
                "<Qddd",
                optimizer_state["step"],
                optimizer_state["beta1"],
                optimizer_state["beta2"],
                optimizer_state["eps"],
            )
        )
        for store in ("m", "v"):
            for name in ("W_K", "Q", "fc_w", "fc_b"):
                parts.append(_pack_f32(optimizer_state[store][name]))
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, dict | None, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0
    magic, off = _read_exact(buf, off, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    header, off = _read_exact(buf, off, 12, "header")
    version, d, h = struct.unpack("<III", header)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    raw, off = _read_exact(buf, off, 8, "dropout rate")
    key_dropout_rate = struct.unpack("<d", raw)[0]

    def read_arr(shape, what):
        nonlocal off
        count = int(np.prod(shape))
        raw, new_off = _read_exact(buf, off, 4 * count, what)
        off_was = off
        off = new_off
        try:
            return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        except ValueError as exc:
            raise FormatError(str(exc), offset=off_was)

    W_K = read_arr((d, d), "W_K")
    Q = read_arr((d,), "Q")
    fc_w = read_arr((d,), "fc_w")
    raw, off = _read_exact(buf, off, 4, "fc_b")
    fc_b = float(np.frombuffer(raw, dtype="<f4")[0])
    params = ModelParams(
        W_K=W_K, Q=Q, fc_w=fc_w, fc_b=fc_b, heads=h, key_dropout_rate=key_dropout_rate
    )

    optimizer_state = None
    if buf[off : off + 4] == ADAM_TAG:
        off += 4
        raw, off = _read_exact(buf, off, 8 + 24, "optimizer header")
        step, beta1, beta2, eps = struct.unpack("<Qddd", raw)
        optimizer_state = {"step": step, "beta1": beta1, "beta2": beta2, "eps": eps}
        for store in ("m", "v"):
            optimizer_state[store] = {
                "W_K": read_arr((d, d), f"{store}.W_K"),
                "Q": read_arr((d,), f"{store}.Q"),
                "fc_w": read_arr((d,), f"{store}.fc_w"),
                "fc_b": read_arr((), f"{store}.fc_b"),
            }

    raw, off = _read_exact(buf, off, 4, "metadata length")
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = _read_exact(buf, off, meta_len, "metadata")
    try:
        metadata = json.loads(raw.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata: {exc}", offset=off - meta_len)
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint", offset=off)
    return params, optimizer_state, metadata


def save_baseline_checkpoint(path, kind: str, params, metadata: dict | None = None) -> None:
    """Checkpoint container for the baseline aggregators: named f32 arrays
    keyed by parameter name, preceded by the model kind."""
    arrays = dict(params_to_arrays(params))
    if isinstance(params, ClusterAttnParams):
        arrays["centroids"] = params.centroids
    kind_b = kind.encode("utf-8")
    parts = [BASELINE_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(kind_b)), kind_b]
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_pack_f32(arr))
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_baseline_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0
    magic, off = _read_exact(buf, off, 4, "magic")
    if magic != BASELINE_MAGIC:
        raise FormatError(f"bad baseline checkpoint magic {magic!r}", offset=0)
    raw, off = _read_exact(buf, off, 8, "header")
    version, kind_len = struct.unpack("<II", raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    raw, off = _read_exact(buf, off, kind_len, "kind")
    kind = raw.decode("utf-8")
    raw, off = _read_exact(buf, off, 4, "array count")
    (count,) = struct.unpack("<I", raw)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, off = _read_exact(buf, off, 4, "name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _read_exact(buf, off, name_len, "name")
        name = raw.decode("utf-8")
        raw, off = _read_exact(buf, off, 4, "ndim")
        (ndim,) = struct.unpack("<I", raw)
        raw, off = _read_exact(buf, off, 4 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}I", raw)
        n_items = int(np.prod(shape)) if ndim else 1
        raw, off = _read_exact(buf, off, 4 * n_items, f"array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    raw, off = _read_exact(buf, off, 4, "metadata length")
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = _read_exact(buf, off, meta_len, "metadata")
    metadata = json.loads(raw.decode("utf-8")) if meta_len else {}
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint", offset=off)
    return kind, arrays, metadata
