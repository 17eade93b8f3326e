"""Implicit pose feature extractor with a self-contained backprop engine.

The extractor queries image features (here a seeded synthetic stand-in for a
frozen image encoder) with a merged query: a keypoint-derived embedding plus
a learnable query matrix. Structure:

  * keypoint encoder: per-frame (x, y, confidence) triples, coordinates
    normalized by canvas size, linearly embedded and passed through
    self-attention blocks, then mean-pooled over contiguous frame chunks to
    n_learnable_queries rows (q_p);
  * merged query q_m = q_p + q_l feeds n_layers pre-norm blocks of
    multi-head cross-attention (K = V = image features) and feed-forward,
    each wrapped in a residual connection around its normalized input;
  * the result f_i is injected downstream as x + alpha * f_i.

Parameters live in a flat name -> float64 array mapping so gradients,
finite-difference checks and checkpoints all share one naming scheme:
``q_l``, ``kp_embed.{w,b}``, ``kp_enc.N.*`` and ``cross.N.*`` where ``*``
is ``attn.{wq,wk,wv,wo}``, ``ln1.{g,b}``, ``ffn.{w1,b1,w2,b2}``,
``ln2.{g,b}``.

Everything is double precision and pure; the analytic backward pass is
verified against central finite differences by ``grad_check``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError, UsageError
from .seeding import derive_rng
from .skeleton import PoseSequence

KP_FEATURES = 54  # 18 joints x (x, y, confidence)
FFN_MULT = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class IpiConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_learnable_queries: int = 4
    alpha: float = 1.0
    keypoint_encoder_layers: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.n_learnable_queries < 1 or self.keypoint_encoder_layers < 0:
            raise ConfigError("query count must be >= 1 and encoder depth >= 0")


def _block_prefixes(cfg: IpiConfig) -> list[str]:
    return [f"kp_enc.{i}" for i in range(cfg.keypoint_encoder_layers)] + [
        f"cross.{i}" for i in range(cfg.n_layers)
    ]


def param_shapes(cfg: IpiConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter-block names and shapes for a config."""
    d, h = cfg.d_model, FFN_MULT * cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "q_l": (cfg.n_learnable_queries, d),
        "kp_embed.w": (KP_FEATURES, d),
        "kp_embed.b": (d,),
    }
    for prefix in _block_prefixes(cfg):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{w}"] = (d, d)
        shapes[f"{prefix}.ln1.g"] = (d,)
        shapes[f"{prefix}.ln1.b"] = (d,)
        shapes[f"{prefix}.ffn.w1"] = (d, h)
        shapes[f"{prefix}.ffn.b1"] = (h,)
        shapes[f"{prefix}.ffn.w2"] = (h, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        shapes[f"{prefix}.ln2.g"] = (d,)
        shapes[f"{prefix}.ln2.b"] = (d,)
    return shapes


@dataclass
class IpiParams:
    """Named parameter blocks; shapes are pinned by the config."""

    cfg: IpiConfig
    blocks: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if set(self.blocks) != set(expected):
            missing = sorted(set(expected) - set(self.blocks))
            extra = sorted(set(self.blocks) - set(expected))
            raise ConfigError(f"parameter blocks mismatch: missing {missing}, extra {extra}")
        for name, arr in self.blocks.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != expected[name]:
                raise ShapeError(
                    f"block {name} has shape {arr.shape}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"block {name} contains non-finite values")
            self.blocks[name] = arr

    def copy(self) -> "IpiParams":
        return IpiParams(self.cfg, {k: v.copy() for k, v in self.blocks.items()})


def init_ipi_params(cfg: IpiConfig, rng: np.random.Generator) -> IpiParams:
    """Seeded Gaussian init: weights scaled by 1/sqrt(fan_in), layer norms
    at identity, biases at zero."""
    blocks: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            blocks[name] = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            blocks[name] = np.zeros(shape)
        else:
            blocks[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
    return IpiParams(cfg, blocks)


def zero_grads(cfg: IpiConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# Primitive layers (forward + backward)


def _layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    return dx, dg, db


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def multihead_attention(q_in, kv_in, wq, wk, wv, wo, n_heads):
    """Scaled dot-product attention; returns (output, per-head weights).

    Weight rows are softmax-normalized: each attention row sums to one.
    """
    out, weights, _ = _mha_forward(q_in, kv_in, wq, wk, wv, wo, n_heads)
    return out, weights


def _mha_forward(q_in, kv_in, wq, wk, wv, wo, n_heads):
    q = q_in @ wq
    k = kv_in @ wk
    v = kv_in @ wv
    dh = q.shape[-1] // n_heads
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scale = 1.0 / math.sqrt(dh)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    attn = _softmax_rows(scores)
    ctx = attn @ vh
    merged = _merge_heads(ctx)
    out = merged @ wo
    cache = (q_in, kv_in, wq, wk, wv, wo, qh, kh, vh, attn, merged, scale, n_heads)
    return out, attn, cache


def _mha_backward(dout, cache):
    q_in, kv_in, wq, wk, wv, wo, qh, kh, vh, attn, merged, scale, n_heads = cache
    dwo = merged.T @ dout
    dmerged = dout @ wo.T
    dctx = _split_heads(dmerged, n_heads)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    # softmax rows: ds = a * (da - sum(da * a))
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq = _merge_heads(dqh)
    dk = _merge_heads(dkh)
    dv = _merge_heads(dvh)
    dwq = q_in.T @ dq
    dwk = kv_in.T @ dk
    dwv = kv_in.T @ dv
    dq_in = dq @ wq.T
    dkv_in = dk @ wk.T + dv @ wv.T
    return dq_in, dkv_in, {"wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo}


def _ffn_forward(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    h = np.tanh(pre)
    return h @ w2 + b2, (x, w1, w2, h)


def _ffn_backward(dy, cache):
    x, w1, w2, h = cache
    dw2 = h.T @ dy
    db2 = dy.sum(axis=0)
    dh = dy @ w2.T
    dpre = dh * (1.0 - h * h)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    dx = dpre @ w1.T
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def _block_forward(x_q, x_kv, blocks, prefix, n_heads, self_attend=False):
    """Pre-norm attention block: x + attn(LN1(x), kv), then x + ffn(LN2(x)).

    Normalizing before each sublayer keeps the residual stream un-normalized,
    which makes the whole stack friendly to finite-difference verification.
    In self-attention mode the keys and values come from the normalized
    stream as well; in cross mode they are the raw feature rows.
    """
    p = lambda name: blocks[f"{prefix}.{name}"]
    n1, ln1_cache = _layer_norm_forward(x_q, p("ln1.g"), p("ln1.b"))
    kv = n1 if self_attend else x_kv
    a, attn_weights, attn_cache = _mha_forward(
        n1, kv, p("attn.wq"), p("attn.wk"), p("attn.wv"), p("attn.wo"), n_heads
    )
    x1 = x_q + a
    n2, ln2_cache = _layer_norm_forward(x1, p("ln2.g"), p("ln2.b"))
    f, ffn_cache = _ffn_forward(n2, p("ffn.w1"), p("ffn.b1"), p("ffn.w2"), p("ffn.b2"))
    out = x1 + f
    return out, attn_weights, (attn_cache, ln1_cache, ffn_cache, ln2_cache, self_attend)


def _block_backward(dout, cache, prefix, grads):
    attn_cache, ln1_cache, ffn_cache, ln2_cache, self_attend = cache
    dn2, ffn_grads = _ffn_backward(dout, ffn_cache)
    for name, g in ffn_grads.items():
        grads[f"{prefix}.ffn.{name}"] += g
    dx1_ln, dg2, db2 = _layer_norm_backward(dn2, ln2_cache)
    grads[f"{prefix}.ln2.g"] += dg2
    grads[f"{prefix}.ln2.b"] += db2
    dx1 = dout + dx1_ln
    dn1, dkv, attn_grads = _mha_backward(dx1, attn_cache)
    for name, g in attn_grads.items():
        grads[f"{prefix}.attn.{name}"] += g
    if self_attend:
        dn1 = dn1 + dkv
        dkv = None
    dx_q_ln, dg1, db1 = _layer_norm_backward(dn1, ln1_cache)
    grads[f"{prefix}.ln1.g"] += dg1
    grads[f"{prefix}.ln1.b"] += db1
    dx_q = dx1 + dx_q_ln
    return dx_q, dkv


# ---------------------------------------------------------------------------
# Keypoint encoder


def pose_tokens(pose: PoseSequence) -> np.ndarray:
    """Per-frame feature rows: 18 x (x/width, y/height, confidence)."""
    rows = np.empty((len(pose.frames), KP_FEATURES))
    for i, frame in enumerate(pose.frames):
        scaled = frame.body.copy()
        scaled[:, 0] /= pose.width
        scaled[:, 1] /= pose.height
        rows[i] = scaled.reshape(-1)
    return rows


def _pool_chunks(h: np.ndarray, n_out: int):
    """Mean-pool rows into n_out contiguous chunks; empty chunks (fewer
    frames than queries) fall back to the global mean."""
    chunks = np.array_split(np.arange(h.shape[0]), n_out)
    pooled = np.empty((n_out, h.shape[1]))
    for i, idx in enumerate(chunks):
        pooled[i] = h[idx].mean(axis=0) if len(idx) else h.mean(axis=0)
    return pooled, chunks


def _pool_chunks_backward(dpooled, chunks, n_rows):
    dh = np.zeros((n_rows, dpooled.shape[1]))
    for i, idx in enumerate(chunks):
        if len(idx):
            dh[idx] += dpooled[i] / len(idx)
        else:
            dh += dpooled[i] / n_rows
    return dh


def _encode_keypoints_cached(pose, params: IpiParams, cfg: IpiConfig):
    if len(pose.frames) == 0:
        raise UsageError("cannot encode an empty pose sequence")
    x = pose_tokens(pose)
    h = x @ params.blocks["kp_embed.w"] + params.blocks["kp_embed.b"]
    block_caches = []
    for i in range(cfg.keypoint_encoder_layers):
        h, _, cache = _block_forward(
            h, None, params.blocks, f"kp_enc.{i}", cfg.n_heads, self_attend=True
        )
        block_caches.append(cache)
    q_p, chunks = _pool_chunks(h, cfg.n_learnable_queries)
    return q_p, (x, block_caches, chunks, h.shape[0])


def _encode_keypoints_backward(dq_p, cache, params, cfg, grads):
    x, block_caches, chunks, n_rows = cache
    dh = _pool_chunks_backward(dq_p, chunks, n_rows)
    for i in reversed(range(cfg.keypoint_encoder_layers)):
        dh, _ = _block_backward(dh, block_caches[i], f"kp_enc.{i}", grads)
    grads["kp_embed.w"] += x.T @ dh
    grads["kp_embed.b"] += dh.sum(axis=0)


def encode_keypoints(pose: PoseSequence, params: IpiParams, cfg: IpiConfig) -> np.ndarray:
    """Keypoint-query embedding q_p, pooled to n_learnable_queries rows."""
    q_p, _ = _encode_keypoints_cached(pose, params, cfg)
    return q_p


# ---------------------------------------------------------------------------
# Extractor forward / backward


def ipi_forward_cached(clip_feats: np.ndarray, pose: PoseSequence,
                       params: IpiParams, cfg: IpiConfig):
    clip_feats = np.asarray(clip_feats, dtype=np.float64)
    if clip_feats.ndim != 2 or clip_feats.shape[1] != cfg.d_model:
        raise ShapeError(
            f"image features have shape {clip_feats.shape}, expected (*, {cfg.d_model})"
        )
    q_p, enc_cache = _encode_keypoints_cached(pose, params, cfg)
    stream = q_p + params.blocks["q_l"]
    cross_caches = []
    attn_weights = []
    for i in range(cfg.n_layers):
        stream, weights, cache = _block_forward(
            stream, clip_feats, params.blocks, f"cross.{i}", cfg.n_heads
        )
        cross_caches.append(cache)
        attn_weights.append(weights)
    return stream, (enc_cache, cross_caches, attn_weights)


def ipi_forward(clip_feats: np.ndarray, pose: PoseSequence,
                params: IpiParams, cfg: IpiConfig) -> np.ndarray:
    """Implicit pose feature f_i (n_learnable_queries x d_model)."""
    out, _ = ipi_forward_cached(clip_feats, pose, params, cfg)
    return out


def ipi_attention_weights(clip_feats, pose, params, cfg) -> list[np.ndarray]:
    """Per-layer cross-attention weights (heads x queries x keys)."""
    _, (_, _, weights) = ipi_forward_cached(clip_feats, pose, params, cfg)
    return weights


def ipi_backward(d_out: np.ndarray, cache, params: IpiParams,
                 cfg: IpiConfig) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every parameter block, given the
    loss gradient at the extractor output."""
    enc_cache, cross_caches, _ = cache
    grads = zero_grads(cfg)
    d_stream = np.asarray(d_out, dtype=np.float64)
    for i in reversed(range(cfg.n_layers)):
        d_stream, _ = _block_backward(d_stream, cross_caches[i], f"cross.{i}", grads)
    grads["q_l"] += d_stream
    _encode_keypoints_backward(d_stream, enc_cache, params, cfg, grads)
    return grads


def residual_inject(x: np.ndarray, f_i: np.ndarray, alpha: float) -> np.ndarray:
    """Residual fusion x + alpha * f_i; alpha 0 returns x itself."""
    x = np.asarray(x)
    f_i = np.asarray(f_i)
    if x.shape != f_i.shape:
        raise ShapeError(f"shape mismatch: x is {x.shape}, f_i is {f_i.shape}")
    if alpha == 0.0:
        return x
    return x + alpha * f_i


# ---------------------------------------------------------------------------
# Synthetic image features (stand-in for the frozen image encoder)


def synthetic_clip_features(seq: PoseSequence, n_tokens: int, d_model: int,
                            seed: int) -> np.ndarray:
    """Deterministic pseudo-random feature matrix keyed by sequence content.

    The same sequence and seed always produce the same matrix, on any
    platform, so tests and training runs are reproducible without a real
    image encoder.
    """
    from .pose_io import write_pose_json

    digest = hashlib.sha256(write_pose_json(seq)).digest()
    content_key = int.from_bytes(digest[:8], "little")
    rng = derive_rng(seed, content_key)
    return rng.normal(0.0, 1.0, (n_tokens, d_model))


# ---------------------------------------------------------------------------
# Gradient verification


def sum_squares_probe(out: np.ndarray) -> tuple[float, np.ndarray]:
    return float(np.sum(out * out)), 2.0 * out


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    per_block: Mapping[str, float]
    eps: float
    entries_per_block: int


def finite_difference_grad(loss_fn: Callable[[], float], arr: np.ndarray,
                           flat_index: int, eps: float) -> float:
    """Central difference of a scalar loss wrt one array entry."""
    orig = arr.flat[flat_index]
    arr.flat[flat_index] = orig + eps
    plus = loss_fn()
    arr.flat[flat_index] = orig - eps
    minus = loss_fn()
    arr.flat[flat_index] = orig
    return (plus - minus) / (2.0 * eps)


def _grad_check_fixture(cfg: IpiConfig, seed: int):
    from .skeleton import PoseFrame

    rng = derive_rng(seed, 0xF1D0)
    frames = []
    for _ in range(6):
        body = np.empty((18, 3))
        body[:, 0] = rng.uniform(10, 90, 18)
        body[:, 1] = rng.uniform(10, 90, 18)
        body[:, 2] = rng.uniform(0.5, 1.0, 18)
        frames.append(PoseFrame(body=body))
    pose = PoseSequence(tuple(frames), width=100, height=100, fps=10.0)
    clip_feats = rng.normal(0.0, 1.0, (5, cfg.d_model))
    return pose, clip_feats


def grad_check(
    params: IpiParams,
    cfg: IpiConfig,
    probe: Callable[[np.ndarray], tuple[float, np.ndarray]] = sum_squares_probe,
    eps: float = 1e-6,
    entries_per_block: int = 8,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Every parameter block is checked on a seeded sample of its entries;
    relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
    """
    pose, clip_feats = _grad_check_fixture(cfg, seed)
    work = params.copy()

    out, cache = ipi_forward_cached(clip_feats, pose, work, cfg)
    _, d_out = probe(out)
    analytic = ipi_backward(d_out, cache, work, cfg)

    def loss() -> float:
        value, _ = probe(ipi_forward(clip_feats, pose, work, cfg))
        return value

    idx_rng = derive_rng(seed, 0xC0FFEE)
    per_block: dict[str, float] = {}
    for name, grad in analytic.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite analytic gradient in block {name}")
        arr = work.blocks[name]
        n_check = min(entries_per_block, arr.size)
        indices = idx_rng.choice(arr.size, size=n_check, replace=False)
        worst = 0.0
        for flat_index in indices:
            numeric = finite_difference_grad(loss, arr, int(flat_index), eps)
            if not math.isfinite(numeric):
                raise NumericalError(f"non-finite numeric gradient in block {name}")
            a = float(grad.flat[int(flat_index)])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
        per_block[name] = worst
    return GradCheckReport(
        max_rel_error=max(per_block.values()),
        per_block=per_block,
        eps=eps,
        entries_per_block=entries_per_block,
    )
