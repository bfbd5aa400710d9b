"""Tiny causal language model with exact forward, hand-written backward, and sampling.

A short stack of pre-layer-norm transformer blocks (2-head self-attention + 4x
sigmoid-GELU feed-forward), weight-tied output projection, fixed sinusoidal position
signals. Test and gradient-check paths run in float64; training loops may opt into
float32.

The network is split into a trunk (everything up to the final hidden states) and the
tied vocabulary head. Losses only need the head at answer rows, so they evaluate it
sparsely; the full per-position distribution API is kept for inspection and tests.

Masking semantics: a position with attention_mask == 0 contributes nothing anywhere.
Its embedding is zeroed, it is excluded as an attention key for every other position,
and its own row only attends to itself, so every output row is a valid distribution
and perturbing the token id at a masked position changes no output at all.

Positions are indexed over attended tokens only (cumulative count of mask == 1), so a
left-padded sequence produces the same content distributions as its unpadded form.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .util import AtmError
from .vocab import EOS_ID, N_SPECIALS

LN_EPS = 1e-5
_GELU_S = 1.702  # sigmoid-form GELU: x * sigmoid(1.702 x)

_BLOCK_SUFFIXES = (
    "ln1_g", "ln1_b",
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
    "ln2_g", "ln2_b",
    "w_f1", "b_f1", "w_f2", "b_f2",
)


@dataclass(frozen=True)
class Dims:
    """Shape record for one model; every tensor shape derives from it."""

    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    context_len: int = 256
    n_blocks: int = 2

    def validate(self) -> None:
        if self.vocab_size < N_SPECIALS:
            raise AtmError(f"vocab_size {self.vocab_size} < {N_SPECIALS} structural tokens")
        if self.context_len < 16:
            raise AtmError(f"context_len {self.context_len} < 16")
        if self.d_model < 2 or self.d_model % self.n_heads != 0:
            raise AtmError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_blocks < 1:
            raise AtmError("need at least one transformer block")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, d, f = self.vocab_size, self.d_model, self.d_ff
        out: dict[str, tuple[int, ...]] = {"w_emb": (v, d)}
        per_block = {
            "ln1_g": (d,), "ln1_b": (d,),
            "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
            "w_v": (d, d), "b_v": (d,), "w_o": (d, d), "b_o": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "w_f1": (d, f), "b_f1": (f,), "w_f2": (f, d), "b_f2": (d,),
        }
        for i in range(self.n_blocks):
            for suffix, shape in per_block.items():
                out[f"blk{i}_{suffix}"] = shape
        out["lnf_g"] = (d,)
        out["lnf_b"] = (d,)
        return out


def param_names(dims: Dims) -> tuple[str, ...]:
    """Tensor names in checkpoint/serialization order."""
    names = ["w_emb"]
    for i in range(dims.n_blocks):
        names.extend(f"blk{i}_{s}" for s in _BLOCK_SUFFIXES)
    names.extend(["lnf_g", "lnf_b"])
    return tuple(names)


@dataclass
class ModelParams:
    """All parameters of one agent. The output projection is tied to w_emb."""

    dims: Dims
    tensors: dict[str, np.ndarray]

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise AtmError(f"non-finite values in parameter {name}")

    def check_shapes(self) -> None:
        want = self.dims.shapes()
        if set(want) != set(self.tensors):
            raise AtmError("parameter set does not match dims record")
        for name, shape in want.items():
            if self.tensors[name].shape != shape:
                raise AtmError(f"tensor {name} has shape {self.tensors[name].shape}, want {shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class TokenSeq:
    """Token ids plus attention/loss masks; loss-bearing positions are never masked out."""

    ids: np.ndarray
    attention_mask: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.int64)
        n = len(self.ids)
        if len(self.attention_mask) != n or len(self.loss_mask) != n:
            raise AtmError("ids/attention_mask/loss_mask lengths differ")
        if np.any(self.loss_mask > self.attention_mask):
            raise AtmError("loss mask marks an attention-masked position")

    def __len__(self) -> int:
        return len(self.ids)

    def left_pad_to(self, length: int, pad_id: int = 0) -> "TokenSeq":
        extra = length - len(self)
        if extra < 0:
            raise AtmError(f"cannot pad length-{len(self)} sequence down to {length}")
        if extra == 0:
            return self
        z = np.zeros(extra, dtype=np.int64)
        return TokenSeq(
            np.concatenate([z + pad_id, self.ids]),
            np.concatenate([z, self.attention_mask]),
            np.concatenate([z, self.loss_mask]),
        )


def init_params(seed: int, dims: Dims) -> ModelParams:
    """Deterministic init: scaled normal weights, zero biases, unit layer-norm gains.

    The tied embedding starts at a larger std than the projections; with a tied
    head the unembedding rows otherwise take thousands of steps just to grow the
    logit scale needed for confident predictions.
    """
    dims.validate()
    from .util import subrng

    rng = subrng(seed, "model-init")
    tensors: dict[str, np.ndarray] = {}
    for name in param_names(dims):
        shape = dims.shapes()[name]
        base = name.split("_", 1)[-1] if name.startswith("blk") else name
        if base.startswith("b_") or base.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        elif base.endswith("_g"):
            tensors[name] = np.ones(shape, dtype=np.float64)
        else:
            std = 0.06 if name == "w_emb" else 0.02
            tensors[name] = rng.normal(0.0, std, size=shape)
    params = ModelParams(dims, tensors)
    params.check_shapes()
    params.check_finite()
    return params


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _position_signal(context_len: int, d_model: int) -> np.ndarray:
    key = (context_len, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(context_len)[:, None]
        i = np.arange(d_model)[None, :]
        angle = pos / (10000.0 ** (2 * (i // 2) / d_model))
        pe = np.zeros((context_len, d_model), dtype=np.float64)
        pe[:, 0::2] = np.sin(angle[:, 0::2])
        pe[:, 1::2] = np.cos(angle[:, 1::2])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / sigma
    return xhat * gain + bias, (xhat, sigma, gain)


def _ln_backward(dy, cache):
    xhat, sigma, gain = cache
    ghat = dy * gain
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) / sigma
    d_gain = (dy * xhat).sum(axis=(0, 1))
    d_bias = dy.sum(axis=(0, 1))
    return dx, d_gain, d_bias


def _gelu(x):
    """Sigmoid-form GELU; returns (value, sigmoid term) so backward reuses it."""
    s = 1.0 / (1.0 + np.exp(-_GELU_S * x))
    return x * s, s


def _gelu_prime(x, s):
    return s * (1.0 + _GELU_S * x * (1.0 - s))


@dataclass
class BlockCache:
    x_in: np.ndarray
    ln1: tuple
    h1: np.ndarray
    qh: np.ndarray            # (B, H, T, dh)
    kh: np.ndarray
    vh: np.ndarray
    attn: np.ndarray          # (B, H, T, T)
    ctx: np.ndarray           # (B, T, D)
    x_mid: np.ndarray
    ln2: tuple
    h2: np.ndarray
    u: np.ndarray             # (B, T, 4D)
    gelu_s: np.ndarray


@dataclass
class TrunkCache:
    """Intermediate activations retained for the hand-written backward pass."""

    dtype: type
    ids: np.ndarray
    mask: np.ndarray          # (B, T) float
    allowed: np.ndarray       # (B, 1, T, T) bool
    blocks: list
    lnf: tuple
    hf: np.ndarray


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _as_batch(ids, attn_mask):
    ids = np.asarray(ids, dtype=np.int64)
    attn_mask = np.asarray(attn_mask)
    if ids.ndim == 1:
        ids = ids[None, :]
        attn_mask = attn_mask[None, :]
    return ids, attn_mask


def _block_forward(p, prefix, x, allowed, dims, need_cache):
    h1, ln1 = _ln_forward(x, p[f"{prefix}ln1_g"], p[f"{prefix}ln1_b"])
    qh = _split_heads(h1 @ p[f"{prefix}w_q"] + p[f"{prefix}b_q"], dims.n_heads)
    kh = _split_heads(h1 @ p[f"{prefix}w_k"] + p[f"{prefix}b_k"], dims.n_heads)
    vh = _split_heads(h1 @ p[f"{prefix}w_v"] + p[f"{prefix}b_v"], dims.n_heads)

    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(np.asarray(dims.d_head, dtype=x.dtype))
    scores = np.where(allowed, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)

    ctx = _merge_heads(attn @ vh)
    x_mid = x + ctx @ p[f"{prefix}w_o"] + p[f"{prefix}b_o"]

    h2, ln2 = _ln_forward(x_mid, p[f"{prefix}ln2_g"], p[f"{prefix}ln2_b"])
    u = h2 @ p[f"{prefix}w_f1"] + p[f"{prefix}b_f1"]
    ag, gelu_s = _gelu(u)
    x_out = x_mid + ag @ p[f"{prefix}w_f2"] + p[f"{prefix}b_f2"]
    cache = None
    if need_cache:
        cache = BlockCache(x, ln1, h1, qh, kh, vh, attn, ctx, x_mid, ln2, h2, u, gelu_s)
    return x_out, cache


def _block_backward(p, g, prefix, cache: BlockCache, d_out, dims):
    b, t, d = d_out.shape
    # feed-forward
    d_x_mid = d_out
    flat_df = d_out.reshape(b * t, d)
    ag = cache.u * cache.gelu_s
    g[f"{prefix}w_f2"] += ag.reshape(b * t, -1).T @ flat_df
    g[f"{prefix}b_f2"] += flat_df.sum(axis=0)
    d_ag = flat_df @ p[f"{prefix}w_f2"].T
    d_u = d_ag.reshape(b, t, -1) * _gelu_prime(cache.u, cache.gelu_s)
    flat_du = d_u.reshape(b * t, -1)
    g[f"{prefix}w_f1"] += cache.h2.reshape(b * t, d).T @ flat_du
    g[f"{prefix}b_f1"] += flat_du.sum(axis=0)
    d_h2 = (flat_du @ p[f"{prefix}w_f1"].T).reshape(b, t, d)
    d_ln2, g[f"{prefix}ln2_g"], g[f"{prefix}ln2_b"] = _ln_backward(d_h2, cache.ln2)
    d_x_mid = d_x_mid + d_ln2

    # attention
    flat_dao = d_x_mid.reshape(b * t, d)
    g[f"{prefix}w_o"] += cache.ctx.reshape(b * t, d).T @ flat_dao
    g[f"{prefix}b_o"] += flat_dao.sum(axis=0)
    d_ctxh = _split_heads((flat_dao @ p[f"{prefix}w_o"].T).reshape(b, t, d), dims.n_heads)

    d_attn = d_ctxh @ cache.vh.transpose(0, 1, 3, 2)
    d_vh = cache.attn.transpose(0, 1, 3, 2) @ d_ctxh
    rowdot = (d_attn * cache.attn).sum(axis=-1, keepdims=True)
    d_scores = (d_attn - rowdot) * cache.attn
    scale = 1.0 / np.sqrt(np.asarray(dims.d_head, dtype=d_out.dtype))
    d_qh = d_scores @ cache.kh * scale
    d_kh = d_scores.transpose(0, 1, 3, 2) @ cache.qh * scale

    d_q = _merge_heads(d_qh).reshape(b * t, d)
    d_k = _merge_heads(d_kh).reshape(b * t, d)
    d_v = _merge_heads(d_vh).reshape(b * t, d)
    flat_h1 = cache.h1.reshape(b * t, d)
    g[f"{prefix}w_q"] += flat_h1.T @ d_q
    g[f"{prefix}b_q"] += d_q.sum(axis=0)
    g[f"{prefix}w_k"] += flat_h1.T @ d_k
    g[f"{prefix}b_k"] += d_k.sum(axis=0)
    g[f"{prefix}w_v"] += flat_h1.T @ d_v
    g[f"{prefix}b_v"] += d_v.sum(axis=0)
    d_h1 = (d_q @ p[f"{prefix}w_q"].T + d_k @ p[f"{prefix}w_k"].T
            + d_v @ p[f"{prefix}w_v"].T).reshape(b, t, d)
    d_ln1, g[f"{prefix}ln1_g"], g[f"{prefix}ln1_b"] = _ln_backward(d_h1, cache.ln1)
    return d_x_mid + d_ln1


def trunk_forward(params: ModelParams, ids: np.ndarray, attn_mask: np.ndarray,
                  need_cache: bool = False, dtype=np.float64):
    """Final hidden states (B, T, D); row t encodes everything needed to predict t+1."""
    dims = params.dims
    ids, attn_mask = _as_batch(ids, attn_mask)
    b, t = ids.shape
    if t > dims.context_len:
        raise AtmError(f"sequence length {t} exceeds context_len {dims.context_len}")
    if np.any(ids < 0) or np.any(ids >= dims.vocab_size):
        raise AtmError("token id out of vocabulary range")
    p = {k: v.astype(dtype, copy=False) for k, v in params.tensors.items()}
    mask = attn_mask.astype(dtype)

    pe = _position_signal(dims.context_len, dims.d_model).astype(dtype, copy=False)
    pos = np.maximum(np.cumsum(attn_mask, axis=1).astype(np.int64) - 1, 0)
    x = (p["w_emb"][ids] + pe[pos]) * mask[:, :, None]
    x0_mask = mask

    causal = np.tril(np.ones((t, t), dtype=bool))
    key_ok = (mask > 0)[:, None, None, :] | np.eye(t, dtype=bool)[None, None, :, :]
    allowed = causal[None, None, :, :] & key_ok

    block_caches = []
    for i in range(dims.n_blocks):
        x, cache = _block_forward(p, f"blk{i}_", x, allowed, dims, need_cache)
        block_caches.append(cache)

    hf, lnf = _ln_forward(x, p["lnf_g"], p["lnf_b"])
    cache = None
    if need_cache:
        cache = TrunkCache(dtype, ids, x0_mask, allowed, block_caches, lnf, hf)
    return hf, cache


def head_log_probs(params: ModelParams, hf_rows: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Log-probabilities of the tied vocabulary head for a set of hidden rows."""
    w = params.tensors["w_emb"].astype(dtype, copy=False)
    logits = hf_rows @ w.T
    logits -= logits.max(axis=-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def trunk_backward(params: ModelParams, cache: TrunkCache, d_hf: np.ndarray,
                   g_emb_extra: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients w.r.t. every parameter given dLoss/d(final hidden states).

    g_emb_extra carries the tied head's direct contribution to the embedding grad.
    """
    dims = params.dims
    dtype = cache.dtype
    p = {k: v.astype(dtype, copy=False) for k, v in params.tensors.items()}
    b, t, d = d_hf.shape

    g = {name: np.zeros(params.tensors[name].shape, dtype=dtype)
         for name in params.tensors}
    if g_emb_extra is not None:
        g["w_emb"] += g_emb_extra

    d_x, g["lnf_g"], g["lnf_b"] = _ln_backward(d_hf, cache.lnf)
    for i in reversed(range(dims.n_blocks)):
        d_x = _block_backward(p, g, f"blk{i}_", cache.blocks[i], d_x, dims)

    # embedding lookup; masked positions contributed zero, so their grads vanish
    d_emb = (d_x * cache.mask[:, :, None]).reshape(b * t, d)
    np.add.at(g["w_emb"], cache.ids.reshape(-1), d_emb)
    return g


def forward_batch(params: ModelParams, ids: np.ndarray, attn_mask: np.ndarray,
                  need_cache: bool = False, dtype=np.float64):
    """Full next-token log-probabilities (B, T, V); row t predicts the token at t+1."""
    hf, cache = trunk_forward(params, ids, attn_mask, need_cache, dtype)
    return head_log_probs(params, hf, dtype), cache


# ----------------------------- spec-facing single-sequence ops -----------------------------


def next_token_distributions(params: ModelParams, seq: TokenSeq) -> np.ndarray:
    """Per-position probability vectors over the vocabulary; row t predicts token t+1."""
    logp, _ = forward_batch(params, seq.ids, seq.attention_mask)
    return np.exp(logp[0])


def span_log_prob(log_probs: np.ndarray, ids: Sequence[int], loss_mask: Sequence[int]) -> float:
    """Sum of log P(ids[t]) over loss-masked positions t, reading row t-1 of log_probs.

    Pure helper so tests can drive it with hand-built (stub) distributions.
    """
    ids = np.asarray(ids, dtype=np.int64)
    loss_mask = np.asarray(loss_mask)
    positions = np.flatnonzero(loss_mask)
    if positions.size == 0:
        raise AtmError("empty answer span")
    if positions[0] == 0:
        raise AtmError("loss-masked position 0 has no predecessor to predict it")
    return float(log_probs[positions - 1, ids[positions]].sum())


def answer_log_prob(params: ModelParams, seq: TokenSeq) -> float:
    """log of the product of per-token answer probabilities; always <= 0."""
    positions = np.flatnonzero(seq.loss_mask)
    if positions.size == 0:
        raise AtmError("empty answer span")
    if positions[0] == 0:
        raise AtmError("loss-masked position 0 has no predecessor to predict it")
    hf, _ = trunk_forward(params, seq.ids, seq.attention_mask)
    logp_rows = head_log_probs(params, hf[0][positions - 1])
    return float(logp_rows[np.arange(len(positions)), seq.ids[positions]].sum())


def perplexity_from_log_prob(total_log_prob: float, n_tokens: int) -> float:
    if n_tokens <= 0:
        raise AtmError("perplexity needs a non-empty answer span")
    with np.errstate(over="ignore"):
        return float(np.exp(-total_log_prob / n_tokens))


def perplexity(params: ModelParams, seq: TokenSeq) -> float:
    """exp of the mean answer negative log-likelihood; >= 1 by construction."""
    n = int(seq.loss_mask.sum())
    return perplexity_from_log_prob(answer_log_prob(params, seq), n)


# ----------------------------- sampling -----------------------------


def _nucleus_pick(probs: np.ndarray, top_p: float, u: float) -> int:
    """Token from the smallest descending-probability prefix with mass >= top_p."""
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, top_p, side="left")) + 1
    cut = min(cut, len(order))
    nucleus = order[:cut]
    w = probs[nucleus]
    w = w / w.sum()
    idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
    return int(nucleus[min(idx, cut - 1)])


def sample_batch(params: ModelParams, prompts: list[TokenSeq], max_new: int,
                 temperature: float, top_p: float,
                 rng: Optional[np.random.Generator],
                 dtype=np.float64) -> list[list[int]]:
    """Autoregressive decode for several prompts at once; one shared rng stream.

    temperature == 0 means greedy argmax (the degenerate nucleus); otherwise nucleus
    sampling over softmax(logits / temperature). Rows stop at <eos> or after max_new
    tokens; finished rows grow with masked pads so they cannot influence the rest.
    """
    if temperature < 0:
        raise AtmError(f"temperature must be >= 0, got {temperature}")
    if not (0.0 < top_p <= 1.0):
        raise AtmError(f"top_p must be in (0, 1], got {top_p}")
    if max_new < 1:
        raise AtmError("max_new must be >= 1")
    if temperature > 0 and rng is None:
        raise AtmError("sampling with temperature > 0 needs an rng")

    b = len(prompts)
    width = max(len(s) for s in prompts)
    ids = np.stack([s.left_pad_to(width).ids for s in prompts])
    mask = np.stack([s.left_pad_to(width).attention_mask for s in prompts])

    out: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for _ in range(max_new):
        hf, _ = trunk_forward(params, ids, mask, dtype=dtype)
        last = head_log_probs(params, hf[:, -1, :], dtype)   # (B, V) next-token dist
        if temperature == 0.0:
            picks = np.argmax(last, axis=-1)
        else:
            probs = np.exp(last / temperature)
            probs /= probs.sum(axis=-1, keepdims=True)
            draws = rng.random(b)
            picks = np.array([_nucleus_pick(probs[i], top_p, draws[i]) for i in range(b)])
        new_ids = np.zeros((b, 1), dtype=np.int64)
        new_mask = np.zeros((b, 1), dtype=np.int64)
        for i in range(b):
            if done[i]:
                continue
            tok = int(picks[i])
            new_ids[i, 0] = tok
            new_mask[i, 0] = 1
            if tok == EOS_ID:
                done[i] = True
            else:
                out[i].append(tok)
        ids = np.concatenate([ids, new_ids], axis=1)
        mask = np.concatenate([mask, new_mask], axis=1)
        if done.all():
            break
        if ids.shape[1] >= params.dims.context_len:
            break
    return out


def sample(params: ModelParams, prefix: TokenSeq, max_new: int, temperature: float,
           top_p: float, rng: Optional[np.random.Generator]) -> list[int]:
    """Nucleus-sample a continuation of one prompt; stops at <eos> or max_new."""
    return sample_batch(params, [prefix], max_new, temperature, top_p, rng)[0]
