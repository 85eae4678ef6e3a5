"""Encoder-decoder transformer with a retrieval-biased cross-attention.

The retriever is the first half of the encoder: a segment's embedding is the
L2-normalized hidden state at the BOS slot after encoder layers 1..E/2. Cross
attention from source segments to target segments adds beta * e(target).e(source)
to every (query token, key token) logit of that segment pair, and the softmax
normalizes over all source tokens in the sub-batch. Because the bias sits in
the same graph as the generator loss, gradients reach the embedder through it.

A segment-level causality mask blocks a target from attending to segments of
the same sample at equal or later positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, VOCAB
from .errors import ShapeError, UsageError

if TYPE_CHECKING:
    from .batching import SubBatch

CROSS_MODES = ("biased", "plain", "off")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    segment_len: int = 32
    vocab: int = VOCAB
    beta_init: float = 1.0
    cross_attention: str = "biased"  # biased | plain (no bias term) | off (zeroed)

    def __post_init__(self):
        if min(self.d_model, self.d_ff, self.n_heads, self.encoder_layers,
               self.decoder_layers, self.segment_len, self.vocab) <= 0:
            raise UsageError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise UsageError(f"d_model ({self.d_model}) must divide into n_heads ({self.n_heads})")
        if self.encoder_layers % 2 != 0:
            raise UsageError("encoder_layers must be even so the embedder is a well-defined half")
        if self.cross_attention not in CROSS_MODES:
            raise UsageError(f"cross_attention must be one of {CROSS_MODES}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def embedder_layers(self) -> int:
        return self.encoder_layers // 2


def init_params(cfg: ModelConfig, seed: int, dtype: str = "float64") -> dict[str, Tensor]:
    """Fresh parameter dict; draw order is fixed so seeds reproduce exactly."""
    dt = np.dtype(dtype)
    rng = np.random.Generator(np.random.Philox(seed))
    params: dict[str, Tensor] = {}

    def w(name, shape, std=0.02):
        params[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    d, dff, v = cfg.d_model, cfg.d_ff, cfg.vocab
    w("enc_emb", (v, d))
    w("dec_emb", (v, d))
    for i in range(cfg.encoder_layers):
        ones(f"enc{i}_ln1_g", (d,)); zeros(f"enc{i}_ln1_b", (d,))
        w(f"enc{i}_wq", (d, d)); w(f"enc{i}_wk", (d, d))
        w(f"enc{i}_wv", (d, d)); w(f"enc{i}_wo", (d, d))
        ones(f"enc{i}_ln2_g", (d,)); zeros(f"enc{i}_ln2_b", (d,))
        w(f"enc{i}_ffn_w1", (d, dff)); zeros(f"enc{i}_ffn_b1", (dff,))
        w(f"enc{i}_ffn_w2", (dff, d)); zeros(f"enc{i}_ffn_b2", (d,))
    ones("enc_lnf_g", (d,)); zeros("enc_lnf_b", (d,))
    for i in range(cfg.decoder_layers):
        ones(f"dec{i}_ln1_g", (d,)); zeros(f"dec{i}_ln1_b", (d,))
        w(f"dec{i}_wq", (d, d)); w(f"dec{i}_wk", (d, d))
        w(f"dec{i}_wv", (d, d)); w(f"dec{i}_wo", (d, d))
        ones(f"dec{i}_lnc_g", (d,)); zeros(f"dec{i}_lnc_b", (d,))
        w(f"dec{i}_cq", (d, d)); w(f"dec{i}_ck", (d, d))
        w(f"dec{i}_cv", (d, d)); w(f"dec{i}_co", (d, d))
        ones(f"dec{i}_ln2_g", (d,)); zeros(f"dec{i}_ln2_b", (d,))
        w(f"dec{i}_ffn_w1", (d, dff)); zeros(f"dec{i}_ffn_b1", (dff,))
        w(f"dec{i}_ffn_w2", (dff, d)); zeros(f"dec{i}_ffn_b2", (d,))
    ones("dec_lnf_g", (d,)); zeros("dec_lnf_b", (d,))
    w("out_w", (d, v))
    zeros("out_b", (v,))
    params["beta"] = Tensor(np.asarray(cfg.beta_init, dtype=dt), requires_grad=True)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def params_dtype(params: dict[str, Tensor]) -> np.dtype:
    return params["enc_emb"].dtype


def sinusoidal_positions(t: int, d: int, dtype) -> np.ndarray:
    """Fixed sin/cos position table; positions restart for every segment."""
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * np.floor(i / 2.0)) / d)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


def decoder_self_attention_mask(t: int) -> np.ndarray:
    """Token-level causal mask: True blocks attention to strictly later positions."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def causality_mask(source_refs, target_refs) -> np.ndarray:
    """Segment-level mask, shape (n_sources, n_targets); True blocks the pair.

    Source (s, u) is blocked for target (s, v) iff same sample and u >= v.
    Cross-sample pairs are never blocked.
    """
    src = np.asarray(source_refs, dtype=np.int64).reshape(-1, 2)
    tgt = np.asarray(target_refs, dtype=np.int64).reshape(-1, 2)
    same = src[:, 0][:, None] == tgt[:, 0][None, :]
    future = src[:, 1][:, None] >= tgt[:, 1][None, :]
    return same & future


def _topk_keep(x: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask keeping the k largest entries along the last axis."""
    if k >= x.shape[-1]:
        return np.ones_like(x)
    idx = np.argpartition(-x, k - 1, axis=-1)[..., :k]
    keep = np.zeros_like(x)
    np.put_along_axis(keep, idx, 1.0, axis=-1)
    return keep


def _ffn(params, prefix: str, x: Tensor, ffn_topk: int | None) -> Tensor:
    h = ad.gelu(ad.matmul(x, params[f"{prefix}_w1"]) + params[f"{prefix}_b1"])
    if ffn_topk is not None:
        h = h * Tensor(_topk_keep(h.data, ffn_topk))
    return ad.matmul(h, params[f"{prefix}_w2"]) + params[f"{prefix}_b2"]


def _heads(x: Tensor, n_heads: int, d_k: int) -> Tensor:
    b, t, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d_k)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def _self_attention(params, prefix: str, cfg: ModelConfig, x: Tensor,
                    mask: np.ndarray | None) -> Tensor:
    q = _heads(ad.matmul(x, params[f"{prefix}_wq"]), cfg.n_heads, cfg.d_k)
    k = _heads(ad.matmul(x, params[f"{prefix}_wk"]), cfg.n_heads, cfg.d_k)
    v = _heads(ad.matmul(x, params[f"{prefix}_wv"]), cfg.n_heads, cfg.d_k)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(cfg.d_k))
    probs = ad.masked_biased_softmax(scores, None, mask)
    out = _merge_heads(ad.matmul(probs, v))
    return ad.matmul(out, params[f"{prefix}_wo"])


def _encoder_stack(params, cfg: ModelConfig, tokens: np.ndarray, upto: int,
                   ffn_topk: int | None = None):
    """Run encoder layers 0..upto-1 over [BOS]+tokens; returns hidden states."""
    b, n = tokens.shape
    if n != cfg.segment_len:
        raise ShapeError(f"segments must have length {cfg.segment_len}, got {n}")
    ids = np.concatenate([np.full((b, 1), BOS, dtype=np.int64), tokens.astype(np.int64)], axis=1)
    dt = params_dtype(params)
    x = ad.embedding(params["enc_emb"], ids) + Tensor(sinusoidal_positions(n + 1, cfg.d_model, dt))
    for i in range(upto):
        a = ad.layer_norm(x, params[f"enc{i}_ln1_g"], params[f"enc{i}_ln1_b"])
        x = x + _self_attention(params, f"enc{i}", cfg, a, None)
        f = ad.layer_norm(x, params[f"enc{i}_ln2_g"], params[f"enc{i}_ln2_b"])
        x = x + _ffn(params, f"enc{i}_ffn", f, ffn_topk)
    return x


def embed_segments(params, cfg: ModelConfig, tokens: np.ndarray) -> Tensor:
    """Segment embeddings for a (batch, N) token array: the unit-normalized
    hidden state at the BOS slot after the first half of the encoder."""
    x = _encoder_stack(params, cfg, tokens, cfg.embedder_layers)
    return ad.l2_normalize(ad.getitem(x, (slice(None), 0)))


def embed_segment(params, cfg: ModelConfig, segment) -> np.ndarray:
    """Embedding of one Segment as a plain unit vector (no graph kept)."""
    with ad.no_grad():
        e = embed_segments(params, cfg, np.asarray(segment.tokens)[None, :])
    return e.data[0].copy()


def encode_sources(params, cfg: ModelConfig, tokens: np.ndarray,
                   ffn_topk: int | None = None) -> tuple[Tensor, Tensor]:
    """Full-depth encoder outputs plus the half-depth segment embeddings.

    Both come from one pass so the embedder shares weights (and gradients)
    with the encoder proper.
    """
    x = _encoder_stack(params, cfg, tokens, cfg.embedder_layers, ffn_topk)
    e = ad.l2_normalize(ad.getitem(x, (slice(None), 0)))
    for i in range(cfg.embedder_layers, cfg.encoder_layers):
        a = ad.layer_norm(x, params[f"enc{i}_ln1_g"], params[f"enc{i}_ln1_b"])
        x = x + _self_attention(params, f"enc{i}", cfg, a, None)
        f = ad.layer_norm(x, params[f"enc{i}_ln2_g"], params[f"enc{i}_ln2_b"])
        x = x + _ffn(params, f"enc{i}_ffn", f, ffn_topk)
    return ad.layer_norm(x, params["enc_lnf_g"], params["enc_lnf_b"]), e


def biased_cross_attention(queries: Tensor, keys: Tensor, values: Tensor,
                           pair_bias: Tensor | None, token_mask: np.ndarray | None) -> Tensor:
    """Attention core: softmax over all source tokens with an additive
    per-segment-pair bias broadcast token-wise.

    queries: (m_t, h, Tq, d_k); keys/values: (h, S, d_k) flattened over all
    source segments; pair_bias: broadcastable to (m_t, 1, 1, S); token_mask:
    True blocks a source token for a target. Targets whose sources are all
    blocked get exactly-zero output rows.
    """
    dk = queries.shape[-1]
    scores = ad.matmul(queries, ad.transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(dk))
    probs = ad.masked_biased_softmax(scores, pair_bias, token_mask)
    return ad.matmul(probs, values)


def forward_subbatch(params, cfg: ModelConfig, sub: "SubBatch",
                     ffn_topk: int | None = None) -> Tensor:
    """Per-token prediction losses (m_targets, N) for one sub-batch, in nats.

    Sources go through the full encoder; targets are decoded with causal
    self-attention and cross-attention over every source token in the
    sub-batch, biased by beta * e(target).e(source) when cfg.cross_attention
    is "biased". Embeddings are part of the same graph, so the loss gradient
    reaches the embedder through the bias.
    """
    src_tokens = np.stack([np.asarray(s.tokens) for s in sub.sources])
    tgt_tokens = np.stack([np.asarray(t.tokens) for t in sub.targets])
    m_s, n = src_tokens.shape
    m_t = tgt_tokens.shape[0]
    if sub.mask.shape != (m_s, m_t):
        raise ShapeError(f"mask shape {sub.mask.shape} does not match (sources, targets) ({m_s}, {m_t})")
    t_len = n + 1
    dt = params_dtype(params)
    mode = cfg.cross_attention

    dec_ids = np.concatenate([np.full((m_t, 1), BOS, dtype=np.int64),
                              tgt_tokens.astype(np.int64)], axis=1)
    x = ad.embedding(params["dec_emb"], dec_ids) + Tensor(sinusoidal_positions(t_len, cfg.d_model, dt))
    self_mask = decoder_self_attention_mask(t_len)

    if mode == "off":
        enc_flat = pair_bias = token_mask = None
    else:
        enc_out, e_z = encode_sources(params, cfg, src_tokens, ffn_topk)
        e_x = embed_segments(params, cfg, tgt_tokens)
        enc_flat = ad.reshape(enc_out, (m_s * t_len, cfg.d_model))
        if mode == "biased":
            pairs = params["beta"] * ad.matmul(e_x, ad.transpose(e_z, (1, 0)))  # (m_t, m_s)
            pair_bias = ad.reshape(
                ad.broadcast_to(ad.reshape(pairs, (m_t, 1, 1, m_s, 1)), (m_t, 1, 1, m_s, t_len)),
                (m_t, 1, 1, m_s * t_len))
        else:
            pair_bias = None
        token_mask = np.repeat(sub.mask.T, t_len, axis=1).reshape(m_t, 1, 1, m_s * t_len)

    for i in range(cfg.decoder_layers):
        a = ad.layer_norm(x, params[f"dec{i}_ln1_g"], params[f"dec{i}_ln1_b"])
        x = x + _self_attention(params, f"dec{i}", cfg, a, self_mask)
        if mode != "off":
            c = ad.layer_norm(x, params[f"dec{i}_lnc_g"], params[f"dec{i}_lnc_b"])
            q = _heads(ad.matmul(c, params[f"dec{i}_cq"]), cfg.n_heads, cfg.d_k)
            k = _heads(ad.matmul(ad.reshape(enc_flat, (1, m_s * t_len, cfg.d_model)),
                                 params[f"dec{i}_ck"]), cfg.n_heads, cfg.d_k)
            v = _heads(ad.matmul(ad.reshape(enc_flat, (1, m_s * t_len, cfg.d_model)),
                                 params[f"dec{i}_cv"]), cfg.n_heads, cfg.d_k)
            att = biased_cross_attention(q, ad.getitem(k, 0), ad.getitem(v, 0),
                                         pair_bias, token_mask)
            x = x + ad.matmul(_merge_heads(att), params[f"dec{i}_co"])
        f = ad.layer_norm(x, params[f"dec{i}_ln2_g"], params[f"dec{i}_ln2_b"])
        x = x + _ffn(params, f"dec{i}_ffn", f, ffn_topk)

    x = ad.layer_norm(x, params["dec_lnf_g"], params["dec_lnf_b"])
    logits = ad.matmul(x, params["out_w"]) + params["out_b"]
    return ad.token_nll(ad.getitem(logits, (slice(None), slice(0, n))), tgt_tokens.astype(np.int64))
