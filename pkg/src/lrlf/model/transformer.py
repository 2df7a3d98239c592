"""Pre-LayerNorm encoder-decoder transformer in numpy with explicit backprop.

One embedding matrix is shared by the encoder input, decoder input and the
output projection. Positions use learned embeddings. The activation is the
tanh approximation of GELU, which keeps the loss smooth for finite-difference
checks. All arithmetic runs in the dtype of the parameters (float32 for
training, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..subword import PAD_ID
from .config import ModelConfig

Params = dict[str, np.ndarray]

_NEG = -1e9
_LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    src: np.ndarray  # (B, S) int, PAD-padded on the right
    tgt_in: np.ndarray  # (B, T)
    labels: np.ndarray  # (B, T), PAD where ignored

    @property
    def n_tokens(self) -> int:
        return int((self.labels != PAD_ID).sum())


def pad_to(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(examples: Sequence) -> Batch:
    """Stack examples exposing ``encoder_input``/``decoder_input``/``labels``."""
    return Batch(
        pad_to([tuple(e.encoder_input) for e in examples]),
        pad_to([tuple(e.decoder_input) for e in examples]),
        pad_to([tuple(e.labels) for e in examples]),
    )


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tokens": (cfg.vocab_size, d),
        "embed.enc_pos": (cfg.max_len, d),
        "embed.dec_pos": (cfg.max_len, d),
    }

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.{p}.w"] = (d, d)
            shapes[f"{prefix}.{p}.b"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.fc1.w"] = (d, f)
        shapes[f"{prefix}.fc1.b"] = (f,)
        shapes[f"{prefix}.fc2.w"] = (f, d)
        shapes[f"{prefix}.fc2.b"] = (d,)

    for i in range(cfg.layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self_attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln")
    for i in range(cfg.layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self_attn")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross_attn")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln")
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> Params:
    """Normal(0, std) weights and embeddings, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# building blocks: each forward returns (out, cache); backward accumulates into grads


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, cache, g, grads, prefix):
    xhat, rstd = cache
    grads[f"{prefix}.g"] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    grads[f"{prefix}.b"] += dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    return rstd * (
        dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )


def _linear_back(dy, x, w, grads, prefix):
    grads[f"{prefix}.w"] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[f"{prefix}.b"] += dy.reshape(-1, dy.shape[-1]).sum(0)
    return dy @ w.T


def _split_heads(x, heads):
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * dh)


def _attention(P, prefix, xq, xkv, bias, heads):
    q = xq @ P[f"{prefix}.q.w"] + P[f"{prefix}.q.b"]
    k = xkv @ P[f"{prefix}.k.w"] + P[f"{prefix}.k.b"]
    v = xkv @ P[f"{prefix}.v.w"] + P[f"{prefix}.v.b"]
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = float(qh.shape[-1]) ** -0.5
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale + bias
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(-1, keepdims=True)
    ctx = _merge_heads(a @ vh)
    out = ctx @ P[f"{prefix}.o.w"] + P[f"{prefix}.o.b"]
    return out, (xq, xkv, qh, kh, vh, a, ctx, scale)


def _attention_back(dout, cache, P, grads, prefix, heads):
    xq, xkv, qh, kh, vh, a, ctx, scale = cache
    dctx = _linear_back(dout, ctx, P[f"{prefix}.o.w"], grads, f"{prefix}.o")
    dctxh = _split_heads(dctx, heads)
    da = dctxh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ dctxh
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dxq = _linear_back(_merge_heads(dqh), xq, P[f"{prefix}.q.w"], grads, f"{prefix}.q")
    dxkv = _linear_back(_merge_heads(dkh), xkv, P[f"{prefix}.k.w"], grads, f"{prefix}.k")
    dxkv = dxkv + _linear_back(_merge_heads(dvh), xkv, P[f"{prefix}.v.w"], grads, f"{prefix}.v")
    return dxq, dxkv


def _ffn(P, prefix, x):
    h = x @ P[f"{prefix}.fc1.w"] + P[f"{prefix}.fc1.b"]
    t = np.tanh(_GELU_C * (h + 0.044715 * (h * h * h)))
    act = 0.5 * h * (1.0 + t)
    out = act @ P[f"{prefix}.fc2.w"] + P[f"{prefix}.fc2.b"]
    return out, (x, h, t, act)


def _ffn_back(dout, cache, P, grads, prefix):
    x, h, t, act = cache
    dact = _linear_back(dout, act, P[f"{prefix}.fc2.w"], grads, f"{prefix}.fc2")
    dgelu = 0.5 * (1.0 + t) + 0.5 * h * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * h * h)
    return _linear_back(dact * dgelu, x, P[f"{prefix}.fc1.w"], grads, f"{prefix}.fc1")


class _Dropout:
    def __init__(self, p: float, rng: np.random.Generator | None):
        self.p = p if rng is not None else 0.0
        self.rng = rng

    def __call__(self, x):
        if self.p == 0.0:
            return x, None
        mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * mask, mask


def _apply_mask(dx, mask):
    return dx if mask is None else dx * mask


# ---------------------------------------------------------------------------
# encoder / decoder stacks


def _check_ids(cfg: ModelConfig, ids: np.ndarray, what: str):
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ModelInputError(f"{what} must be a non-empty (batch, length) array")
    if ids.shape[1] > cfg.max_len:
        raise ModelInputError(f"{what} length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ModelInputError(f"{what} has ids outside [0, {cfg.vocab_size})")


def _src_bias(src, dtype):
    return np.where(src == PAD_ID, _NEG, 0.0).astype(dtype)[:, None, None, :]


def _causal_bias(T, dtype):
    return np.triu(np.full((T, T), _NEG, dtype=dtype), k=1)[None, None]


def _encode(P, cfg, src, drop):
    dtype = P["embed.tokens"].dtype
    S = src.shape[1]
    bias = _src_bias(src, dtype)
    x, m0 = drop(P["embed.tokens"][src] + P["embed.enc_pos"][:S])
    layers = []
    for i in range(cfg.layers):
        pre = f"enc.{i}"
        h, c_ln1 = _layer_norm(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
        a, c_att = _attention(P, f"{pre}.self_attn", h, h, bias, cfg.heads)
        a, m1 = drop(a)
        x = x + a
        h, c_ln2 = _layer_norm(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
        f, c_ffn = _ffn(P, f"{pre}.ffn", h)
        f, m2 = drop(f)
        x = x + f
        layers.append((c_ln1, c_att, m1, c_ln2, c_ffn, m2))
    out, c_fin = _layer_norm(x, P["enc.ln.g"], P["enc.ln.b"])
    return out, bias, (src, m0, layers, c_fin)


def _encode_back(dout, cache, P, cfg, grads):
    src, m0, layers, c_fin = cache
    dx = _layer_norm_back(dout, c_fin, P["enc.ln.g"], grads, "enc.ln")
    for i in reversed(range(cfg.layers)):
        pre = f"enc.{i}"
        c_ln1, c_att, m1, c_ln2, c_ffn, m2 = layers[i]
        dh = _ffn_back(_apply_mask(dx, m2), c_ffn, P, grads, f"{pre}.ffn")
        dx = dx + _layer_norm_back(dh, c_ln2, P[f"{pre}.ln2.g"], grads, f"{pre}.ln2")
        dq, dkv = _attention_back(_apply_mask(dx, m1), c_att, P, grads, f"{pre}.self_attn", cfg.heads)
        dx = dx + _layer_norm_back(dq + dkv, c_ln1, P[f"{pre}.ln1.g"], grads, f"{pre}.ln1")
    dx = _apply_mask(dx, m0)
    np.add.at(grads["embed.tokens"], src, dx)
    grads["embed.enc_pos"][: src.shape[1]] += dx.sum(0)


def _decode(P, cfg, tgt, enc_out, src_bias, drop):
    dtype = P["embed.tokens"].dtype
    T = tgt.shape[1]
    causal = _causal_bias(T, dtype)
    y, m0 = drop(P["embed.tokens"][tgt] + P["embed.dec_pos"][:T])
    layers = []
    for i in range(cfg.layers):
        pre = f"dec.{i}"
        h, c_ln1 = _layer_norm(y, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
        a, c_self = _attention(P, f"{pre}.self_attn", h, h, causal, cfg.heads)
        a, m1 = drop(a)
        y = y + a
        h, c_ln2 = _layer_norm(y, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
        a, c_cross = _attention(P, f"{pre}.cross_attn", h, enc_out, src_bias, cfg.heads)
        a, m2 = drop(a)
        y = y + a
        h, c_ln3 = _layer_norm(y, P[f"{pre}.ln3.g"], P[f"{pre}.ln3.b"])
        f, c_ffn = _ffn(P, f"{pre}.ffn", h)
        f, m3 = drop(f)
        y = y + f
        layers.append((c_ln1, c_self, m1, c_ln2, c_cross, m2, c_ln3, c_ffn, m3))
    out, c_fin = _layer_norm(y, P["dec.ln.g"], P["dec.ln.b"])
    return out, (tgt, m0, layers, c_fin)


def _decode_back(dout, cache, P, cfg, grads):
    tgt, m0, layers, c_fin = cache
    dy = _layer_norm_back(dout, c_fin, P["dec.ln.g"], grads, "dec.ln")
    denc = 0.0
    for i in reversed(range(cfg.layers)):
        pre = f"dec.{i}"
        c_ln1, c_self, m1, c_ln2, c_cross, m2, c_ln3, c_ffn, m3 = layers[i]
        dh = _ffn_back(_apply_mask(dy, m3), c_ffn, P, grads, f"{pre}.ffn")
        dy = dy + _layer_norm_back(dh, c_ln3, P[f"{pre}.ln3.g"], grads, f"{pre}.ln3")
        dq, dkv = _attention_back(_apply_mask(dy, m2), c_cross, P, grads, f"{pre}.cross_attn", cfg.heads)
        denc = denc + dkv
        dy = dy + _layer_norm_back(dq, c_ln2, P[f"{pre}.ln2.g"], grads, f"{pre}.ln2")
        dq, dkv = _attention_back(_apply_mask(dy, m1), c_self, P, grads, f"{pre}.self_attn", cfg.heads)
        dy = dy + _layer_norm_back(dq + dkv, c_ln1, P[f"{pre}.ln1.g"], grads, f"{pre}.ln1")
    dy = _apply_mask(dy, m0)
    np.add.at(grads["embed.tokens"], tgt, dy)
    grads["embed.dec_pos"][: tgt.shape[1]] += dy.sum(0)
    return denc


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


# ---------------------------------------------------------------------------
# public API


def forward(P: Params, cfg: ModelConfig, encoder_input, decoder_input) -> np.ndarray:
    """Eval-mode next-token distributions, shape ``(batch, tgt_len, vocab)``."""
    src = np.asarray(encoder_input, dtype=np.int64)
    tgt = np.asarray(decoder_input, dtype=np.int64)
    if src.ndim == 1:
        src, tgt = src[None], tgt[None]
    _check_ids(cfg, src, "encoder input")
    _check_ids(cfg, tgt, "decoder input")
    drop = _Dropout(0.0, None)
    enc, bias, _ = _encode(P, cfg, src, drop)
    dec, _ = _decode(P, cfg, tgt, enc, bias, drop)
    return np.exp(_log_softmax(dec @ P["embed.tokens"].T))


def encode(P: Params, cfg: ModelConfig, src: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode encoder states and the key-padding bias for cross-attention."""
    src = np.asarray(src, dtype=np.int64)
    _check_ids(cfg, src, "encoder input")
    enc, bias, _ = _encode(P, cfg, src, _Dropout(0.0, None))
    return enc, bias


def next_token_logprobs(P: Params, cfg: ModelConfig, enc: np.ndarray, bias: np.ndarray, prefix: np.ndarray) -> np.ndarray:
    """Log-distribution of the token after each row of ``prefix`` (float64)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    _check_ids(cfg, prefix, "decoder input")
    dec, _ = _decode(P, cfg, prefix, enc, bias, _Dropout(0.0, None))
    logits = dec[:, -1] @ P["embed.tokens"].T
    return _log_softmax(logits.astype(np.float64))


def smoothed_targets(labels: np.ndarray, vocab_size: int, eps: float, dtype=np.float64) -> np.ndarray:
    """Target distribution: 1 - eps on the label, eps / (V - 1) on every other id."""
    off = eps / (vocab_size - 1) if vocab_size > 1 else 0.0
    q = np.full(labels.shape + (vocab_size,), off, dtype=dtype)
    np.put_along_axis(q, labels[..., None], 1.0 - eps, axis=-1)
    return q


def loss_and_grads(
    P: Params,
    cfg: ModelConfig,
    batch: Batch,
    label_smoothing: float = 0.0,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    need_grads: bool = True,
) -> tuple[float, Params | None]:
    """Label-smoothed cross-entropy averaged over non-pad labels, and its gradient.

    Dropout is active only when ``dropout > 0`` and an ``rng`` is given.
    """
    _check_ids(cfg, batch.src, "encoder input")
    _check_ids(cfg, batch.tgt_in, "decoder input")
    if batch.tgt_in.shape != batch.labels.shape:
        raise ModelInputError("decoder input and labels must have the same shape")
    drop = _Dropout(dropout, rng)
    enc, bias, enc_cache = _encode(P, cfg, batch.src, drop)
    dec, dec_cache = _decode(P, cfg, batch.tgt_in, enc, bias, drop)
    E = P["embed.tokens"]
    logp = _log_softmax(dec @ E.T)
    mask = batch.labels != PAD_ID
    n = mask.sum()
    if n == 0:
        raise ModelInputError("batch has no target tokens")
    q = smoothed_targets(batch.labels, cfg.vocab_size, label_smoothing, dtype=logp.dtype)
    tok_loss = -(q * logp).sum(-1)
    loss = float((tok_loss * mask).sum() / n)
    if not need_grads:
        return loss, None

    grads = {k: np.zeros_like(v) for k, v in P.items()}
    dlogits = (np.exp(logp) - q) * (mask[..., None] / logp.dtype.type(n))
    grads["embed.tokens"] += dlogits.reshape(-1, cfg.vocab_size).T @ dec.reshape(-1, cfg.d_model)
    ddec = dlogits @ E
    denc = _decode_back(ddec, dec_cache, P, cfg, grads)
    _encode_back(denc, enc_cache, P, cfg, grads)
    return loss, grads


def token_nll(P: Params, cfg: ModelConfig, batch: Batch) -> tuple[float, int]:
    """Summed (unsmoothed) negative log-likelihood and the token count."""
    drop = _Dropout(0.0, None)
    enc, bias, _ = _encode(P, cfg, batch.src, drop)
    dec, _ = _decode(P, cfg, batch.tgt_in, enc, bias, drop)
    logp = _log_softmax((dec @ P["embed.tokens"].T).astype(np.float64))
    mask = batch.labels != PAD_ID
    picked = np.take_along_axis(logp, batch.labels[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum()), int(mask.sum())
