"""Transformer encoder stack and the two decoder layer variants.

The decoder mixes two layer kinds: a transfer layer that carries two
feed-forward sub-blocks (self-attention -> FFN1 -> cross-attention ->
FFN2, each with its own residual + layer norm) so every block can receive
encoder weights, and a conventional layer (self-attention ->
cross-attention -> FFN). Residuals are post-norm, activations are GELU,
positions are learned absolute embeddings shared by encoder and decoder,
and the output projection is tied to the token embedding table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, VocabError
from .tensor import (
    MASK_FILL,
    Tensor,
    add,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax,
    softmax_cross_entropy,
    transpose,
)

# Reserved vocabulary ids, fixed by construction (see data module).
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
UNK_ID = 4
N_RESERVED = 5


@dataclass
class ModelConfig:
    n_encoder_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    insert_every_x: int = 3

    def validate(self):
        if self.n_encoder_layers < 1:
            raise ConfigError("n_encoder_layers must be >= 1")
        if self.insert_every_x < 1:
            raise ConfigError("insert_every_x must be >= 1")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_ff < 1:
            raise ConfigError("d_model, n_heads and d_ff must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model (%d) must be divisible by n_heads (%d)"
                              % (self.d_model, self.n_heads))
        if self.vocab_size <= N_RESERVED:
            raise ConfigError("vocab_size must exceed the %d reserved ids" % N_RESERVED)
        return self

    def to_dict(self):
        return {
            "n_encoder_layers": self.n_encoder_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "insert_every_x": self.insert_every_x,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


class AttentionParams:
    """Q, K, V, O projections (each d_model x d_model) with biases."""

    FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __init__(self, wq, bq, wk, bk, wv, bv, wo, bo):
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo, self.bo = wo, bo

    def named_tensors(self, prefix):
        for field in self.FIELDS:
            yield prefix + "." + field, getattr(self, field)


class FeedForwardParams:
    """Two-layer position-wise network d_model -> d_ff -> d_model."""

    FIELDS = ("w1", "b1", "w2", "b2")

    def __init__(self, w1, b1, w2, b2):
        self.w1, self.b1 = w1, b1
        self.w2, self.b2 = w2, b2

    def apply(self, x: Tensor) -> Tensor:
        h = gelu(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)

    def named_tensors(self, prefix):
        for field in self.FIELDS:
            yield prefix + "." + field, getattr(self, field)


class LayerNormParams:
    FIELDS = ("gain", "bias")

    def __init__(self, gain, bias):
        self.gain = gain
        self.bias = bias

    def named_tensors(self, prefix):
        yield prefix + ".gain", self.gain
        yield prefix + ".bias", self.bias


class EncoderLayerParams:
    """Self-attention and FFN blocks, post-norm residuals."""

    SUBBLOCKS = ("attn", "attn_norm", "ffn", "ffn_norm")

    def __init__(self, attn, attn_norm, ffn, ffn_norm):
        self.attn = attn
        self.attn_norm = attn_norm
        self.ffn = ffn
        self.ffn_norm = ffn_norm

    def named_tensors(self, prefix):
        for sub in self.SUBBLOCKS:
            yield from getattr(self, sub).named_tensors(prefix + "." + sub)


class CustomDecoderLayerParams:
    """Transfer decoder layer: self-attn -> FFN1 -> cross-attn -> FFN2."""

    KIND = "custom"
    SUBBLOCKS = ("self_attn", "self_attn_norm", "ffn1", "ffn1_norm",
                 "cross_attn", "cross_attn_norm", "ffn2", "ffn2_norm")

    def __init__(self, self_attn, self_attn_norm, ffn1, ffn1_norm,
                 cross_attn, cross_attn_norm, ffn2, ffn2_norm):
        self.self_attn = self_attn
        self.self_attn_norm = self_attn_norm
        self.ffn1 = ffn1
        self.ffn1_norm = ffn1_norm
        self.cross_attn = cross_attn
        self.cross_attn_norm = cross_attn_norm
        self.ffn2 = ffn2
        self.ffn2_norm = ffn2_norm

    def named_tensors(self, prefix):
        for sub in self.SUBBLOCKS:
            yield from getattr(self, sub).named_tensors(prefix + "." + sub)


class NormalDecoderLayerParams:
    """Conventional decoder layer: self-attn -> cross-attn -> FFN."""

    KIND = "normal"
    SUBBLOCKS = ("self_attn", "self_attn_norm", "cross_attn", "cross_attn_norm",
                 "ffn", "ffn_norm")

    def __init__(self, self_attn, self_attn_norm, cross_attn, cross_attn_norm,
                 ffn, ffn_norm):
        self.self_attn = self_attn
        self.self_attn_norm = self_attn_norm
        self.cross_attn = cross_attn
        self.cross_attn_norm = cross_attn_norm
        self.ffn = ffn
        self.ffn_norm = ffn_norm

    def named_tensors(self, prefix):
        for sub in self.SUBBLOCKS:
            yield from getattr(self, sub).named_tensors(prefix + "." + sub)


class EncoderBundle:
    """Embeddings plus encoder stack, the grafting source."""

    def __init__(self, token_embedding, position_embedding, encoder_layers):
        self.token_embedding = token_embedding
        self.position_embedding = position_embedding
        self.encoder_layers = list(encoder_layers)


class SharedWeightModel:
    """Seq2seq model whose decoder was laid out and initialized by grafting.

    token_embedding doubles as the output projection (tied storage);
    position_embedding is shared by encoder and decoder.
    """

    def __init__(self, config: ModelConfig, token_embedding, position_embedding,
                 encoder_layers, decoder_layers, decoder_layout):
        self.config = config
        self.token_embedding = token_embedding
        self.position_embedding = position_embedding
        self.encoder_layers = list(encoder_layers)
        self.decoder_layers = list(decoder_layers)
        self.decoder_layout = decoder_layout

    @property
    def output_projection(self) -> Tensor:
        return self.token_embedding

    def named_parameters(self):
        """Ordered (name, tensor) pairs, tied storage listed once."""
        out = []
        seen = set()
        for name, t in self._named_all():
            if id(t) in seen:
                continue
            seen.add(id(t))
            out.append((name, t))
        return out

    def tying_map(self):
        """alias name -> canonical name for every shared storage."""
        canonical = {}
        tying = {"output_projection": "token_embedding"}
        for name, t in self._named_all():
            if id(t) in canonical:
                tying[name] = canonical[id(t)]
            else:
                canonical[id(t)] = name
        return tying

    def _named_all(self):
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, layer in enumerate(self.encoder_layers):
            yield from layer.named_tensors("encoder.%d" % i)
        for i, layer in enumerate(self.decoder_layers):
            yield from layer.named_tensors("decoder.%d" % i)

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def encoder_bundle(self) -> EncoderBundle:
        return EncoderBundle(self.token_embedding, self.position_embedding,
                             self.encoder_layers)


def count_layer_parameters(layer) -> int:
    seen = set()
    total = 0
    for _, t in layer.named_tensors("x"):
        if id(t) in seen:
            continue
        seen.add(id(t))
        total += t.size
    return total


# -- masks --------------------------------------------------------------------


def padding_attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """[b, s] boolean (True = real token) -> additive [b, 1, 1, s] scores."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    return np.where(pad_mask, 0.0, MASK_FILL)[:, None, None, :]


def causal_attention_mask(t: int) -> np.ndarray:
    """Additive [1, 1, t, t] mask blocking attention to future positions."""
    m = np.triu(np.full((t, t), MASK_FILL), k=1)
    return m[None, None, :, :]


# -- forward passes ------------------------------------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return transpose(reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, hd = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, s, h * hd))


def multi_head_attention(p: AttentionParams, q_in: Tensor, kv_in: Tensor,
                         mask, n_heads: int) -> Tensor:
    """Scaled dot-product attention; mask is an additive numpy score array."""
    q = _split_heads(add(matmul(q_in, p.wq), p.bq), n_heads)
    k = _split_heads(add(matmul(kv_in, p.wk), p.bk), n_heads)
    v = _split_heads(add(matmul(kv_in, p.wv), p.bv), n_heads)
    head_dim = q.shape[-1]
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    ctx = matmul(softmax(scores), v)
    return add(matmul(_merge_heads(ctx), p.wo), p.bo)


def _sublayer(x: Tensor, y: Tensor, norm: LayerNormParams) -> Tensor:
    return layer_norm(add(x, y), norm.gain, norm.bias)


def _embed(model: SharedWeightModel, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens)
    b, s = tokens.shape
    if s > model.config.max_seq_len:
        raise ShapeError("sequence length %d exceeds max_seq_len %d"
                         % (s, model.config.max_seq_len))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise VocabError("token id out of range [0, %d)" % model.config.vocab_size)
    tok = gather_rows(model.token_embedding, tokens)
    pos = gather_rows(model.position_embedding, np.arange(s))
    return add(tok, pos)


def encoder_forward(model: SharedWeightModel, tokens: np.ndarray,
                    pad_mask: np.ndarray | None = None) -> Tensor:
    """Contextual representations [b, s, d]; padded positions carry no attention weight."""
    tokens = np.asarray(tokens)
    if pad_mask is None:
        pad_mask = tokens != PAD_ID
    x = _embed(model, tokens)
    mask = padding_attention_mask(pad_mask)
    h = model.config.n_heads
    for layer in model.encoder_layers:
        x = _sublayer(x, multi_head_attention(layer.attn, x, x, mask, h), layer.attn_norm)
        x = _sublayer(x, layer.ffn.apply(x), layer.ffn_norm)
    return x


def decoder_forward(model: SharedWeightModel, dec_tokens: np.ndarray,
                    enc_out: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
    """Causally masked decoder logits [b, t, vocab] over the tied embedding."""
    dec_tokens = np.asarray(dec_tokens)
    x = _embed(model, dec_tokens)
    b, t = dec_tokens.shape
    self_mask = causal_attention_mask(t)
    cross_mask = padding_attention_mask(pad_mask) if pad_mask is not None else None
    h = model.config.n_heads
    for layer in model.decoder_layers:
        if layer.KIND == "custom":
            x = _sublayer(x, multi_head_attention(layer.self_attn, x, x, self_mask, h),
                          layer.self_attn_norm)
            x = _sublayer(x, layer.ffn1.apply(x), layer.ffn1_norm)
            x = _sublayer(x, multi_head_attention(layer.cross_attn, x, enc_out, cross_mask, h),
                          layer.cross_attn_norm)
            x = _sublayer(x, layer.ffn2.apply(x), layer.ffn2_norm)
        else:
            x = _sublayer(x, multi_head_attention(layer.self_attn, x, x, self_mask, h),
                          layer.self_attn_norm)
            x = _sublayer(x, multi_head_attention(layer.cross_attn, x, enc_out, cross_mask, h),
                          layer.cross_attn_norm)
            x = _sublayer(x, layer.ffn.apply(x), layer.ffn_norm)
    return matmul(x, transpose(model.output_projection))


def seq2seq_loss_sum(model: SharedWeightModel, src: np.ndarray, src_mask: np.ndarray,
                     tgt: np.ndarray, dec_inputs: np.ndarray | None = None):
    """Teacher-forced summed cross-entropy and the number of scored positions.

    tgt must be framed (<s>, language token, body, </s>); pad positions in the
    shifted target are ignored. dec_inputs overrides the gold decoder inputs
    (used by scheduled sampling).
    """
    tgt = np.asarray(tgt)
    if tgt.shape[1] < 2:
        raise ShapeError("framed target must have length >= 2")
    dec_in = tgt[:, :-1] if dec_inputs is None else np.asarray(dec_inputs)
    dec_tgt = tgt[:, 1:]
    enc = encoder_forward(model, src, src_mask)
    logits = decoder_forward(model, dec_in, enc, src_mask)
    b, t, v = logits.shape
    flat = reshape(logits, (b * t, v))
    loss = softmax_cross_entropy(flat, dec_tgt.reshape(-1), ignore_id=PAD_ID,
                                 reduction="sum")
    return loss, int((dec_tgt != PAD_ID).sum())


def seq2seq_loss(model: SharedWeightModel, src: np.ndarray, src_mask: np.ndarray,
                 tgt: np.ndarray) -> Tensor:
    """Mean teacher-forced cross-entropy over non-pad target positions."""
    loss, count = seq2seq_loss_sum(model, src, src_mask, tgt)
    return scale(loss, 1.0 / count)


def generate_greedy(model: SharedWeightModel, src: np.ndarray, src_mask: np.ndarray,
                    lang_id: int, max_new: int):
    """Greedy decode seeded with <s> + language token.

    Returns one list of generated body ids per batch row; generation stops at
    </s> (excluded from the output) or after max_new tokens.
    """
    if max_new < 1:
        raise ConfigError("max_new must be >= 1")
    src = np.asarray(src)
    b = src.shape[0]
    outputs = [[] for _ in range(b)]
    with no_grad():
        enc = encoder_forward(model, src, src_mask)
        seqs = np.full((b, 2), BOS_ID, dtype=np.int64)
        seqs[:, 1] = lang_id
        finished = np.zeros(b, dtype=bool)
        for _ in range(max_new):
            if seqs.shape[1] >= model.config.max_seq_len:
                break
            logits = decoder_forward(model, seqs, enc, src_mask)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(finished, PAD_ID, nxt)  # filler for rows already done
            for i in range(b):
                if not finished[i] and nxt[i] != EOS_ID:
                    outputs[i].append(int(nxt[i]))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            finished |= nxt == EOS_ID
            if finished.all():
                break
    return outputs
