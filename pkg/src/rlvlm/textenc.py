"""Small deterministic transformer encoder used as the default sentence embedder.

The weights are never trained; they are drawn from a seeded uniform
distribution so that every component that needs an embedding (prompt
ranking, retrieval, semantic similarity) works offline and reproducibly.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

VOCAB_SIZE = 4096
D_MODEL = 64
N_HEADS = 4
N_LAYERS = 2
FFN_MULT = 4
LN_EPS = 1e-5

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def token_id(token: str, vocab_size: int = VOCAB_SIZE) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def token_ids(text: str, vocab_size: int = VOCAB_SIZE) -> list[int]:
    return [token_id(t, vocab_size) for t in tokenize(text)]


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray  # (h, d, d_k)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (h * d_k, d)
    w1: np.ndarray  # (d, d_ff)
    b1: np.ndarray
    w2: np.ndarray  # (d_ff, d)
    b2: np.ndarray


@dataclass(frozen=True)
class EncoderWeights:
    embedding: np.ndarray  # (vocab, d)
    layers: tuple[LayerWeights, ...]
    n_heads: int
    d_model: int
    seed: int

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]


def init_weights(
    seed: int = 42,
    *,
    vocab_size: int = VOCAB_SIZE,
    d_model: int = D_MODEL,
    n_heads: int = N_HEADS,
    n_layers: int = N_LAYERS,
) -> EncoderWeights:
    """Draw encoder weights uniformly from [-1/sqrt(d), 1/sqrt(d)].

    Biases start at zero. The same seed always yields the same weights.
    """
    if d_model % n_heads:
        raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_model)
    d_k = d_model // n_heads
    d_ff = FFN_MULT * d_model

    def draw(*shape: int) -> np.ndarray:
        arr = rng.uniform(-bound, bound, size=shape)
        arr.setflags(write=False)
        return arr

    def zeros(n: int) -> np.ndarray:
        arr = np.zeros(n)
        arr.setflags(write=False)
        return arr

    embedding = draw(vocab_size, d_model)
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerWeights(
                wq=draw(n_heads, d_model, d_k),
                wk=draw(n_heads, d_model, d_k),
                wv=draw(n_heads, d_model, d_k),
                wo=draw(n_heads * d_k, d_model),
                w1=draw(d_model, d_ff),
                b1=zeros(d_ff),
                w2=draw(d_ff, d_model),
                b2=zeros(d_model),
            )
        )
    return EncoderWeights(embedding, tuple(layers), n_heads, d_model, seed)


@lru_cache(maxsize=8)
def default_weights(seed: int = 42) -> EncoderWeights:
    return init_weights(seed)


def positional_encoding(pos: int, dim: int, d: int) -> float:
    """Sinusoidal position code: sin on even dims, cos on odd dims."""
    if pos < 0:
        raise ValueError(f"pos must be non-negative, got {pos}")
    if not 0 <= dim < d:
        raise ValueError(f"dim={dim} outside [0, {d})")
    i = dim // 2
    angle = pos / 10000 ** (2 * i / d)
    return math.sin(angle) if dim % 2 == 0 else math.cos(angle)


def positional_matrix(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=float)[:, None]
    i = np.arange(d) // 2
    angle = pos / 10000 ** (2 * i / d)
    return np.where(np.arange(d) % 2 == 0, np.sin(angle), np.cos(angle))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, d_k: int) -> np.ndarray:
    """Scaled dot-product attention, ``softmax(Q K^T / sqrt(d_k)) V``."""
    Q, K, V = np.atleast_2d(Q), np.atleast_2d(K), np.atleast_2d(V)
    if not (Q.shape[0] == K.shape[0] == V.shape[0]):
        raise ValueError(f"row counts differ: Q={Q.shape}, K={K.shape}, V={V.shape}")
    if Q.shape[1] != d_k or K.shape[1] != d_k:
        raise ValueError(f"Q/K columns must equal d_k={d_k}, got {Q.shape[1]}, {K.shape[1]}")
    scores = Q @ K.T / math.sqrt(d_k)
    return softmax(scores, axis=-1) @ V


def layer_norm(z: np.ndarray, epsilon: float = LN_EPS) -> np.ndarray:
    """``(z - mean) / (std + epsilon)`` over the last axis."""
    z = np.asarray(z, dtype=float)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("layer_norm of an empty vector")
    d = z - z.mean(axis=-1, keepdims=True)
    # second pass removes the rounding left in the first mean; a constant row becomes exactly 0
    d = d - d.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(np.mean(d * d, axis=-1, keepdims=True))
    return d / (sigma + epsilon)


def multi_head_attention(Z: np.ndarray, layer: LayerWeights, n_heads: int) -> np.ndarray:
    d_k = layer.wq.shape[2]
    heads = []
    for h in range(n_heads):
        heads.append(attention(Z @ layer.wq[h], Z @ layer.wk[h], Z @ layer.wv[h], d_k))
    return np.concatenate(heads, axis=1) @ layer.wo


def feed_forward(Z: np.ndarray, layer: LayerWeights) -> np.ndarray:
    return np.maximum(Z @ layer.w1 + layer.b1, 0.0) @ layer.w2 + layer.b2


def forward_tokens(ids: list[int], weights: EncoderWeights) -> np.ndarray:
    """Token-level hidden states after all encoder layers, shape (n, d)."""
    if not ids:
        raise ValueError("text produced no tokens")
    if max(ids) >= weights.vocab_size or min(ids) < 0:
        raise ValueError("token id outside vocabulary")
    d = weights.d_model
    # embeddings are scaled by sqrt(d) so token identity is not swamped by position
    Z = weights.embedding[ids] * math.sqrt(d) + positional_matrix(len(ids), d)
    for layer in weights.layers:
        Z = layer_norm(Z + multi_head_attention(Z, layer, weights.n_heads))
        Z = layer_norm(Z + feed_forward(Z, layer))
    return Z


def encode_text(text: str, weights: EncoderWeights | None = None) -> np.ndarray:
    """Mean-pooled, L2-normalized sentence embedding."""
    weights = weights or default_weights()
    ids = token_ids(text, weights.vocab_size)
    if not ids:
        raise ValueError(f"text {text!r} contains no tokens")
    pooled = forward_tokens(ids, weights).mean(axis=0)
    return pooled / np.linalg.norm(pooled)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


class Encoder:
    """Callable embedder handle bound to one set of weights, with a text cache."""

    def __init__(self, weights: EncoderWeights | None = None, cache_size: int = 4096):
        self.weights = weights or default_weights()
        self._encode = lru_cache(maxsize=cache_size)(self._encode_uncached)

    def _encode_uncached(self, text: str) -> np.ndarray:
        vec = encode_text(text, self.weights)
        vec.setflags(write=False)
        return vec

    def __call__(self, text: str) -> np.ndarray:
        return self._encode(text)

    @property
    def dim(self) -> int:
        return self.weights.d_model
