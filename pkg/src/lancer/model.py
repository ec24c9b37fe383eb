"""Autoregressive transformer backbone with two prompt injection points.

Per-layer key/value prefixes condition attention without occupying input
positions; virtual-token rows are prepended as extra input embeddings.
Real token positions may attend to every prefix slot plus their causal
past, so attention keys at each layer have length theta + rho + T.

The graph forward (training) and the numpy incremental decode path
(generation) implement the same arithmetic and are tested against each
other.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    get_default_dtype,
    layer_norm,
    matmul,
    mul,
    narrow,
    np_gelu,
    np_layer_norm,
    np_softmax,
    reshape,
    softmax,
    transpose,
)

NEG_MASK = -1e9  # large enough that exp() underflows to exactly 0 after max-subtraction


@dataclass
class BackboneConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_context: int = 512

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_context < 1:
            raise ConfigError("max_context must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_context": self.max_context,
        }


class PrefixCache:
    """Per-layer key and value prefix blocks, theta rows of width d each."""

    def __init__(self, keys: list[Tensor], values: list[Tensor]):
        if len(keys) != len(values):
            raise ShapeError("prefix key/value layer counts differ")
        thetas = {k.shape[0] for k in keys} | {v.shape[0] for v in values}
        if len(thetas) > 1:
            raise ShapeError(f"inconsistent prefix lengths across layers: {sorted(thetas)}")
        self.keys = keys
        self.values = values

    @classmethod
    def empty(cls, n_layers: int, d_model: int) -> "PrefixCache":
        zero = [Tensor(np.zeros((0, d_model))) for _ in range(n_layers)]
        return cls(list(zero), [Tensor(np.zeros((0, d_model))) for _ in range(n_layers)])

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def theta(self) -> int:
        return 0 if not self.keys else self.keys[0].shape[0]


@dataclass
class ForwardOutput:
    logits: Tensor  # (T, vocab) rows for real token positions only
    last_hidden: Tensor  # (T, d_model)
    attn_key_len: tuple[int, ...]  # per-layer key length, theta + rho + T


@dataclass
class DecodeState:
    """Incremental decoding caches; one live owner at a time."""

    model_id: int
    n_virtual: int
    n_real: int
    k_cache: list[np.ndarray]  # per layer (H, S, d_head)
    v_cache: list[np.ndarray]
    last_logits: np.ndarray | None = None

    @property
    def next_position(self) -> int:
        return self.n_virtual + self.n_real

    def copy(self) -> "DecodeState":
        return DecodeState(
            model_id=self.model_id,
            n_virtual=self.n_virtual,
            n_real=self.n_real,
            k_cache=[k.copy() for k in self.k_cache],
            v_cache=[v.copy() for v in self.v_cache],
            last_logits=None if self.last_logits is None else self.last_logits.copy(),
        )


def _causal_mask(n_query: int, theta: int, dtype) -> np.ndarray:
    total_k = theta + n_query
    cols = np.arange(total_k)[None, :]
    rows = np.arange(n_query)[:, None]
    allowed = (cols < theta) | ((cols - theta) <= rows)
    return np.where(allowed, 0.0, NEG_MASK).astype(dtype)


class TransformerLM:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, init_std: float = 0.02):
        self.config = config
        dtype = get_default_dtype()
        c = config

        def normal(*shape):
            return Tensor(rng.normal(0.0, init_std, shape).astype(dtype), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        p: dict[str, Tensor] = {}
        p["wte"] = normal(c.vocab_size, c.d_model)
        p["wpe"] = normal(c.max_context, c.d_model)
        for i in range(c.n_layers):
            p[f"h{i}.ln1.g"] = ones(c.d_model)
            p[f"h{i}.ln1.b"] = zeros(c.d_model)
            p[f"h{i}.wq"] = normal(c.d_model, c.d_model)
            p[f"h{i}.bq"] = zeros(c.d_model)
            p[f"h{i}.wk"] = normal(c.d_model, c.d_model)
            p[f"h{i}.bk"] = zeros(c.d_model)
            p[f"h{i}.wv"] = normal(c.d_model, c.d_model)
            p[f"h{i}.bv"] = zeros(c.d_model)
            p[f"h{i}.wo"] = normal(c.d_model, c.d_model)
            p[f"h{i}.bo"] = zeros(c.d_model)
            p[f"h{i}.ln2.g"] = ones(c.d_model)
            p[f"h{i}.ln2.b"] = zeros(c.d_model)
            p[f"h{i}.wff1"] = normal(c.d_model, c.d_ff)
            p[f"h{i}.bff1"] = zeros(c.d_ff)
            p[f"h{i}.wff2"] = normal(c.d_ff, c.d_model)
            p[f"h{i}.bff2"] = zeros(c.d_model)
        p["lnf.g"] = ones(c.d_model)
        p["lnf.b"] = zeros(c.d_model)
        p["wout"] = normal(c.d_model, c.vocab_size)
        self.params = p

    # -- parameter bookkeeping -------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def clone(self) -> "TransformerLM":
        twin = TransformerLM.__new__(TransformerLM)
        twin.config = self.config
        twin.params = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.params.items()
        }
        return twin

    @property
    def embedding_table(self) -> np.ndarray:
        return self.params["wte"].data

    # -- full forward (graph) ---------------------------------------------------

    def forward(
        self,
        tokens,
        prefix: PrefixCache | None = None,
        virtual_prefix: Tensor | None = None,
    ) -> ForwardOutput:
        c = self.config
        p = self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size < 1:
            raise ShapeError("forward expects a non-empty 1-D token sequence")
        T = tokens.size

        rho = 0
        if virtual_prefix is not None:
            if not isinstance(virtual_prefix, Tensor):
                virtual_prefix = Tensor(virtual_prefix)
            if virtual_prefix.shape[0] == 0:
                virtual_prefix = None
            else:
                if virtual_prefix.ndim != 2 or virtual_prefix.shape[1] != c.d_model:
                    raise ShapeError(f"virtual prefix must be (rho, {c.d_model})")
                rho = virtual_prefix.shape[0]
        if prefix is not None and prefix.theta == 0:
            prefix = None
        if prefix is not None and prefix.n_layers != c.n_layers:
            raise ShapeError(f"prefix has {prefix.n_layers} layers, model has {c.n_layers}")
        theta = 0 if prefix is None else prefix.theta

        if T + rho > c.max_context:
            raise BudgetError(
                f"context budget exceeded: {T} tokens + {rho} virtual rows > {c.max_context}"
            )

        x = embedding(p["wte"], tokens)
        if virtual_prefix is not None:
            x = concat([virtual_prefix, x], axis=0)
        n_rows = rho + T
        x = add(x, embedding(p["wpe"], np.arange(n_rows)))

        H, dh = c.n_heads, c.d_head
        mask = Tensor(_causal_mask(n_rows, theta, x.data.dtype))
        scale = 1.0 / math.sqrt(dh)
        key_len = theta + n_rows

        for i in range(c.n_layers):
            a = layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            q = add(matmul(a, p[f"h{i}.wq"]), p[f"h{i}.bq"])
            k = add(matmul(a, p[f"h{i}.wk"]), p[f"h{i}.bk"])
            v = add(matmul(a, p[f"h{i}.wv"]), p[f"h{i}.bv"])
            q = transpose(reshape(q, (n_rows, H, dh)), (1, 0, 2))
            k = transpose(reshape(k, (n_rows, H, dh)), (1, 0, 2))
            v = transpose(reshape(v, (n_rows, H, dh)), (1, 0, 2))
            if prefix is not None:
                pk = transpose(reshape(prefix.keys[i], (theta, H, dh)), (1, 0, 2))
                pv = transpose(reshape(prefix.values[i], (theta, H, dh)), (1, 0, 2))
                k = concat([pk, k], axis=1)
                v = concat([pv, v], axis=1)
            scores = add(mul(matmul(q, transpose(k, (0, 2, 1))), scale), mask)
            attn = softmax(scores, axis=-1)
            ctx = reshape(transpose(matmul(attn, v), (1, 0, 2)), (n_rows, c.d_model))
            x = add(x, add(matmul(ctx, p[f"h{i}.wo"]), p[f"h{i}.bo"]))
            a2 = layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            ff = gelu(add(matmul(a2, p[f"h{i}.wff1"]), p[f"h{i}.bff1"]))
            ff = add(matmul(ff, p[f"h{i}.wff2"]), p[f"h{i}.bff2"])
            x = add(x, ff)

        h = layer_norm(x, p["lnf.g"], p["lnf.b"])
        last_hidden = narrow(h, 0, rho, T) if rho else h
        logits = matmul(last_hidden, p["wout"])
        return ForwardOutput(logits, last_hidden, tuple([key_len] * c.n_layers))

    # -- incremental decoding (numpy, no gradients) -----------------------------

    def init_decode(
        self,
        tokens,
        prefix: PrefixCache | None = None,
        virtual_prefix=None,
    ) -> DecodeState:
        """Build a decode state whose last_logits equal the full forward's last row."""
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size < 1:
            raise ShapeError("init_decode expects a non-empty 1-D token sequence")
        if prefix is not None and prefix.theta == 0:
            prefix = None
        H, dh = c.n_heads, c.d_head
        if prefix is not None:
            k_cache = [
                np.ascontiguousarray(p.data.reshape(-1, H, dh).transpose(1, 0, 2))
                for p in prefix.keys
            ]
            v_cache = [
                np.ascontiguousarray(p.data.reshape(-1, H, dh).transpose(1, 0, 2))
                for p in prefix.values
            ]
        else:
            k_cache = [np.zeros((H, 0, dh), dtype=self.embedding_table.dtype) for _ in range(c.n_layers)]
            v_cache = [np.zeros((H, 0, dh), dtype=self.embedding_table.dtype) for _ in range(c.n_layers)]

        virt = None
        if virtual_prefix is not None:
            virt = virtual_prefix.data if isinstance(virtual_prefix, Tensor) else np.asarray(virtual_prefix)
            if virt.shape[0] == 0:
                virt = None
        rho = 0 if virt is None else virt.shape[0]
        if tokens.size + rho > c.max_context:
            raise BudgetError(
                f"context budget exceeded: {tokens.size} tokens + {rho} virtual rows > {c.max_context}"
            )

        state = DecodeState(
            model_id=id(self), n_virtual=rho, n_real=0, k_cache=k_cache, v_cache=v_cache
        )
        wpe = self.params["wpe"].data
        pos = 0
        if virt is not None:
            for r in range(rho):
                self._decode_row(state, virt[r] + wpe[pos], want_logits=False)
                pos += 1
        wte = self.params["wte"].data
        for t in tokens:
            state.last_logits = self._decode_row(state, wte[t] + wpe[pos], want_logits=True)
            pos += 1
        state.n_real = int(tokens.size)
        return state

    def generate_step(self, state: DecodeState, token: int) -> np.ndarray:
        """Append one token and return next-token logits over the vocabulary."""
        if state.model_id != id(self):
            raise ShapeError("decode state belongs to a different model instance")
        c = self.config
        if state.next_position >= c.max_context:
            raise BudgetError(
                f"context budget exceeded: position {state.next_position} >= {c.max_context}"
            )
        if not 0 <= token < c.vocab_size:
            raise IndexError(f"token id {token} outside vocabulary {c.vocab_size}")
        x = self.params["wte"].data[token] + self.params["wpe"].data[state.next_position]
        logits = self._decode_row(state, x, want_logits=True)
        state.n_real += 1
        state.last_logits = logits
        return logits

    def _decode_row(self, state: DecodeState, x: np.ndarray, want_logits: bool) -> np.ndarray | None:
        c = self.config
        p = self.params
        H, dh = c.n_heads, c.d_head
        scale = 1.0 / math.sqrt(dh)
        for i in range(c.n_layers):
            a, _, _ = np_layer_norm(x, p[f"h{i}.ln1.g"].data, p[f"h{i}.ln1.b"].data)
            q = a @ p[f"h{i}.wq"].data + p[f"h{i}.bq"].data
            k = a @ p[f"h{i}.wk"].data + p[f"h{i}.bk"].data
            v = a @ p[f"h{i}.wv"].data + p[f"h{i}.bv"].data
            q = q.reshape(H, 1, dh)
            state.k_cache[i] = np.concatenate([state.k_cache[i], k.reshape(H, 1, dh)], axis=1)
            state.v_cache[i] = np.concatenate([state.v_cache[i], v.reshape(H, 1, dh)], axis=1)
            scores = (q @ state.k_cache[i].swapaxes(-1, -2)) * scale  # (H, 1, S)
            attn = np_softmax(scores, axis=-1)
            ctx = (attn @ state.v_cache[i]).reshape(c.d_model)
            x = x + (ctx @ p[f"h{i}.wo"].data + p[f"h{i}.bo"].data)
            a2, _, _ = np_layer_norm(x, p[f"h{i}.ln2.g"].data, p[f"h{i}.ln2.b"].data)
            ff = np_gelu(a2 @ p[f"h{i}.wff1"].data + p[f"h{i}.bff1"].data)
            x = x + (ff @ p[f"h{i}.wff2"].data + p[f"h{i}.bff2"].data)
        if not want_logits:
            return None
        h, _, _ = np_layer_norm(x, p["lnf.g"].data, p["lnf.b"].data)
        return h @ p["wout"].data
