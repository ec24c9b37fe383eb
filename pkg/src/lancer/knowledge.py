"""Stage 1: learn continuous knowledge prompts on item content.

A fixed bank of knowledge token embeddings is expanded by a two-layer
MLP into per-layer key/value prefixes. Training minimizes next-token NLL
over each item's content text with every backbone parameter frozen; the
trained prompt then turns item content into fixed-width vectors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .model import PrefixCache, TransformerLM
from .optim import Adam, LinearDecay
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    get_default_dtype,
    matmul,
    mul,
    narrow,
    reshape,
    tanh,
    transpose,
)
from .text import BOS_ID, EOS_ID, Vocab


class KnowledgePrompt:
    """Knowledge token embeddings plus the expansion MLP (hidden width 2*d_e)."""

    def __init__(self, n_tokens: int, n_layers: int, d_model: int, rng: np.random.Generator,
                 d_embed: int | None = None, init_std: float = 0.02):
        if n_tokens < 0:
            raise ShapeError("n_tokens must be >= 0")
        self.n_tokens = n_tokens
        self.n_layers = n_layers
        self.d_model = d_model
        self.d_embed = d_embed or d_model
        dtype = get_default_dtype()
        hidden = 2 * self.d_embed
        out = n_layers * 2 * d_model

        def normal(*shape):
            return Tensor(rng.normal(0.0, init_std, shape).astype(dtype), requires_grad=True)

        self.params = {
            "emb": normal(n_tokens, self.d_embed),
            "w1": normal(self.d_embed, hidden),
            "b1": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            "w2": normal(hidden, out),
            "b2": Tensor(np.zeros(out, dtype=dtype), requires_grad=True),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def expand(self) -> PrefixCache:
        """MLP-expand each knowledge token into per-layer K/V prefix rows."""
        if self.n_tokens == 0:
            return PrefixCache.empty(self.n_layers, self.d_model)
        p = self.params
        theta, d = self.n_tokens, self.d_model
        h = tanh(add(matmul(p["emb"], p["w1"]), p["b1"]))
        flat = add(matmul(h, p["w2"]), p["b2"])  # (theta, L*2*d)
        cube = transpose(reshape(flat, (theta, self.n_layers, 2, d)), (1, 2, 0, 3))
        keys, values = [], []
        for layer in range(self.n_layers):
            block = reshape(narrow(cube, 0, layer, 1), (2, theta, d))
            keys.append(reshape(narrow(block, 0, 0, 1), (theta, d)))
            values.append(reshape(narrow(block, 0, 1, 1), (theta, d)))
        return PrefixCache(keys, values)


@dataclass
class HistoryMatrix:
    """Fixed-length stack of item vectors with a validity mask."""

    rows: np.ndarray  # (N, d); masked-off rows are exactly zero
    mask: np.ndarray  # (N,) bool

    @property
    def n_real(self) -> int:
        return int(self.mask.sum())

    def real_rows(self) -> np.ndarray:
        return self.rows[: self.n_real]


def content_token_ids(vocab: Vocab, content: str, max_tokens: int = 512) -> list[int]:
    """BOS + content tokens + EOS, clipped to the model token budget."""
    body = vocab.encode(content, max_len=max_tokens - 2)
    return [BOS_ID] + body + [EOS_ID]


def train_stage1(
    catalog,
    model: TransformerLM,
    prompt: KnowledgePrompt,
    vocab: Vocab,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 16,
    max_tokens: int = 512,
) -> dict:
    """Optimize only the prompt's Emb/MLP; the backbone stays frozen.

    Returns a run report with per-epoch mean NLL and the skipped-item count.
    """
    items = list(catalog.items())
    if not items:
        raise DataError("stage-1 training needs a non-empty catalog")
    encoded = []
    skipped = 0
    for item in items:
        ids = vocab.encode(item.content, max_len=max_tokens - 2)
        if not ids:
            skipped += 1
            continue
        encoded.append([BOS_ID] + ids + [EOS_ID])
    if not encoded:
        raise DataError("every catalog item encoded to an empty sequence")

    model.set_trainable(False)
    params = list(prompt.parameters().values())
    for t in params:
        t.requires_grad = True
    opt = Adam(params, lr=lr)
    steps_per_epoch = max(1, (len(encoded) + batch_size - 1) // batch_size)
    sched = LinearDecay(opt, total_steps=max(1, epochs * steps_per_epoch))

    epoch_losses = []
    order = np.arange(len(encoded))
    for _ in range(epochs):
        rng.shuffle(order)
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            group = order[start : start + batch_size]
            opt.zero_grad()
            for idx in group:
                ids = encoded[idx]
                cache = prompt.expand()
                out = model.forward(np.asarray(ids[:-1]), prefix=cache)
                loss = cross_entropy(out.logits, np.asarray(ids[1:]))
                total += loss.item()
                count += 1
                mul(loss, 1.0 / len(group)).backward()
            opt.step()
            sched.step()
        epoch_losses.append(total / count)
    return {"epoch_losses": epoch_losses, "skipped": skipped, "items": len(encoded)}


def encode_item(model: TransformerLM, cache: PrefixCache | None, vocab: Vocab, content: str,
                max_tokens: int = 512) -> np.ndarray:
    """Final-layer hidden state at the last content token, under the prefix."""
    body = vocab.encode(content, max_len=max_tokens - 1)
    if not body:
        raise DataError("cannot encode an item with empty content")
    out = model.forward(np.asarray([BOS_ID] + body), prefix=cache)
    return out.last_hidden.data[-1].copy()


def encode_history(
    model: TransformerLM,
    cache: PrefixCache | None,
    vocab: Vocab,
    item_ids,
    catalog,
    history_len: int = 10,
    item_vectors: dict[str, np.ndarray] | None = None,
) -> HistoryMatrix:
    """Stack per-item vectors for a chronological id list, zero-padded to N rows."""
    ids = list(item_ids)
    if not 1 <= len(ids) <= history_len:
        raise ShapeError(f"history must hold 1..{history_len} items, got {len(ids)}")
    d = model.config.d_model
    rows = np.zeros((history_len, d), dtype=get_default_dtype())
    for i, item_id in enumerate(ids):
        if item_vectors is not None and item_id in item_vectors:
            rows[i] = item_vectors[item_id]
            continue
        item = catalog.get(item_id)
        if item is None:
            raise DataError(f"unknown item id {item_id!r}")
        rows[i] = encode_item(model, cache, vocab, item.content)
    mask = np.zeros(history_len, dtype=bool)
    mask[: len(ids)] = True
    return HistoryMatrix(rows, mask)


def write_item_vectors(path, vectors: dict[str, np.ndarray], source_hash: str) -> None:
    """Cache file: header comment with the prompt checkpoint hash, then one
    line per item, item_id<TAB>base-10 floats."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# source_hash={source_hash}\n")
        for item_id, vec in vectors.items():
            floats = "\t".join(repr(float(x)) for x in vec)
            fh.write(f"{item_id}\t{floats}\n")


def read_item_vectors(path) -> tuple[dict[str, np.ndarray], str]:
    vectors: dict[str, np.ndarray] = {}
    source_hash = ""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                if "source_hash=" in line:
                    source_hash = line.split("source_hash=", 1)[1].strip()
                continue
            parts = line.split("\t")
            vectors[parts[0]] = np.asarray([float(x) for x in parts[1:]], dtype=get_default_dtype())
    return vectors, source_hash
