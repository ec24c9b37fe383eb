"""Interaction-log and catalog ingestion, splits, context rendering, stats.

Interactions are UTF-8 TSV rows ``user_id<TAB>item_id<TAB>timestamp``
(integer seconds); the catalog is JSON-lines with ``item_id``, ``title``
and optional ``content`` (defaults to the title). Sequences are kept at
5..10 items: shorter users are dropped, longer ones truncated to the
last 10. The last item is the test target, the second-to-last the
validation target, and the remaining prefix trains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, DataError
from .text import BOS_ID, SEP_ID, Vocab

MIN_SEQ_LEN = 5
MAX_SEQ_LEN = 10

INSTRUCTION_TEXT = "a user watched the following items :"
CUE_TEXT = "next :"
TEMPLATE_TEXTS = (INSTRUCTION_TEXT, CUE_TEXT)

DATASET_FORMAT_VERSION = 1


@dataclass
class ItemRecord:
    item_id: str
    title: str
    content: str


class ItemCatalog:
    def __init__(self, records: list[ItemRecord]):
        self._by_id: dict[str, ItemRecord] = {}
        for rec in records:
            if not rec.title:
                raise DataError(f"item {rec.item_id!r} has an empty title")
            if rec.item_id in self._by_id:
                raise DataError(f"duplicate item id {rec.item_id!r}")
            self._by_id[rec.item_id] = rec

    @classmethod
    def from_jsonl(cls, path) -> "ItemCatalog":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    item_id = str(obj["item_id"])
                    title = str(obj["title"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed catalog record ({exc})")
                content = str(obj.get("content") or title)
                records.append(ItemRecord(item_id, title, content))
        return cls(records)

    def get(self, item_id: str) -> ItemRecord | None:
        return self._by_id.get(item_id)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def items(self) -> list[ItemRecord]:
        return list(self._by_id.values())

    def ids(self) -> list[str]:
        return list(self._by_id.keys())

    def corpus(self) -> list[str]:
        """Texts the vocabulary is built from: titles, contents, template."""
        texts = []
        for rec in self._by_id.values():
            texts.append(rec.title)
            if rec.content != rec.title:
                texts.append(rec.content)
        texts.extend(TEMPLATE_TEXTS)
        return texts


@dataclass
class InteractionSequence:
    """A processed per-user sequence with leave-one-out markers."""

    user_id: str
    items: list[str]

    @property
    def test_target(self) -> str:
        return self.items[-1]

    @property
    def valid_target(self) -> str:
        return self.items[-2]

    @property
    def train_prefix(self) -> list[str]:
        return self.items[:-2]

    @property
    def test_history(self) -> list[str]:
        return self.items[:-1]

    @property
    def valid_history(self) -> list[str]:
        return self.items[:-2]

    def training_pairs(self) -> list[tuple[list[str], str]]:
        """Every (prefix, next item) pair inside the training region."""
        prefix = self.train_prefix
        return [(prefix[:k], prefix[k]) for k in range(1, len(prefix))]


def load_interactions(path, catalog: ItemCatalog) -> list[tuple[str, list[str]]]:
    """Parse and group rows per user, chronologically (stable on ties)."""
    per_user: dict[str, list[tuple[int, int, str]]] = {}
    dangling: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            user_id, item_id, ts_text = parts
            try:
                ts = int(ts_text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts_text!r} is not an integer")
            if item_id not in catalog:
                dangling.append(item_id)
                continue
            per_user.setdefault(user_id, []).append((ts, lineno, item_id))
    if dangling:
        uniq = sorted(set(dangling))
        raise DataError(f"interactions reference unknown item ids: {uniq}")

    out = []
    for user_id, rows in per_user.items():
        rows.sort(key=lambda r: (r[0], r[1]))  # stable: file order breaks ties
        items: list[str] = []
        prev = None
        for ts, _, item_id in rows:
            if prev == (ts, item_id):  # collapse duplicate (user, item, timestamp) rows
                continue
            items.append(item_id)
            prev = (ts, item_id)
        out.append((user_id, items))
    return out


def apply_length_rules(sequences: list[tuple[str, list[str]]]) -> list[tuple[str, list[str]]]:
    """Drop users under 5 items; keep only the last 10 of longer histories."""
    out = []
    for user_id, items in sequences:
        if len(items) < MIN_SEQ_LEN:
            continue
        out.append((user_id, items[-MAX_SEQ_LEN:]))
    return out


def split_leave_one_out(user_id: str, items: list[str]) -> InteractionSequence:
    if len(items) < MIN_SEQ_LEN:
        raise DataError(f"user {user_id!r}: sequence shorter than {MIN_SEQ_LEN}")
    return InteractionSequence(user_id, list(items))


def build_dataset(interactions_path, catalog: ItemCatalog) -> list[InteractionSequence]:
    raw = load_interactions(interactions_path, catalog)
    processed = apply_length_rules(raw)
    return [split_leave_one_out(u, items) for u, items in processed]


@dataclass
class RenderedContext:
    tokens: list[int]
    boundaries: list[int] = field(default_factory=list)  # index of each item's SEP


def render_context(
    history_ids,
    catalog: ItemCatalog,
    vocab: Vocab,
    max_total: int = 512,
    max_item: int = 32,
) -> RenderedContext:
    """BOS + instruction + per-item "title SEP" segments + cue, within budget.

    Oldest items are dropped first when the total would exceed max_total.
    """
    ids = list(history_ids)
    if not ids:
        raise DataError("cannot render an empty history")
    head = [BOS_ID] + vocab.encode(INSTRUCTION_TEXT)
    tail = vocab.encode(CUE_TEXT)
    segments = []
    for item_id in ids:
        rec = catalog.get(item_id)
        if rec is None:
            raise DataError(f"unknown item id {item_id!r}")
        segments.append(vocab.encode(rec.title, max_len=max_item) + [SEP_ID])

    fixed = len(head) + len(tail)
    if fixed + len(segments[-1]) > max_total:
        raise BudgetError(
            f"a single item segment ({len(segments[-1])} tokens) cannot fit in {max_total}"
        )
    start = 0
    while fixed + sum(len(s) for s in segments[start:]) > max_total:
        start += 1  # drop oldest first

    tokens = list(head)
    boundaries = []
    for seg in segments[start:]:
        tokens.extend(seg)
        boundaries.append(len(tokens) - 1)
    tokens.extend(tail)
    return RenderedContext(tokens, boundaries)


def dataset_stats(sequences: list[InteractionSequence], catalog: ItemCatalog) -> dict:
    """Users/items/interactions plus sparsity and per-user/item averages."""
    return stats_from_counts(len(sequences), len(catalog),
                             sum(len(s.items) for s in sequences))


def stats_from_counts(n_users: int, n_items: int, n_interactions: int) -> dict:
    if n_users < 1 or n_items < 1:
        raise DataError("stats need at least one user and one item")
    sparsity = 1.0 - n_interactions / (n_users * n_items)
    return {
        "users": n_users,
        "items": n_items,
        "interactions": n_interactions,
        "sparsity": f"{sparsity * 100:.2f}%",
        "avg_per_user": round(n_interactions / n_users, 2),
        "avg_per_item": round(n_interactions / n_items, 2),
    }


def save_dataset(path, sequences: list[InteractionSequence], config_hash: str = "") -> None:
    payload = {
        "version": DATASET_FORMAT_VERSION,
        "config_hash": config_hash,
        "sequences": [
            {"user_id": s.user_id, "items": s.items, "n_train": len(s.items) - 2}
            for s in sequences
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_dataset(path) -> tuple[list[InteractionSequence], str]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != DATASET_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset version {payload.get('version')}")
    seqs = [InteractionSequence(s["user_id"], list(s["items"])) for s in payload["sequences"]]
    return seqs, payload.get("config_hash", "")
