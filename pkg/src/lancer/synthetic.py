"""Synthetic fixtures: successor-rule catalogs and interaction logs.

Item k's title combines two words unique to k, so title token sets are
pairwise disjoint. Interactions follow the rule item k -> item (k+1)
mod n, optionally with a uniform-noise fraction.
"""

from __future__ import annotations

import json

import numpy as np

_ADJECTIVES = [
    "amber", "brisk", "coral", "dusty", "eager", "fuzzy", "gilded", "hazel",
    "ivory", "jolly", "keen", "lunar", "mellow", "noble", "opal", "plush",
    "quiet", "rustic", "silver", "tawny", "umber", "vivid", "wistful", "young",
    "zesty", "arcane", "bold", "crisp", "deft", "elder", "fabled", "grand",
    "humble", "iron", "jade", "kindred", "limber", "mirthful", "nimble", "ornate",
    "pale", "quaint", "regal", "stark", "tidal", "upland", "velvet", "wild",
    "xenial", "yonder",
]
_NOUNS = [
    "falcon", "meadow", "harbor", "lantern", "orchard", "pebble", "quarry", "river",
    "saddle", "thicket", "anchor", "beacon", "cavern", "dune", "ember", "fjord",
    "glacier", "hollow", "isle", "juniper", "knoll", "lagoon", "marsh", "nettle",
    "oasis", "prairie", "quill", "ridge", "summit", "tundra", "valley", "willow",
    "yarrow", "zephyr", "arbor", "bluff", "cresta", "delta", "estuary", "foothill",
    "grove", "heath", "inlet", "jetty", "kettle", "ledge", "mesa", "notch",
    "outcrop", "pinnacle",
]


def item_id(k: int) -> str:
    return f"i{k:03d}"


def successor_catalog(n_items: int = 50) -> list[dict]:
    if n_items > len(_ADJECTIVES):
        raise ValueError(f"at most {len(_ADJECTIVES)} items supported")
    records = []
    for k in range(n_items):
        title = f"{_ADJECTIVES[k]} {_NOUNS[k]}"
        content = f"{title} . a tale of the {_NOUNS[k]} , {_ADJECTIVES[k]} in spirit ."
        records.append({"item_id": item_id(k), "title": title, "content": content})
    return records


def successor_interactions(
    n_users: int = 200,
    n_items: int = 50,
    noise: float = 0.0,
    seed: int = 0,
    min_len: int = 5,
    max_len: int = 8,
) -> list[tuple[str, str, int]]:
    """Rows (user_id, item_id, timestamp); successor rule with noise."""
    rng = np.random.default_rng(seed)
    rows = []
    ts = 1_000_000
    for u in range(n_users):
        user = f"u{u:04d}"
        length = int(rng.integers(min_len, max_len + 1))
        k = int(rng.integers(0, n_items))
        for _ in range(length):
            rows.append((user, item_id(k), ts))
            ts += 60
            if noise > 0.0 and rng.random() < noise:
                k = int(rng.integers(0, n_items))
            else:
                k = (k + 1) % n_items
    return rows


def write_fixture(dirpath, n_users=200, n_items=50, noise=0.0, seed=0,
                  min_len=5, max_len=8) -> tuple[str, str]:
    """Write interactions.tsv and catalog.jsonl under dirpath."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    inter_path = os.path.join(dirpath, "interactions.tsv")
    cat_path = os.path.join(dirpath, "catalog.jsonl")
    with open(inter_path, "w", encoding="utf-8") as fh:
        for user, item, ts in successor_interactions(n_users, n_items, noise, seed,
                                                     min_len, max_len):
            fh.write(f"{user}\t{item}\t{ts}\n")
    with open(cat_path, "w", encoding="utf-8") as fh:
        for rec in successor_catalog(n_items):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return inter_path, cat_path
