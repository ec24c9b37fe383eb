"""Ranking metrics and the all-ranking evaluation loop.

Leave-one-out yields a single relevant item per user, so NDCG uses an
ideal DCG of 1. Users whose recommend call fails score 0 on every metric
and are counted in the report's ``errors`` field rather than dropped.
"""

from __future__ import annotations

import math

from .errors import LancerError


def recall_at_k(ranked_ids, target, k: int) -> int:
    return 1 if target in list(ranked_ids)[:k] else 0


def ndcg_at_k(ranked_ids, target, k: int) -> float:
    ranked = list(ranked_ids)[:k]
    if target not in ranked:
        return 0.0
    rank = ranked.index(target) + 1
    return 1.0 / math.log2(rank + 1)


def evaluate(recommend_fn, sequences, ks=(5, 10)) -> dict:
    """Mean Recall/NDCG at each cutoff over every test target.

    ``recommend_fn(history_ids, k)`` must return >= k ranked item ids when
    the catalog allows. Per-user rows are returned under ``details``.
    """
    ks = sorted(ks)
    max_k = ks[-1]
    totals = {f"recall@{k}": 0.0 for k in ks}
    totals.update({f"ndcg@{k}": 0.0 for k in ks})
    details = []
    errors = 0
    n_users = 0

    for seq in sequences:
        n_users += 1
        target = seq.test_target
        row = {"user_id": seq.user_id, "target": target}
        try:
            ranked = [r.item_id for r in recommend_fn(seq.test_history, max_k)]
        except LancerError as exc:
            errors += 1
            for k in ks:
                row[f"recall@{k}"] = 0
                row[f"ndcg@{k}"] = 0.0
            row["error"] = str(exc)
            details.append(row)
            continue
        for k in ks:
            row[f"recall@{k}"] = recall_at_k(ranked, target, k)
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, target, k)
            totals[f"recall@{k}"] += row[f"recall@{k}"]
            totals[f"ndcg@{k}"] += row[f"ndcg@{k}"]
        details.append(row)

    if n_users == 0:
        raise LancerError("no test users to evaluate")
    report = {"users": n_users, "errors": errors}
    for key, total in totals.items():
        report[key] = total / n_users
    report["details"] = details
    return report


def write_detail_tsv(path, details, ks=(5, 10)) -> None:
    cols = ["user_id", "target"]
    for k in sorted(ks):
        cols += [f"recall@{k}", f"ndcg@{k}"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in details:
            fh.write("\t".join(str(row.get(c, "")) for c in cols) + "\n")
