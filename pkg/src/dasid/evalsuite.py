"""Ranking metrics, dot-product retrieval between SID and CF spaces, and codebook diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx

RETRIEVAL_TASKS = ("cu_int_zi", "zu_ci_pro")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with tied scores counted as half a correctly ordered pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    # midranks make ties contribute one half
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    _, first, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def grouped_auc(scores, labels, group_ids, weights: str = "uniform") -> float:
    """Per-group AUC averaged uniformly (UAUC) or by group impression count (GAUC).

    Groups holding a single class are skipped.
    """
    if weights not in ("uniform", "impression"):
        raise ValueError("weights must be 'uniform' or 'impression'")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    group_ids = np.asarray(group_ids)
    order = np.argsort(group_ids, kind="stable")
    keys, starts = np.unique(group_ids[order], return_index=True)
    bounds = np.append(starts, order.size)
    total, weight_sum = 0.0, 0.0
    for k in range(keys.size):
        rows = order[bounds[k]:bounds[k + 1]]
        lab = labels[rows]
        if lab.all() or not lab.any():
            continue
        w = 1.0 if weights == "uniform" else float(rows.size)
        total += w * auc(scores[rows], lab)
        weight_sum += w
    if weight_sum == 0:
        raise ValueError("no group contains both classes")
    return total / weight_sum


@dataclass
class RetrievalResult:
    task: str
    auc: float
    recall: float
    k: int
    n_queries: int
    n_positives: int
    full_pool: bool


def retrieval_eval(query_vecs: np.ndarray, pool_vecs: np.ndarray, pairs: np.ndarray, k: int = 100,
                   n_neg: int = 99, rng: np.random.Generator | None = None, full_pool: bool = False,
                   task: str = "custom") -> RetrievalResult:
    """Dot-product retrieval of ``pool_vecs`` rows for ``query_vecs`` rows.

    ``pairs`` holds (query index, pool index) relevance pairs.  recall@k is the
    share of a query's positives ranked in its top k; AUC compares each
    positive against ``n_neg`` sampled non-positive candidates (every
    non-positive with ``full_pool``).  Both are averaged per query, then over
    queries.
    """
    query_vecs = np.asarray(query_vecs, dtype=np.float64)
    pool_vecs = np.asarray(pool_vecs, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if pool_vecs.shape[0] == 0:
        raise ValueError("retrieval pool is empty")
    if pairs.shape[0] == 0:
        raise ValueError("no relevance pairs to evaluate")
    rng = rng if rng is not None else nx.make_rng(0)
    n_pool = pool_vecs.shape[0]
    k_eff = min(k, n_pool)
    queries = np.unique(pairs[:, 0])
    aucs, recalls = [], []
    for q in queries:
        pos = np.unique(pairs[pairs[:, 0] == q, 1])
        scores = pool_vecs @ query_vecs[q]
        # rank: number of candidates scored strictly higher, ties broken by index
        order = np.lexsort((np.arange(n_pool), -scores))
        top = np.zeros(n_pool, dtype=bool)
        top[order[:k_eff]] = True
        recalls.append(top[pos].mean())
        is_pos = np.zeros(n_pool, dtype=bool)
        is_pos[pos] = True
        negatives = np.flatnonzero(~is_pos)
        if negatives.size == 0:
            continue
        per_pos = []
        for p in pos:
            neg = negatives if full_pool else rng.choice(negatives, size=n_neg, replace=negatives.size < n_neg)
            diff = scores[p] - scores[neg]
            per_pos.append(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / neg.size)
        aucs.append(float(np.mean(per_pos)))
    return RetrievalResult(task, float(np.mean(aucs)) if aucs else float("nan"), float(np.mean(recalls)),
                           k, int(queries.size), int(pairs.shape[0]), full_pool)


@dataclass
class EntityRepresentations:
    """Per-entity vectors used by the retrieval tasks and features, in entity-id order."""

    user_codes: np.ndarray
    ad_codes: np.ndarray
    z_u: np.ndarray
    z_i: np.ndarray
    c_u_int: np.ndarray
    c_i_pro: np.ndarray


def entity_representations(model, data, chunk: int = 1024) -> EntityRepresentations:
    """Quantize every user and ad and run the interest/content towers on every id."""
    with nx.precision(model.config.precision), nx.no_grad():
        def quant(rq, emb):
            codes, zs = [], []
            for s in range(0, emb.shape[0], chunk):
                c, z = rq.infer(emb[s:s + chunk])
                codes.append(c)
                zs.append(z)
            return np.concatenate(codes), np.concatenate(zs).astype(np.float64)

        user_codes, z_u = quant(model.user_rq, data.user_emb)
        ad_codes, z_i = quant(model.ad_rq, data.ad_emb)
        t = model.towers
        c_u_int = t.user_int(t.user_emb).value.astype(np.float64)
        c_i_pro = t.ad_pro(t.ad_emb).value.astype(np.float64)
    return EntityRepresentations(user_codes, ad_codes, z_u, z_i, c_u_int, c_i_pro)


def retrieval_tasks(reps: EntityRepresentations, pairs: np.ndarray, k: int = 100, n_neg: int = 99,
                    seed: int = 0, full_pool: bool = False) -> dict[str, RetrievalResult]:
    """Both user-to-ad tasks: (user interest tower, ad SID) and (user SID, ad content tower)."""
    out = {}
    for task, q, p in (("cu_int_zi", reps.c_u_int, reps.z_i), ("zu_ci_pro", reps.z_u, reps.c_i_pro)):
        out[task] = retrieval_eval(q, p, pairs, k, n_neg, nx.make_rng(seed), full_pool, task)
    return out


@dataclass
class CodebookReport:
    level: int
    usage_rate: float
    perplexity: float
    group_mass: list[float]


def codebook_stats(codes, level: int, n_codes: int, n_groups: int = 10) -> CodebookReport:
    """Usage rate, perplexity exp(entropy) and frequency-sorted group masses of one level.

    ``codes`` is an (entities, levels) array; ``level`` is 1-based.  Codes are
    sorted by descending frequency and split into ``n_groups`` consecutive
    groups of ``n_codes / n_groups`` codes.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.intp))
    if codes.shape[0] == 0:
        raise ValueError("codebook statistics need a non-empty corpus")
    if not 1 <= level <= codes.shape[1]:
        raise ValueError(f"level must be in 1..{codes.shape[1]}")
    col = codes[:, level - 1]
    if col.min() < 0 or col.max() >= n_codes:
        raise ValueError(f"code out of range [0, {n_codes})")
    counts = np.bincount(col, minlength=n_codes).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    sorted_p = np.sort(p, kind="stable")[::-1]
    groups = [float(g.sum()) for g in np.array_split(sorted_p, n_groups)]
    return CodebookReport(level, float((counts > 0).sum() / n_codes), float(np.exp(entropy)), groups)


def perplexity(probabilities) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(np.exp(-(p * np.log(p)).sum()))


# ---------------------------------------------------------------- reports

def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json_report(report, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_plain(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_table(rows: Sequence[dict], columns: Sequence[str], precision: int = 4) -> str:
    """Aligned plain-text table; floats are printed with ``precision`` decimals."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.{precision}f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(b, widths)))
              for b in body]
    return "\n".join(lines) + "\n"
