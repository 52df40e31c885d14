"""In-memory interaction dataset plus the on-disk layout shared by every CLI stage.

Directory layout::

    users.dase, users.dase.ids   user semantic embeddings
    ads.dase,   ads.dase.ids     ad semantic embeddings
    interactions.jsonl           one record per impression
    ground_truth.json            synthetic-world truth, read only by evaluation
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantizer import read_embeddings, write_embeddings

TRAIN_FRAC = 0.8


@dataclass
class Dataset:
    user_ids: list[str]
    ad_ids: list[str]
    user_emb: np.ndarray
    ad_emb: np.ndarray
    user_bias: np.ndarray
    ad_bias: np.ndarray
    user_idx: np.ndarray
    ad_idx: np.ndarray
    click: np.ndarray
    ts: np.ndarray
    train_frac: float = TRAIN_FRAC

    def __post_init__(self):
        order = np.argsort(self.ts, kind="stable")
        n_train = int(np.floor(self.train_frac * len(order)))
        self.train_rows = np.sort(order[:n_train])
        self.test_rows = np.sort(order[n_train:])

    def __len__(self) -> int:
        return len(self.click)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_ads(self) -> int:
        return len(self.ad_ids)

    def heldout_pairs(self) -> np.ndarray:
        """Test-period click pairs (user_idx, ad_idx) never clicked during training."""
        tr = self.train_rows[self.click[self.train_rows] == 1]
        seen = set(zip(self.user_idx[tr].tolist(), self.ad_idx[tr].tolist()))
        te = self.test_rows[self.click[self.test_rows] == 1]
        pairs = sorted({(u, a) for u, a in zip(self.user_idx[te].tolist(), self.ad_idx[te].tolist())
                        if (u, a) not in seen})
        return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def write_interactions(path: str | Path, data: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u, a, c, t in zip(data.user_idx, data.ad_idx, data.click, data.ts):
            rec = {
                "user_id": data.user_ids[u],
                "ad_id": data.ad_ids[a],
                "click": int(c),
                "ts": int(t),
                "user_bias_feats": [float(x) for x in data.user_bias[u]],
                "ad_bias_feats": [float(x) for x in data.ad_bias[a]],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_interactions(path: str | Path, user_ids: list[str], ad_ids: list[str]):
    """Parse the JSONL log against known entity ids; returns arrays and per-entity bias features."""
    u_index = {e: k for k, e in enumerate(user_ids)}
    a_index = {e: k for k, e in enumerate(ad_ids)}
    users, ads, clicks, ts = [], [], [], []
    user_bias: dict[int, list[float]] = {}
    ad_bias: dict[int, list[float]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                u, a = u_index[rec["user_id"]], a_index[rec["ad_id"]]
            except KeyError as e:
                raise ValueError(f"{path}:{lineno}: unknown entity {e.args[0]!r}") from None
            if rec["click"] not in (0, 1):
                raise ValueError(f"{path}:{lineno}: click must be 0 or 1")
            users.append(u)
            ads.append(a)
            clicks.append(rec["click"])
            ts.append(int(rec["ts"]))
            user_bias[u] = rec["user_bias_feats"]
            ad_bias[a] = rec["ad_bias_feats"]
    ub_dim = len(next(iter(user_bias.values()))) if user_bias else 0
    ab_dim = len(next(iter(ad_bias.values()))) if ad_bias else 0
    ub = np.zeros((len(user_ids), ub_dim))
    ab = np.zeros((len(ad_ids), ab_dim))
    for k, v in user_bias.items():
        ub[k] = v
    for k, v in ad_bias.items():
        ab[k] = v
    return (np.array(users, dtype=np.intp), np.array(ads, dtype=np.intp),
            np.array(clicks, dtype=np.int8), np.array(ts, dtype=np.int64), ub, ab)


def save_dataset(data: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_embeddings(d / "users.dase", data.user_ids, data.user_emb)
    write_embeddings(d / "ads.dase", data.ad_ids, data.ad_emb)
    write_interactions(d / "interactions.jsonl", data)


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    user_ids, user_emb = read_embeddings(d / "users.dase")
    ad_ids, ad_emb = read_embeddings(d / "ads.dase")
    if not (d / "interactions.jsonl").exists():
        raise FileNotFoundError(f"{d / 'interactions.jsonl'} not found")
    users, ads, clicks, ts, ub, ab = read_interactions(d / "interactions.jsonl", user_ids, ad_ids)
    if len(clicks) == 0:
        raise ValueError(f"{d}: dataset has no interactions")
    return Dataset(user_ids, ad_ids, user_emb, ad_emb, ub, ab, users, ads, clicks, ts)
