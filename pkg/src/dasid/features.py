"""Sparse and dense CTR features built from semantic IDs, and a hashed logistic probe to score them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .evalsuite import auc
from .numerics import AdamW, OptimizerConfig, Parameter

HASH_BITS = 18
N_BUCKETS = 1 << HASH_BITS
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

SemanticId = Sequence[int]


def _join(codes: Iterable[int]) -> str:
    return "_".join(str(int(c)) for c in codes)


def prefix_ngram(side_tag: str, sid: SemanticId) -> list[str]:
    """``["ad_l1=2", "ad_l2=2_31", ...]``: one string per level with the codes up to that level."""
    return [f"{side_tag}_l{k}={_join(sid[:k])}" for k in range(1, len(sid) + 1)]


def listwise(history: Sequence[SemanticId], n_levels: int = 3) -> list[list[str]]:
    """Per level, the prefix of every history item's SID (in history order)."""
    return [[_join(sid[:k]) for sid in history] for k in range(1, n_levels + 1)]


def cross_count(history: Sequence[SemanticId], candidate: SemanticId) -> list[int]:
    """Per level, how many history SIDs share the candidate's prefix up to that level."""
    cand = tuple(int(c) for c in candidate)
    return [sum(1 for sid in history if tuple(int(c) for c in sid[:k]) == cand[:k])
            for k in range(1, len(cand) + 1)]


def dense_feature(rq, sid: SemanticId) -> np.ndarray:
    """Frozen copy of the pooled code-row embedding of ``sid`` under quantizer ``rq``."""
    with nx.no_grad():
        return rq.pooled(np.asarray(sid, dtype=np.intp)[None, :]).value[0].astype(np.float64)


def entity_dense_feature(model, side: str, entity_id: str, sid_table: dict[str, SemanticId]) -> np.ndarray:
    """Dense feature of a known entity, looked up through its SID."""
    if entity_id not in sid_table:
        raise KeyError(f"unknown {side} entity {entity_id!r}")
    return dense_feature(model.rq(side), sid_table[entity_id])


@dataclass
class FeatureSet:
    prefix_ngram: list[str]
    listwise: list[list[str]]
    cross_counts: list[int]
    dense: np.ndarray


def feature_set(side_tag: str, sid: SemanticId, history: Sequence[SemanticId], dense: np.ndarray) -> FeatureSet:
    return FeatureSet(prefix_ngram(side_tag, sid), listwise(history, len(sid)), cross_count(history, sid),
                      np.asarray(dense, dtype=np.float64))


# ---------------------------------------------------------------- hashing

def fnv1a_64(text: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 20)
def bucket(text: str, bits: int = HASH_BITS) -> int:
    return fnv1a_64(text) & ((1 << bits) - 1)


# ---------------------------------------------------------------- featurization

@dataclass(frozen=True)
class FeatureToggles:
    """Which feature families enter an example.

    ``prefix`` adds user and ad prefix-ngrams plus, per level, the conjunction
    of the user and ad prefixes (a logistic model cannot form interactions
    on its own).
    """

    id: bool = True
    prefix: bool = False
    listwise: bool = False
    cross: bool = False
    dense: bool = False

    @classmethod
    def parse(cls, spec: str) -> "FeatureToggles":
        names = [s for s in spec.split("+") if s]
        if names == ["all"]:
            return cls(True, True, True, True, True)
        known = set(cls.__dataclass_fields__)
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ValueError(f"unknown feature families {unknown}; choose from {sorted(known)}")
        return cls(**{n: n in names for n in known})

    def label(self) -> str:
        return "+".join(n for n in ("id", "prefix", "listwise", "cross", "dense") if getattr(self, n)) or "none"


ALL_FEATURES = FeatureToggles(True, True, True, True, True)
ID_ONLY = FeatureToggles()


@dataclass
class Example:
    label: int
    sparse: list[str]
    dense: list[float] = field(default_factory=list)


def _history_index(data) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per user, the training clicks as (timestamps, ad indices) sorted by time."""
    tr = data.train_rows[data.click[data.train_rows] == 1]
    tr = tr[np.lexsort((tr, data.ts[tr]))]
    out: dict[int, list] = {}
    for r in tr:
        out.setdefault(int(data.user_idx[r]), []).append(r)
    return {u: (data.ts[np.array(rs)], data.ad_idx[np.array(rs)]) for u, rs in out.items()}


def featurize(data, rows: np.ndarray, toggles: FeatureToggles, user_codes: np.ndarray | None = None,
              ad_codes: np.ndarray | None = None, z_u: np.ndarray | None = None,
              z_i: np.ndarray | None = None) -> list[Example]:
    """Examples for ``rows`` of ``data``.

    History for an impression is the user's training clicks strictly before
    its timestamp.  SID families need ``user_codes``/``ad_codes`` (one row per
    entity); the dense family needs the pooled embeddings ``z_u``/``z_i`` and
    emits [z_u, z_i, z_u * z_i].
    """
    needs_sid = toggles.prefix or toggles.listwise or toggles.cross
    if needs_sid and (user_codes is None or ad_codes is None):
        raise ValueError("SID feature families need user and ad codes")
    if toggles.dense and (z_u is None or z_i is None):
        raise ValueError("dense features need pooled SID embeddings")
    history = _history_index(data) if (toggles.listwise or toggles.cross) else {}
    user_sid = [tuple(int(c) for c in row) for row in user_codes] if needs_sid else []
    ad_sid = [tuple(int(c) for c in row) for row in ad_codes] if needs_sid else []
    out = []
    for r in rows:
        u, a = int(data.user_idx[r]), int(data.ad_idx[r])
        sparse: list[str] = []
        if toggles.id:
            sparse += [f"uid={data.user_ids[u]}", f"aid={data.ad_ids[a]}"]
        if toggles.prefix:
            up = prefix_ngram("user", user_sid[u])
            ap = prefix_ngram("ad", ad_sid[a])
            sparse += up + ap + [f"{x}|{y}" for x, y in zip(up, ap)]
        if toggles.listwise or toggles.cross:
            ts_hist, ads_hist = history.get(u, (np.empty(0), np.empty(0, dtype=np.intp)))
            n = int(np.searchsorted(ts_hist, data.ts[r], side="left"))
            hist = [ad_sid[j] for j in ads_hist[:n]]
            if toggles.listwise:
                for k, level in enumerate(listwise(hist, len(ad_sid[a])), 1):
                    sparse += [f"hist_l{k}={s}" for s in level]
            if toggles.cross:
                sparse += [f"cnt_l{k}={c}" for k, c in enumerate(cross_count(hist, ad_sid[a]), 1)]
        dense: list[float] = []
        if toggles.dense:
            dense = np.concatenate([z_u[u], z_i[a], z_u[u] * z_i[a]]).tolist()
        out.append(Example(int(data.click[r]), sparse, dense))
    return out


def write_examples(path: str | Path, examples: Sequence[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in examples:
            f.write(json.dumps({"label": e.label, "sparse": e.sparse, "dense": e.dense},
                               separators=(",", ":")) + "\n")


def read_examples(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(Example(int(rec["label"]), list(rec["sparse"]), list(rec["dense"])))
    return out


# ---------------------------------------------------------------- logistic probe

@dataclass
class ProbeConfig:
    epochs: int = 3
    batch: int = 512
    lr: float = 0.02
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class _Encoded:
    idx: np.ndarray  # (n, width) bucket ids, padding -> 0 with mask False
    mask: np.ndarray
    dense: np.ndarray
    labels: np.ndarray


def _encode(examples: Sequence[Example], dense_dim: int) -> _Encoded:
    width = max((len(e.sparse) for e in examples), default=0) or 1
    idx = np.zeros((len(examples), width), dtype=np.intp)
    mask = np.zeros((len(examples), width), dtype=bool)
    dense = np.zeros((len(examples), dense_dim))
    for n, e in enumerate(examples):
        k = len(e.sparse)
        idx[n, :k] = [bucket(s) for s in e.sparse]
        mask[n, :k] = True
        if dense_dim:
            if len(e.dense) != dense_dim:
                raise ValueError(f"example {n} has {len(e.dense)} dense values, expected {dense_dim}")
            dense[n] = e.dense
    return _Encoded(idx, mask, dense, np.array([e.label for e in examples], dtype=np.float64))


class LogisticProbe:
    """Logistic regression over hashed one-hot sparse features plus standardized dense features."""

    def __init__(self, dense_dim: int, config: ProbeConfig | None = None):
        self.config = config or ProbeConfig()
        self.dense_dim = dense_dim
        self.w = Parameter("probe.sparse", np.zeros(N_BUCKETS))
        self.v = Parameter("probe.dense", np.zeros((max(dense_dim, 1), 1)))
        self.b = Parameter("probe.bias", np.zeros(1))
        self.mean = np.zeros(dense_dim)
        self.scale = np.ones(dense_dim)

    def _logits(self, enc: _Encoded, rows: np.ndarray) -> nx.Tensor:
        gathered = nx.index(self.w, enc.idx[rows]) * enc.mask[rows].astype(np.float64)
        logit = nx.tsum(gathered, axis=1) + self.b
        if self.dense_dim:
            x = (enc.dense[rows] - self.mean) / self.scale
            logit = logit + nx.reshape(nx.tensor(x) @ self.v, (-1,))
        return logit

    def fit(self, examples: Sequence[Example]) -> list[float]:
        enc = _encode(examples, self.dense_dim)
        if self.dense_dim:
            self.mean = enc.dense.mean(axis=0)
            sd = enc.dense.std(axis=0)
            self.scale = np.where(sd > 0, sd, 1.0)
        params = {p.name: p for p in (self.w, self.v, self.b)}
        opt = AdamW(params, self.config.lr, OptimizerConfig(weight_decay=self.config.weight_decay))
        rng = nx.make_rng(self.config.seed)
        losses = []
        n = len(examples)
        for _ in range(self.config.epochs):
            perm = rng.permutation(n)
            for s in range(0, n, self.config.batch):
                rows = perm[s:s + self.config.batch]
                logit = self._logits(enc, rows)
                y = enc.labels[rows]
                # log(1 + e^x) - y x, via a stable two-column logsumexp
                pair = nx.concat([nx.tensor(np.zeros((rows.size, 1))), nx.reshape(logit, (-1, 1))], axis=1)
                loss = nx.mean(nx.logsumexp(pair, axis=1) - logit * y)
                nx.backward(loss)
                opt.step()
                losses.append(float(loss.value))
        return losses

    def predict(self, examples: Sequence[Example]) -> np.ndarray:
        enc = _encode(examples, self.dense_dim)
        with nx.no_grad():
            return self._logits(enc, np.arange(len(examples))).value.copy()


def ctr_probe(train: Sequence[Example], test: Sequence[Example], config: ProbeConfig | None = None) -> float:
    """Fit the probe on ``train`` and return its AUC on ``test``."""
    labels = [e.label for e in test]
    if len(set(labels)) < 2:
        raise ValueError("test set has a single class; AUC is undefined")
    dense_dim = len(train[0].dense) if train else 0
    with nx.precision("float64"):
        probe = LogisticProbe(dense_dim, config)
        probe.fit(train)
        return auc(probe.predict(test), labels)
