"""Multi-view contrastive alignment between quantized SID and CF representations."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .cf_debias import sampled_softmax_loss
from .numerics import Tensor

ALIGN_TERMS = (
    "a_u2i_zu",
    "a_u2i_zi",
    "a_u2u_zu",
    "a_i2i_zi",
    "a_co_u2u_zu",
    "a_co_i2i_zi",
)


class NegativeTruncationWarning(UserWarning):
    pass


@dataclass
class AlignBatch:
    """Click-positive rows only.  ``c_u``/``c_i`` are the CF partners (debiased or not)."""

    z_u: Tensor
    z_i: Tensor
    c_u: Tensor
    c_i: Tensor
    user_ids: np.ndarray
    ad_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.user_ids)


def sample_negatives(exclude_keys: Sequence[np.ndarray], n_neg: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per row, up to ``n_neg`` distinct other rows whose keys differ from the row's keys.

    ``exclude_keys`` is a list of (row_keys, forbidden_keys_per_row) style
    arrays: row j is a valid negative for row b when ``keys[j] != forbid[b]``
    for every (keys, forbid) pair.  Returns (indices, mask) of shape (n, k);
    rows with fewer candidates are padded and masked.  Warns when truncating.
    """
    n = len(exclude_keys[0][0])
    valid = np.ones((n, n), dtype=bool)
    for keys, forbid in exclude_keys:
        valid &= np.asarray(keys)[None, :] != np.asarray(forbid)[:, None]
    np.fill_diagonal(valid, False)
    counts = valid.sum(axis=1)
    k = int(min(n_neg, counts.max(initial=0)))
    if counts.min(initial=n_neg) < n_neg:
        warnings.warn(f"fewer than L_neg={n_neg} in-batch negatives available; truncating",
                      NegativeTruncationWarning, stacklevel=3)
    idx = np.zeros((n, max(k, 1)), dtype=np.intp)
    mask = np.zeros((n, max(k, 1)), dtype=bool)
    for b in range(n):
        cand = np.flatnonzero(valid[b])
        take = min(k, cand.size)
        if take:
            idx[b, :take] = rng.choice(cand, size=take, replace=False)
            mask[b, :take] = True
    return idx, mask


def contrastive_with_negatives(anchor: Tensor, positive: Tensor, negative_pool: Tensor,
                               neg_idx: np.ndarray, neg_mask: np.ndarray,
                               temperature: float = 1.0) -> tuple[Tensor, int]:
    """Mean over rows of -log softmax of the positive logit against sampled negatives.

    Negatives for row b are ``negative_pool[neg_idx[b]]`` where ``neg_mask`` holds.
    Rows with no negatives are skipped.  Returns (loss, contributing rows).
    """
    rows = np.flatnonzero(neg_mask.any(axis=1))
    if rows.size == 0:
        return nx.tensor(0.0), 0
    anchor = anchor[rows] if rows.size != anchor.shape[0] else anchor
    positive = positive[rows] if rows.size != positive.shape[0] else positive
    neg_idx, neg_mask = neg_idx[rows], neg_mask[rows]
    pos_logit = nx.rowdot(anchor, positive)
    full = anchor @ nx.transpose(negative_pool)
    neg_logit = full[np.arange(len(rows))[:, None], neg_idx]
    logits = nx.concat([nx.reshape(pos_logit, (-1, 1)), neg_logit],
                       axis=1)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    mask = np.concatenate([np.ones((len(rows), 1), dtype=bool), neg_mask], axis=1)
    loss = nx.masked_logsumexp(logits, mask) - logits[:, 0]
    return nx.mean(loss), int(rows.size)


def dual_u2i_losses(batch: AlignBatch, n_neg: int, rng: np.random.Generator,
                    temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """(z_u vs ad CF content, user CF interest vs z_i), sharing one negative draw.

    Negatives are other positive rows whose ad differs from the anchor's ad.
    """
    if len(batch) < 2 or n_neg < 1:
        raise ValueError("dual u2i alignment needs at least 2 positives and L_neg >= 1")
    idx, mask = sample_negatives([(batch.ad_ids, batch.ad_ids)], n_neg, rng)
    zu, _ = contrastive_with_negatives(batch.z_u, batch.c_i, batch.c_i, idx, mask, temperature)
    zi, _ = contrastive_with_negatives(batch.c_u, batch.z_i, batch.z_i, idx, mask, temperature)
    return zu, zi


def dual_view_losses(batch: AlignBatch, temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """Full in-batch softmax of z_u against user CF reps and z_i against ad CF reps."""
    if len(batch) < 2:
        raise ValueError("dual view alignment needs a batch of at least 2")
    return (sampled_softmax_loss(batch.z_u, batch.c_u, temperature),
            sampled_softmax_loss(batch.z_i, batch.c_i, temperature))


class MemoryBank:
    """Per-entity FIFO of detached partner embeddings from co-click relations.

    Two users co-occur when they clicked the same ad; two ads co-occur when
    clicked by the same user.  The registry of recent clickers per ad (and
    clicked ads per user) is bounded by the same capacity.
    """

    def __init__(self, capacity: int = 16):
        if capacity < 1:
            raise ValueError("memory bank capacity must be >= 1")
        self.capacity = capacity
        self.user_bank: dict[Hashable, deque] = {}
        self.item_bank: dict[Hashable, deque] = {}
        self._ad_clickers: dict[Hashable, deque] = {}
        self._user_clicks: dict[Hashable, deque] = {}
        self._user_latest: dict[Hashable, np.ndarray] = {}
        self._ad_latest: dict[Hashable, np.ndarray] = {}

    def _push(self, bank: dict, key, partner, vec: np.ndarray) -> None:
        fifo = bank.get(key)
        if fifo is None:
            fifo = bank[key] = deque(maxlen=self.capacity)
        fifo.append((partner, vec))

    @staticmethod
    def _register(registry: dict, key, member, capacity: int) -> None:
        fifo = registry.get(key)
        if fifo is None:
            fifo = registry[key] = deque(maxlen=capacity)
        if member in fifo:
            fifo.remove(member)
        fifo.append(member)

    def update(self, user_ids: Sequence, ad_ids: Sequence, z_u: np.ndarray, z_i: np.ndarray) -> None:
        """Record each clicked (user, ad) row in order, storing copies of the vectors."""
        z_u = np.array(z_u, dtype=np.float64, copy=True)
        z_i = np.array(z_i, dtype=np.float64, copy=True)
        for b, (u, a) in enumerate(zip(user_ids, ad_ids)):
            u, a = _key(u), _key(a)
            zu, zi = z_u[b].copy(), z_i[b].copy()
            for v in self._ad_clickers.get(a, ()):
                if v != u:
                    self._push(self.user_bank, v, u, zu)
                    self._push(self.user_bank, u, v, self._user_latest[v])
            for j in self._user_clicks.get(u, ()):
                if j != a:
                    self._push(self.item_bank, j, a, zi)
                    self._push(self.item_bank, a, j, self._ad_latest[j])
            self._register(self._ad_clickers, a, u, self.capacity)
            self._register(self._user_clicks, u, a, self.capacity)
            self._user_latest[u] = zu
            self._ad_latest[a] = zi

    def latest_user_partner(self, user) -> tuple[Hashable, np.ndarray] | None:
        fifo = self.user_bank.get(_key(user))
        return fifo[-1] if fifo else None

    def latest_item_partner(self, ad) -> tuple[Hashable, np.ndarray] | None:
        fifo = self.item_bank.get(_key(ad))
        return fifo[-1] if fifo else None


def _key(x):
    return x.item() if isinstance(x, np.generic) else x


def update_memory_bank(bank: MemoryBank, batch: AlignBatch) -> MemoryBank:
    bank.update(batch.user_ids, batch.ad_ids, batch.z_u.value, batch.z_i.value)
    return bank


def _cooccur_side(z: Tensor, ids: np.ndarray, partner_of, n_neg: int, rng: np.random.Generator,
                  temperature: float) -> tuple[Tensor, int]:
    rows, partners, vecs = [], [], []
    for b, e in enumerate(ids):
        hit = partner_of(e)
        if hit is not None:
            rows.append(b)
            partners.append(hit[0])
            vecs.append(hit[1])
    if not rows:
        return nx.tensor(0.0), 0
    rows = np.asarray(rows)
    ids = np.asarray(ids, dtype=object)
    partner_arr = np.empty(len(ids), dtype=object)
    partner_arr[:] = [None] * len(ids)
    partner_arr[rows] = partners
    # negatives: detached in-batch embeddings of entities other than anchor and partner
    idx, mask = sample_negatives([(ids, ids), (ids, partner_arr)], n_neg, rng)
    anchor = z[rows]
    positive = nx.tensor(np.stack(vecs).astype(z.value.dtype))
    return contrastive_with_negatives(anchor, positive, nx.stop_grad(z), idx[rows], mask[rows], temperature)


def dual_cooccur_losses(batch: AlignBatch, bank: MemoryBank, n_neg: int, rng: np.random.Generator,
                        temperature: float = 1.0) -> tuple[Tensor, Tensor, int, int]:
    """Co-occurrence losses for users and ads plus their contributing-row counts.

    A row contributes when its entity has a stored partner; the partner is the
    most recent bank entry.  A cold bank yields zero losses with zero counts.
    """
    lu, nu = _cooccur_side(batch.z_u, batch.user_ids, bank.latest_user_partner, n_neg, rng, temperature)
    li, ni = _cooccur_side(batch.z_i, batch.ad_ids, bank.latest_item_partner, n_neg, rng, temperature)
    return lu, li, nu, ni


def align_total(components: Mapping[str, Tensor | float | None]):
    """Unweighted sum of the present alignment terms (``None`` marks an ablated term)."""
    total = 0.0
    for name in ALIGN_TERMS:
        term = components.get(name)
        if term is not None:
            total = total + term
    return total
