"""ID-based two-tower CF model with interest/conformity and content/popularity disentangling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Mlp, Parameter, Tensor


@dataclass
class EntityFeatures:
    entity_id: str
    side: str
    id_embedding_index: int
    bias_raw: np.ndarray


@dataclass
class CfBatchOutput:
    c_u_int: Tensor
    c_u_con: Tensor
    c_u_c: Tensor
    c_u: Tensor
    c_i_pro: Tensor
    c_i_pop: Tensor
    c_i_p: Tensor
    c_i: Tensor

    def __len__(self) -> int:
        return self.c_u.shape[0]


class DebiasTowers:
    """User and ad towers; every output has dimension ``d_align``.

    user: id embedding -> interest MLP (c_u_int), conformity MLP (c_u_con);
    conformity features -> real-conformity MLP (c_u_c);
    concat(c_u_int, c_u_c) -> fusion MLP (c_u).  The ad side mirrors this with
    content (c_i_pro), popularity (c_i_pop), real popularity (c_i_p), fusion (c_i).
    """

    def __init__(self, n_users: int, n_ads: int, user_bias_dim: int, ad_bias_dim: int,
                 d_align: int = 32, emb_dim: int = 32, width: int = 64,
                 rng: np.random.Generator | None = None, zero: bool = False, name: str = "towers"):
        rng = rng if rng is not None else nx.make_rng(0)
        self.n_users, self.n_ads = n_users, n_ads
        self.user_bias_dim, self.ad_bias_dim = user_bias_dim, ad_bias_dim
        self.d_align = d_align
        init = np.zeros if zero else (lambda shape: rng.normal(0, 0.1, shape))
        self.user_emb = Parameter(f"{name}.user_emb", init((n_users, emb_dim)))
        self.ad_emb = Parameter(f"{name}.ad_emb", init((n_ads, emb_dim)))
        mlp = lambda part, n_in: Mlp(f"{name}.{part}", [n_in, width, d_align], rng, zero)
        self.user_int = mlp("user_int", emb_dim)
        self.user_con = mlp("user_con", emb_dim)
        self.user_real_con = mlp("user_real_con", user_bias_dim)
        self.user_fusion = mlp("user_fusion", 2 * d_align)
        self.ad_pro = mlp("ad_pro", emb_dim)
        self.ad_pop = mlp("ad_pop", emb_dim)
        self.ad_real_pop = mlp("ad_real_pop", ad_bias_dim)
        self.ad_fusion = mlp("ad_fusion", 2 * d_align)

    def parameters(self) -> dict[str, Parameter]:
        out = {self.user_emb.name: self.user_emb, self.ad_emb.name: self.ad_emb}
        for m in (self.user_int, self.user_con, self.user_real_con, self.user_fusion,
                  self.ad_pro, self.ad_pop, self.ad_real_pop, self.ad_fusion):
            out.update(m.parameters())
        return out

    def forward(self, user_idx: np.ndarray, ad_idx: np.ndarray, user_bias: np.ndarray,
                ad_bias: np.ndarray) -> CfBatchOutput:
        user_bias = np.asarray(user_bias, dtype=nx.get_default_dtype())
        ad_bias = np.asarray(ad_bias, dtype=nx.get_default_dtype())
        if len(user_idx) != len(ad_idx):
            raise nx.ShapeError(f"{len(user_idx)} user rows vs {len(ad_idx)} ad rows")
        if user_bias.shape != (len(user_idx), self.user_bias_dim):
            raise nx.ShapeError(f"user bias features {user_bias.shape}, expected ({len(user_idx)}, {self.user_bias_dim})")
        if ad_bias.shape != (len(ad_idx), self.ad_bias_dim):
            raise nx.ShapeError(f"ad bias features {ad_bias.shape}, expected ({len(ad_idx)}, {self.ad_bias_dim})")
        ue = nx.take_rows(self.user_emb, user_idx)
        ae = nx.take_rows(self.ad_emb, ad_idx)
        c_u_int, c_u_con = self.user_int(ue), self.user_con(ue)
        c_u_c = self.user_real_con(nx.tensor(user_bias))
        c_u = self.user_fusion(nx.concat([c_u_int, c_u_c], axis=1))
        c_i_pro, c_i_pop = self.ad_pro(ae), self.ad_pop(ae)
        c_i_p = self.ad_real_pop(nx.tensor(ad_bias))
        c_i = self.ad_fusion(nx.concat([c_i_pro, c_i_p], axis=1))
        return CfBatchOutput(c_u_int, c_u_con, c_u_c, c_u, c_i_pro, c_i_pop, c_i_p, c_i)


def forward_towers(towers: DebiasTowers, user_feats: list[EntityFeatures],
                   item_feats: list[EntityFeatures]) -> CfBatchOutput:
    if len(user_feats) != len(item_feats):
        raise nx.ShapeError(f"{len(user_feats)} user rows vs {len(item_feats)} ad rows")
    return towers.forward(
        np.array([f.id_embedding_index for f in user_feats]),
        np.array([f.id_embedding_index for f in item_feats]),
        np.stack([f.bias_raw for f in user_feats]),
        np.stack([f.bias_raw for f in item_feats]),
    )


def similarity_term(bias_repr: Tensor, real_repr: Tensor) -> Tensor:
    """Sum over rows of 1 - cos(bias_repr, real_repr)."""
    return nx.tsum(1.0 - nx.cosine_rows(bias_repr, real_repr))


def orthogonal_term(bias_repr: Tensor, unbiased_repr: Tensor) -> Tensor:
    """Sum over rows of (x.y)^2 / (|x| |y|)."""
    nb, nu = nx.rownorm(bias_repr), nx.rownorm(unbiased_repr)
    if np.any(nb.value == 0) or np.any(nu.value == 0):
        raise nx.CollapseError("zero-norm representation in the orthogonality constraint")
    return nx.tsum(nx.square(nx.rowdot(bias_repr, unbiased_repr)) / (nb * nu))


def disentangle_loss(out: CfBatchOutput) -> tuple[Tensor, Tensor]:
    """(similarity, orthogonality) constraints, each summed over the batch."""
    sim = similarity_term(out.c_u_con, out.c_u_c) + similarity_term(out.c_i_pop, out.c_i_p)
    orth = orthogonal_term(out.c_u_con, out.c_u_int) + orthogonal_term(out.c_i_pop, out.c_i_pro)
    return sim, orth


def sampled_softmax_loss(anchors: Tensor, positives: Tensor, temperature: float = 1.0) -> Tensor:
    """In-batch softmax: row b's positive is positives[b], the other rows are negatives."""
    if anchors.shape[0] < 2:
        raise ValueError("sampled softmax needs a batch of at least 2 positives")
    if anchors.shape != positives.shape:
        raise nx.ShapeError(f"anchors {anchors.shape} vs positives {positives.shape}")
    logits = anchors @ nx.transpose(positives)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    n = anchors.shape[0]
    diag = logits[np.arange(n), np.arange(n)]
    return nx.mean(nx.logsumexp(logits, axis=1) - diag)


def cf_total_loss(bias: Tensor | float, unbias: Tensor | float, sim: Tensor | float,
                  orth: Tensor | float, gamma: float = 0.1):
    return bias + unbias + (sim + orth) * gamma
