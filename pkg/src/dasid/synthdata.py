"""Deterministic synthetic ad world: semantic clusters, Zipf popularity, user conformity.

Click probability for an impression (u, i) is

    sigmoid(semantic_w * aff(u, i) + popularity_w * pop(i)
            + conformity_w * conf(u) * pop(i) + bias)

where ``aff`` is the cosine between the noiseless latent cluster centers of u
and i, ``pop`` is the ad's log Zipf weight rescaled to [0, 1] and ``bias`` is
solved for so the expected click rate hits ``target_ctr``.  Impressions pick
users uniformly and ads in proportion to their Zipf weight.

Entity embeddings are a projected cluster center plus Gaussian noise.  With
``unit_scale`` they are divided by the square root of their dimension, which
keeps the reconstruction loss on the same scale as the contrastive terms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import TRAIN_FRAC, Dataset, save_dataset

CTR_RANGE = (0.05, 0.2)


@dataclass
class SynthConfig:
    n_users: int = 5000
    n_ads: int = 2000
    n_clusters: int = 20
    d_sem_user: int = 1024
    d_sem_ad: int = 256
    latent_dim: int = 16
    zipf_s: float = 1.2
    semantic_w: float = 3.0
    popularity_w: float = 0.5
    conformity_w: float = 1.0
    noise_sigma: float = 1.0
    # divide embeddings by sqrt(dim) so their squared norm is O(1) rather than O(dim)
    unit_scale: bool = True
    n_interactions: int = 100_000
    target_ctr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("zipf_s", "semantic_w", "popularity_w", "conformity_w", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.n_clusters <= min(self.n_users, self.n_ads):
            raise ValueError("n_clusters must be between 1 and min(n_users, n_ads)")
        if self.n_interactions < 1:
            raise ValueError("n_interactions must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SynthWorld:
    config: SynthConfig
    user_ids: list[str]
    ad_ids: list[str]
    user_cluster: np.ndarray
    ad_cluster: np.ndarray
    latent_centers: np.ndarray
    user_emb: np.ndarray
    ad_emb: np.ndarray
    ad_pop_weight: np.ndarray
    ad_pop_rank: np.ndarray  # 0 = most popular
    user_conformity: np.ndarray
    user_idx: np.ndarray
    ad_idx: np.ndarray
    click: np.ndarray
    ts: np.ndarray
    click_prob: np.ndarray
    user_bias: np.ndarray
    ad_bias: np.ndarray
    ctr_bias: float

    def to_dataset(self) -> Dataset:
        return Dataset(self.user_ids, self.ad_ids, self.user_emb, self.ad_emb, self.user_bias,
                       self.ad_bias, self.user_idx, self.ad_idx, self.click, self.ts)


def _assign_clusters(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    return rng.permutation(labels)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _calibrate(logit: np.ndarray, target: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(logit + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bias_features(n_users: int, n_ads: int, user_idx, ad_idx, click):
    """Conformity/popularity side features from an interaction log.

    ad: log1p(impressions), log1p(clicks).
    user: fraction of clicks on top-decile ads by impressions, log1p(clicks), log1p(impressions).
    """
    imp_a = np.bincount(ad_idx, minlength=n_ads)
    clk_a = np.bincount(ad_idx, weights=click, minlength=n_ads)
    cutoff = max(1, n_ads // 10)
    top = np.zeros(n_ads, dtype=bool)
    top[np.argsort(-imp_a, kind="stable")[:cutoff]] = True
    imp_u = np.bincount(user_idx, minlength=n_users)
    clk_u = np.bincount(user_idx, weights=click, minlength=n_users)
    clk_top = np.bincount(user_idx, weights=click * top[ad_idx], minlength=n_users)
    frac = np.divide(clk_top, clk_u, out=np.zeros(n_users), where=clk_u > 0)
    user = np.stack([frac, np.log1p(clk_u), np.log1p(imp_u)], axis=1)
    ad = np.stack([np.log1p(imp_a), np.log1p(clk_a)], axis=1)
    return user, ad


def generate(config: SynthConfig) -> SynthWorld:
    c = config
    streams = [np.random.Generator(np.random.PCG64(s))
               for s in np.random.SeedSequence(c.seed).spawn(6)]
    r_latent, r_assign, r_emb, r_pop, r_imp, r_click = streams

    latent = r_latent.normal(size=(c.n_clusters, c.latent_dim))
    latent /= np.linalg.norm(latent, axis=1, keepdims=True)
    # rows of latent have unit norm, so projected center entries have unit variance
    proj_u = r_latent.normal(size=(c.latent_dim, c.d_sem_user))
    proj_a = r_latent.normal(size=(c.latent_dim, c.d_sem_ad))
    center_u, center_a = latent @ proj_u, latent @ proj_a

    user_cluster = _assign_clusters(c.n_users, c.n_clusters, r_assign)
    ad_cluster = _assign_clusters(c.n_ads, c.n_clusters, r_assign)
    scale_u = 1 / np.sqrt(c.d_sem_user) if c.unit_scale else 1.0
    scale_a = 1 / np.sqrt(c.d_sem_ad) if c.unit_scale else 1.0
    # float32-representable values so the DASE round trip is exact
    user_emb = (scale_u * (center_u[user_cluster] + c.noise_sigma * r_emb.normal(size=(c.n_users, c.d_sem_user)))
                ).astype(np.float32)
    ad_emb = (scale_a * (center_a[ad_cluster] + c.noise_sigma * r_emb.normal(size=(c.n_ads, c.d_sem_ad)))
              ).astype(np.float32)

    rank = r_pop.permutation(c.n_ads)
    weight = (rank + 1.0) ** (-c.zipf_s)
    weight /= weight.sum()
    logw = np.log(weight)
    span = logw.max() - logw.min()
    pop = (logw - logw.min()) / span if span > 0 else np.zeros(c.n_ads)
    conformity = r_pop.beta(2.0, 2.0, size=c.n_users)

    users = r_imp.integers(0, c.n_users, c.n_interactions)
    ads = r_imp.choice(c.n_ads, size=c.n_interactions, p=weight)
    aff = np.einsum("ij,ij->i", latent[user_cluster[users]], latent[ad_cluster[ads]])
    logit = c.semantic_w * aff + c.popularity_w * pop[ads] + c.conformity_w * conformity[users] * pop[ads]
    if not CTR_RANGE[0] <= c.target_ctr <= CTR_RANGE[1]:
        achieved = float(_sigmoid(logit + _calibrate(logit, c.target_ctr)).mean())
        raise ValueError(f"target_ctr {c.target_ctr} outside {CTR_RANGE}; achieved mean rate {achieved:.4f}")
    bias = _calibrate(logit, c.target_ctr)
    prob = _sigmoid(logit + bias)
    click = (r_click.random(c.n_interactions) < prob).astype(np.int8)
    rate = float(click.mean())
    if not CTR_RANGE[0] <= rate <= CTR_RANGE[1]:
        raise ValueError(f"calibration infeasible: achieved mean click rate {rate:.4f} outside {CTR_RANGE}")
    ts = np.arange(c.n_interactions, dtype=np.int64)

    n_train = int(np.floor(TRAIN_FRAC * c.n_interactions))
    ub, ab = bias_features(c.n_users, c.n_ads, users[:n_train], ads[:n_train], click[:n_train])

    return SynthWorld(
        config=c,
        user_ids=[f"u{k}" for k in range(c.n_users)],
        ad_ids=[f"a{k}" for k in range(c.n_ads)],
        user_cluster=user_cluster,
        ad_cluster=ad_cluster,
        latent_centers=latent,
        user_emb=user_emb,
        ad_emb=ad_emb,
        ad_pop_weight=weight,
        ad_pop_rank=rank,
        user_conformity=conformity,
        user_idx=users.astype(np.intp),
        ad_idx=ads.astype(np.intp),
        click=click,
        ts=ts,
        click_prob=prob,
        user_bias=ub,
        ad_bias=ab,
        ctr_bias=float(bias),
    )


def top_share(world: SynthWorld, frac: float = 0.2) -> float:
    """Share of clicks going to the top ``frac`` of ads by generating popularity rank."""
    k = int(round(frac * world.config.n_ads))
    top = world.ad_pop_rank < k
    clicks = world.click.astype(bool)
    return float(top[world.ad_idx[clicks]].mean())


def write_dataset(world: SynthWorld, directory: str | Path) -> Path:
    d = Path(directory)
    save_dataset(world.to_dataset(), d)
    truth = {
        "config": asdict(world.config),
        "n_clusters": world.config.n_clusters,
        "cluster_ids": sorted({int(x) for x in world.user_cluster} | {int(x) for x in world.ad_cluster}),
        "user_cluster": {e: int(k) for e, k in zip(world.user_ids, world.user_cluster)},
        "ad_cluster": {e: int(k) for e, k in zip(world.ad_ids, world.ad_cluster)},
        "ad_popularity": {e: float(w) for e, w in zip(world.ad_ids, world.ad_pop_weight)},
        "user_conformity": {e: float(v) for e, v in zip(world.user_ids, world.user_conformity)},
    }
    (d / "ground_truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True), encoding="utf-8")
    return d
