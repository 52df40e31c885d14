"""One-stage co-training of both quantizers, the debias towers and the alignment losses."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import alignment as al
from . import cf_debias as cf
from . import numerics as nx
from .dataset import Dataset
from .numerics import AdamW, OptimizerConfig, Parameter
from .quantizer import RqVae

log = logging.getLogger(__name__)

LOSS_KEYS = ("total", "sem", "sem_user", "sem_ad", "recon_user", "rq_user", "recon_ad", "rq_ad",
             "cf", "cf_bias", "cf_unbias", "cf_sim", "cf_orth", "align", *al.ALIGN_TERMS)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, breakdown: dict):
        super().__init__(message)
        self.breakdown = breakdown


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    mu: float = 0.25
    L: int = 3
    N: int = 512
    d: int = 32
    B: int = 128
    L_neg: int = 32
    lr: float = 1e-3
    epochs: int = 5
    seed: int = 0
    weight_decay: float = 0.0
    hidden: int = 128
    emb_dim: int = 32
    tower_width: int = 64
    K_bank: int = 16
    temperature: float = 1.0
    kmeans_iters: int = 25
    warmup_samples: int = 50_000
    reseed_dead_codes: bool = False
    precision: str = "float64"
    # ablation switches
    use_cf: bool = True
    use_u2i: bool = True
    use_view: bool = True
    use_cooccur: bool = True
    debiased: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "mu", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("L", "N", "d", "B", "L_neg", "hidden", "emb_dim", "tower_width", "K_bank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")

    @property
    def uses_alignment(self) -> bool:
        return self.use_u2i or self.use_view or self.use_cooccur

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


class DasModel:
    """User and ad RQ-VAEs plus the debias towers, sharing one parameter namespace."""

    def __init__(self, config: TrainConfig, user_ids: list[str], ad_ids: list[str], d_sem_user: int,
                 d_sem_ad: int, user_bias_dim: int, ad_bias_dim: int, rng: np.random.Generator | None = None):
        self.config = config
        self.user_ids, self.ad_ids = list(user_ids), list(ad_ids)
        self.d_sem_user, self.d_sem_ad = d_sem_user, d_sem_ad
        self.user_bias_dim, self.ad_bias_dim = user_bias_dim, ad_bias_dim
        rng = rng if rng is not None else nx.make_rng(config.seed)
        hidden = (config.hidden, config.hidden)
        with nx.precision(config.precision):
            self.user_rq = RqVae("user", d_sem_user, config.d, config.N, config.L, hidden, config.mu, rng, "user_rq")
            self.ad_rq = RqVae("ad", d_sem_ad, config.d, config.N, config.L, hidden, config.mu, rng, "item_rq")
            self.towers = cf.DebiasTowers(len(user_ids), len(ad_ids), user_bias_dim, ad_bias_dim,
                                          d_align=config.d, emb_dim=config.emb_dim, width=config.tower_width,
                                          rng=rng)
        self.step = 0

    @classmethod
    def for_dataset(cls, config: TrainConfig, data: Dataset, rng=None) -> "DasModel":
        return cls(config, data.user_ids, data.ad_ids, data.user_emb.shape[1], data.ad_emb.shape[1],
                   data.user_bias.shape[1], data.ad_bias.shape[1], rng)

    def parameters(self) -> dict[str, Parameter]:
        out = {**self.user_rq.parameters(), **self.ad_rq.parameters(), **self.towers.parameters()}
        return dict(sorted(out.items()))

    def meta(self) -> dict:
        return {
            "user_ids": self.user_ids,
            "ad_ids": self.ad_ids,
            "d_sem_user": self.d_sem_user,
            "d_sem_ad": self.d_sem_ad,
            "user_bias_dim": self.user_bias_dim,
            "ad_bias_dim": self.ad_bias_dim,
        }

    def rq(self, side: str) -> RqVae:
        if side == "user":
            return self.user_rq
        if side == "ad":
            return self.ad_rq
        raise ValueError(f"side must be 'user' or 'ad', got {side!r}")


@dataclass
class FitResult:
    model: DasModel
    bank: al.MemoryBank
    trace: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "kmeans", "shuffle", "negatives", "reseed")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, seqs)}


def _val(x) -> float | None:
    if x is None:
        return None
    return float(x.value) if isinstance(x, nx.Tensor) else float(x)


@dataclass
class StepLosses:
    parts: dict
    batch: al.AlignBatch | None
    user_out: object
    ad_out: object
    n_pos: int

    @property
    def total(self) -> nx.Tensor:
        return self.parts["total"]


def compute_losses(model: DasModel, bank: al.MemoryBank, data: Dataset, rows: np.ndarray, config: TrainConfig,
                   rng: np.random.Generator, stage: list | None = None) -> StepLosses:
    """Build every loss term for the interactions ``rows`` without touching parameters or the bank.

    Terms switched off or not computable on this batch (fewer than two
    positives) stay ``None`` in ``parts``.  When ``stage`` is given, its
    single slot holds the name of the term currently being computed, so a
    failure can be attributed.
    """
    stage = stage if stage is not None else [None]
    u = data.user_idx[rows]
    a = data.ad_idx[rows]
    click = data.click[rows].astype(bool)
    uu, u_inv = np.unique(u, return_inverse=True)
    aa, a_inv = np.unique(a, return_inverse=True)

    user_s, ad_s = data.user_emb[uu], data.ad_emb[aa]
    stage[0] = "recon_user"
    user_out = model.user_rq.forward(user_s)
    recon_u, rq_u = model.user_rq.losses(user_s, user_out)
    stage[0] = "recon_ad"
    ad_out = model.ad_rq.forward(ad_s)
    recon_a, rq_a = model.ad_rq.losses(ad_s, ad_out)
    stage[0] = "sem"
    sem_user, sem_ad = recon_u + rq_u, recon_a + rq_a
    sem = sem_user + sem_ad
    parts: dict = dict.fromkeys(LOSS_KEYS)
    parts.update(sem=sem, sem_user=sem_user, sem_ad=sem_ad, recon_user=recon_u, rq_user=rq_u,
                 recon_ad=recon_a, rq_ad=rq_a)
    total = sem

    pos = np.flatnonzero(click)
    enough = pos.size >= 2
    cf_out = None
    stage[0] = "cf"
    if config.use_cf or config.uses_alignment:
        cf_out = model.towers.forward(u, a, data.user_bias[u], data.ad_bias[a])
    if config.use_cf and cf_out is not None:
        sim, orth = cf.disentangle_loss(cf_out)
        cf_all = (sim + orth) * config.gamma
        parts.update(cf_sim=sim, cf_orth=orth)
        if enough:
            bias = cf.sampled_softmax_loss(cf_out.c_u[pos], cf_out.c_i[pos], config.temperature)
            unbias = cf.sampled_softmax_loss(cf_out.c_u_int[pos], cf_out.c_i_pro[pos], config.temperature)
            cf_all = cf.cf_total_loss(bias, unbias, sim, orth, config.gamma)
            parts.update(cf_bias=bias, cf_unbias=unbias)
        parts["cf"] = cf_all
        total = total + cf_all * config.alpha

    batch = None
    if config.uses_alignment and enough:
        c_u = cf_out.c_u_int if config.debiased else cf_out.c_u
        c_i = cf_out.c_i_pro if config.debiased else cf_out.c_i
        batch = al.AlignBatch(
            z_u=user_out.z_align[u_inv[pos]],
            z_i=ad_out.z_align[a_inv[pos]],
            c_u=c_u[pos],
            c_i=c_i[pos],
            user_ids=u[pos],
            ad_ids=a[pos],
        )
        terms: dict = {}
        stage[0] = "a_u2i"
        if config.use_u2i:
            terms["a_u2i_zu"], terms["a_u2i_zi"] = al.dual_u2i_losses(batch, config.L_neg, rng, config.temperature)
        stage[0] = "a_view"
        if config.use_view:
            terms["a_u2u_zu"], terms["a_i2i_zi"] = al.dual_view_losses(batch, config.temperature)
        stage[0] = "a_cooccur"
        if config.use_cooccur:
            lu, li, _, _ = al.dual_cooccur_losses(batch, bank, config.L_neg, rng, config.temperature)
            terms["a_co_u2u_zu"], terms["a_co_i2i_zi"] = lu, li
        stage[0] = "align"
        align = al.align_total(terms)
        parts.update(terms)
        parts["align"] = align
        total = total + align * config.beta
    parts["total"] = total
    return StepLosses(parts, batch, user_out, ad_out, int(pos.size))


def train_step(model: DasModel, bank: al.MemoryBank, data: Dataset, rows: np.ndarray, config: TrainConfig,
               optimizer: AdamW, rng: np.random.Generator) -> dict:
    """Forward all losses on ``rows``, take one optimizer step, then update the memory bank.

    Returns every sub-loss value; absent terms are ``None``.
    """
    stage: list = [None]
    try:
        step = compute_losses(model, bank, data, rows, config, rng, stage)
    except nx.NonFiniteError as e:
        raise TrainingDivergedError(f"non-finite value while computing {stage[0]}: {e}", {stage[0]: math.nan}) from e
    breakdown = {k: _val(v) for k, v in step.parts.items()}
    bad = [k for k, v in breakdown.items() if v is not None and not math.isfinite(v)]
    if bad:
        raise TrainingDivergedError(f"non-finite loss terms: {bad}", breakdown)

    nx.backward(step.total)
    optimizer.step()
    model.step += 1
    if step.batch is not None and config.use_cooccur:
        al.update_memory_bank(bank, step.batch)
    breakdown["n_pos"] = step.n_pos
    breakdown["user_codes"] = step.user_out.codes
    breakdown["ad_codes"] = step.ad_out.codes
    breakdown["user_r"] = step.user_out.residuals
    breakdown["ad_r"] = step.ad_out.residuals
    return breakdown


def warmup_codebooks(model: DasModel, data: Dataset, config: TrainConfig, rng: np.random.Generator) -> None:
    """Sequential per-level k-means on the untrained encoders' outputs."""
    for rq, emb in ((model.user_rq, data.user_emb), (model.ad_rq, data.ad_emb)):
        n = min(config.warmup_samples, emb.shape[0])
        idx = np.sort(rng.choice(emb.shape[0], n, replace=False)) if n < emb.shape[0] else np.arange(n)
        rq.init_codebooks(emb[idx], rng, config.kmeans_iters)


def _reseed_dead(rq: RqVae, used: list[np.ndarray], residuals: list[np.ndarray], rng) -> int:
    n = 0
    for level, codebook in enumerate(rq.codebooks):
        dead = np.flatnonzero(~used[level])
        if dead.size and residuals[level].shape[0]:
            pick = rng.integers(0, residuals[level].shape[0], dead.size)
            codebook.value[dead] = residuals[level][pick]
            n += dead.size
    return n


def fit(data: Dataset, config: TrainConfig, progress: bool = False) -> FitResult:
    if len(data) == 0 or data.train_rows.size == 0:
        raise ValueError("cannot train on an empty dataset")
    rngs = _rng_streams(config.seed)
    with nx.precision(config.precision):
        model = DasModel.for_dataset(config, data, rngs["init"])
        bank = al.MemoryBank(config.K_bank)
        result = FitResult(model, bank)
        if config.epochs == 0:
            return result
        warmup_codebooks(model, data, config, rngs["kmeans"])
        optimizer = AdamW(model.parameters(), config.lr, OptimizerConfig(weight_decay=config.weight_decay))
        rows_all = data.train_rows
        for epoch in range(config.epochs):
            perm = rows_all[rngs["shuffle"].permutation(rows_all.size)]
            used = {s: [np.zeros(config.N, dtype=bool) for _ in range(config.L)] for s in ("user", "ad")}
            last_r = None
            sums: dict[str, float] = {}
            n_steps = 0
            for start in range(0, perm.size, config.B):
                rows = perm[start:start + config.B]
                if rows.size < 2:
                    continue
                out = train_step(model, bank, data, rows, config, optimizer, rngs["negatives"])
                for side in ("user", "ad"):
                    codes = out.pop(f"{side}_codes")
                    for level in range(config.L):
                        used[side][level][codes[:, level]] = True
                last_r = {s: [r.value for r in out.pop(f"{s}_r")[:-1]] for s in ("user", "ad")}
                out["epoch"] = epoch
                out["step"] = model.step
                result.trace.append(out)
                for k, v in out.items():
                    if k in LOSS_KEYS and v is not None:
                        sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
            summary = {k: v / n_steps for k, v in sums.items()}
            summary["epoch"] = epoch
            if config.reseed_dead_codes and last_r is not None:
                summary["reseeded"] = (_reseed_dead(model.user_rq, used["user"], last_r["user"], rngs["reseed"])
                                       + _reseed_dead(model.ad_rq, used["ad"], last_r["ad"], rngs["reseed"]))
            result.epochs.append(summary)
            if progress:
                log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in summary.items()
                                                 if isinstance(v, float)})
    return result


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DASC"
CKPT_VERSION = 1


def save_checkpoint(model: DasModel, path: str | Path) -> None:
    """Header (magic, version, manifest length), JSON manifest, then the raw parameter blob."""
    params = model.parameters()
    entries, chunks, offset = [], [], 0
    for name, p in params.items():
        raw = np.ascontiguousarray(p.value).astype(p.value.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "dtype": p.value.dtype.str.lstrip("<>=|"),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"config": model.config.to_dict(), "step": model.step, "meta": model.meta(), "params": entries}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path: str | Path, expected_config: TrainConfig | None = None) -> DasModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, mlen = struct.unpack("<IQ", raw[4:16])
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
        config = TrainConfig.from_dict(manifest["config"])
        meta = manifest["meta"]
        entries = manifest["params"]
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if config.to_dict().get(k) != v)
        raise CheckpointError(f"{path}: config mismatch in {diff}")
    model = DasModel(config, meta["user_ids"], meta["ad_ids"], meta["d_sem_user"], meta["d_sem_ad"],
                     meta["user_bias_dim"], meta["ad_bias_dim"])
    params = model.parameters()
    blob = raw[16 + mlen:]
    names = {e["name"] for e in entries}
    missing = sorted(set(params) - names)
    if missing:
        raise CheckpointError(f"{path}: manifest lacks parameters {missing}")
    for e in entries:
        name = e["name"]
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        p = params[name]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: {tuple(e['shape'])} vs {p.shape}")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated blob, parameter {name!r} is missing data")
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        p.value = np.frombuffer(blob, dtype=dtype, count=int(np.prod(e["shape"], dtype=np.int64)),
                                offset=e["offset"]).reshape(e["shape"]).astype(dtype.newbyteorder("="))
        p.zero_grad()
    model.step = manifest["step"]
    return model
