"""Residual-quantized autoencoder turning semantic embeddings into semantic IDs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Mlp, Parameter, Tensor

SIDES = ("user", "ad")


@dataclass(frozen=True)
class SemanticEmbedding:
    entity_id: str
    side: str
    vector: np.ndarray

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"non-finite semantic embedding for {self.entity_id!r}")


@dataclass
class QuantizationResult:
    sid: list[int]
    residuals: list[np.ndarray]  # r_0 .. r_L
    z: np.ndarray
    reconstruction: np.ndarray


@dataclass
class RqForward:
    """Batch forward pass, keeping the taped tensors the losses need."""

    codes: np.ndarray  # (B, L) int
    r0: Tensor
    residuals: list[Tensor]  # r_0 .. r_L, built with detached code rows
    code_rows: list[Tensor]  # e_{c_l} per level, differentiable into codebook l
    z: Tensor  # sum of code rows; gradient reaches codebooks only
    z_align: Tensor  # value z; gradient reaches codebooks and encoder
    recon: Tensor


def nearest_code(residual: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest codebook row for each residual row; ties -> smallest index."""
    d2 = ((residual[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def kmeans_init(samples: np.ndarray, n_codes: int, max_iters: int,
                rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations.

    Empty clusters are reseeded to the sample farthest from its current
    centroid.  Raises ``ValueError`` when fewer than ``n_codes`` distinct
    samples are available.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n < n_codes:
        raise ValueError(f"k-means needs at least {n_codes} samples, got {n}")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < n_codes:
        raise ValueError(f"k-means needs at least {n_codes} distinct samples, got {n_distinct}")

    centers = np.empty((n_codes, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for k in range(1, n_codes):
        probs = closest / closest.sum()
        centers[k] = x[rng.choice(n, p=probs)]
        closest = np.minimum(closest, ((x - centers[k]) ** 2).sum(axis=1))

    x_sq = (x * x).sum(axis=1)
    assign = None
    for _ in range(max_iters):
        d2 = x_sq[:, None] - 2 * x @ centers.T + (centers * centers).sum(axis=1)[None, :]
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=n_codes)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            spread = ((x - centers[assign]) ** 2).sum(axis=1)
            donors = np.argsort(-spread, kind="stable")[: empty.size]
            centers[empty] = x[donors]
            assign = None
    return centers


class RqVae:
    """Encoder -> L-level residual quantizer -> decoder, for one side."""

    def __init__(self, side: str, d_sem: int, d: int = 32, n_codes: int = 512, n_levels: int = 3,
                 hidden: Sequence[int] = (128, 128), mu: float = 0.25,
                 rng: np.random.Generator | None = None, name: str | None = None):
        if side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {side!r}")
        self.side = side
        self.d_sem, self.d, self.n_codes, self.n_levels = d_sem, d, n_codes, n_levels
        self.mu = mu
        self.name = name or ("user_rq" if side == "user" else "item_rq")
        rng = rng if rng is not None else nx.make_rng(0)
        self.encoder = Mlp(f"{self.name}.encoder", [d_sem, *hidden, d], rng)
        self.decoder = Mlp(f"{self.name}.decoder", [d, *hidden, d_sem], rng)
        self.codebooks = [Parameter(f"{self.name}.codebook.{l + 1}", rng.normal(0, 0.1, (n_codes, d)))
                          for l in range(n_levels)]

    def parameters(self) -> dict[str, Parameter]:
        out = {**self.encoder.parameters(), **self.decoder.parameters()}
        out.update({c.name: c for c in self.codebooks})
        return out

    def _check(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=nx.get_default_dtype())
        if s.ndim != 2 or s.shape[1] != self.d_sem:
            raise nx.ShapeError(f"{self.side} embeddings must have shape (B, {self.d_sem}), got {s.shape}")
        return s

    def forward(self, s: np.ndarray) -> RqForward:
        s = self._check(s)
        r0 = self.encoder(nx.tensor(s))
        residual = r0
        residuals, rows, codes = [r0], [], []
        for codebook in self.codebooks:
            idx = nearest_code(residual.value, codebook.value)
            row = nx.take_rows(codebook, idx)
            residual = residual - nx.stop_grad(row)
            residuals.append(residual)
            rows.append(row)
            codes.append(idx)
        z = rows[0]
        for row in rows[1:]:
            z = z + row
        # decoder sees z's value while gradients pass straight through to the encoder
        z_st = r0 + nx.stop_grad(z - r0)
        z_align = z + (r0 - nx.stop_grad(r0))
        recon = self.decoder(z_st)
        return RqForward(np.stack(codes, axis=1), r0, residuals, rows, z, z_align, recon)

    def losses(self, s: np.ndarray, out: RqForward | None = None) -> tuple[Tensor, Tensor]:
        """(reconstruction, rq) losses averaged over the batch."""
        s = self._check(s)
        if s.shape[0] == 0:
            raise ValueError("semantic loss needs a non-empty batch")
        out = out or self.forward(s)
        recon = nx.mean(nx.tsum(nx.square(nx.tensor(s) - out.recon), axis=1))
        rq = None
        for prev, row in zip(out.residuals[:-1], out.code_rows):
            commit = nx.tsum(nx.square(nx.stop_grad(prev) - row), axis=1)
            enc = nx.tsum(nx.square(prev - nx.stop_grad(row)), axis=1)
            term = commit + enc * self.mu
            rq = term if rq is None else rq + term
        return recon, nx.mean(rq)

    def pooled(self, codes: np.ndarray) -> Tensor:
        """Sum of code rows for each SID row; differentiable into the codebooks."""
        codes = np.atleast_2d(np.asarray(codes, dtype=np.intp))
        if codes.shape[1] != self.n_levels:
            raise ValueError(f"SID must have {self.n_levels} levels, got {codes.shape[1]}")
        if codes.min() < 0 or codes.max() >= self.n_codes:
            raise IndexError(f"SID code out of range [0, {self.n_codes})")
        z = nx.take_rows(self.codebooks[0], codes[:, 0])
        for l in range(1, self.n_levels):
            z = z + nx.take_rows(self.codebooks[l], codes[:, l])
        return z

    def infer(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(codes, z) for a batch, without recording or touching parameters."""
        with nx.no_grad():
            out = self.forward(s)
        return out.codes, out.z.value.copy()

    def init_codebooks(self, samples: np.ndarray, rng: np.random.Generator, max_iters: int = 25) -> None:
        """Sequential per-level k-means on encoder outputs of ``samples``."""
        with nx.no_grad():
            residual = self.encoder(nx.tensor(self._check(samples))).value.astype(np.float64)
        for codebook in self.codebooks:
            centers = kmeans_init(residual, self.n_codes, max_iters, rng)
            codebook.value = centers.astype(codebook.value.dtype)
            residual = residual - codebook.value[nearest_code(residual, codebook.value)]


def _side_of(s) -> str | None:
    return s.side if isinstance(s, SemanticEmbedding) else None


def quantize(model: RqVae, s) -> QuantizationResult:
    side = _side_of(s)
    if side is not None and side != model.side:
        raise ValueError(f"{side} embedding given to the {model.side} quantizer")
    vec = s.vector if isinstance(s, SemanticEmbedding) else np.asarray(s)
    with nx.no_grad():
        out = model.forward(vec[None, :])
    return QuantizationResult(
        sid=[int(c) for c in out.codes[0]],
        residuals=[r.value[0].copy() for r in out.residuals],
        z=out.z.value[0].copy(),
        reconstruction=out.recon.value[0].copy(),
    )


def semantic_loss(model: RqVae, batch) -> tuple[float, float]:
    if len(batch) and isinstance(batch[0], SemanticEmbedding):
        if any(b.side != model.side for b in batch):
            raise ValueError(f"batch contains embeddings not of side {model.side!r}")
        batch = np.stack([b.vector for b in batch])
    with nx.no_grad():
        recon, rq = model.losses(np.asarray(batch))
    return float(recon.value), float(rq.value)


def pooled_sid_embedding(model: RqVae, sid: Sequence[int]) -> np.ndarray:
    with nx.no_grad():
        return model.pooled(np.asarray(sid)[None, :]).value[0].copy()


def infer_sid(model: RqVae, s) -> tuple[np.ndarray, np.ndarray]:
    """SIDs and pooled embeddings for one vector (1-D) or a batch (2-D)."""
    side = _side_of(s)
    if side is not None and side != model.side:
        raise ValueError(f"{side} embedding given to the {model.side} quantizer")
    vec = np.asarray(s.vector if isinstance(s, SemanticEmbedding) else s)
    if vec.ndim == 1:
        codes, z = model.infer(vec[None, :])
        return codes[0], z[0]
    return model.infer(vec)


# ---------------------------------------------------------------- file formats

DASE_MAGIC = b"DASE"


def ids_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def write_embeddings(path: str | Path, entity_ids: Sequence[str], vectors: np.ndarray) -> None:
    """DASE file: magic, u32 count, u32 dim, float32 LE rows; sidecar ``<path>.ids``."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] != len(entity_ids):
        raise ValueError(f"need one row per entity id, got {vectors.shape} for {len(entity_ids)} ids")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(DASE_MAGIC)
        f.write(struct.pack("<II", *vectors.shape))
        f.write(vectors.astype("<f4").tobytes(order="C"))
    ids_path(path).write_text("".join(f"{e}\n" for e in entity_ids), encoding="utf-8")


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DASE_MAGIC:
        raise ValueError(f"{path}: not a DASE file")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count}x{dim}, found {len(raw)}")
    vectors = np.frombuffer(raw, dtype="<f4", offset=12).reshape(count, dim).astype(np.float32)
    ids = ids_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise ValueError(f"{path}: sidecar lists {len(ids)} ids for {count} rows")
    return ids, vectors


def write_sid_tsv(path: str | Path, entity_ids: Sequence[str], codes: np.ndarray) -> None:
    lines = [f"{e}\t{','.join(str(int(c)) for c in row)}\n" for e, row in zip(entity_ids, codes)]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_sid_tsv(path: str | Path) -> dict[str, list[int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        entity, codes = line.split("\t")
        out[entity] = [int(c) for c in codes.split(",")]
    return out
