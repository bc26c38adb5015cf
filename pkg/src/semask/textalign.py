"""Training-only text branch.

Builds text queries from token ids, runs a cross-attention transformer
whose keys and values come from the speech embeddings, pairs the outputs
with target linguistic embeddings under an alignment mode (aligned, or
shifted one token left/right using the BOS/EOS framing), and computes the
cosine alignment loss. None of this runs at inference; every public op
bumps a call counter so tests can prove that.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Tensor, dropout
from .errors import (CheckpointError, DegenerateEmbedding, EmptyText,
                     InputError, ShapeError, VocabError)
from .model import (ParamStore, _Init, _linear, _ln, multi_head_attention,
                    sinusoidal_encoding)

ARCHIVE_MAGIC = b"CMKE"
ARCHIVE_VERSION = 1
MAX_TOKENS = 512

# incremented by every public op; lets tests assert the inference path
# never enters this module
CALL_COUNTS: dict[str, int] = {}


def _count(name: str):
    CALL_COUNTS[name] = CALL_COUNTS.get(name, 0) + 1


def reset_call_counts():
    CALL_COUNTS.clear()


class AlignMode(Enum):
    ALIGNED = "aligned"
    LEFT_SHIFT = "left"
    RIGHT_SHIFT = "right"


@dataclass
class TokenSequence:
    ids: np.ndarray             # real tokens only, no BOS/EOS
    bos_id: int
    eos_id: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ShapeError("token ids must be 1-D")

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass
class EmbeddingTable:
    values: np.ndarray          # [vocab, d_t]
    trainable: bool = False

    @property
    def vocab_size(self) -> int:
        return self.values.shape[0]

    @property
    def d_t(self) -> int:
        return self.values.shape[1]


@dataclass
class UtteranceText:
    utt_id: str
    ids: np.ndarray
    target: np.ndarray | None   # [N, d_t] linguistic embeddings, or None

    @property
    def has_target(self) -> bool:
        return self.target is not None


@dataclass
class EmbeddingArchive:
    d_t: int
    bos_id: int
    eos_id: int
    target_layer: int = -1
    table: np.ndarray | None = None
    utterances: dict[str, UtteranceText] = field(default_factory=dict)

    def embedding_table(self, trainable: bool = False) -> EmbeddingTable:
        if self.table is None:
            raise InputError("archive carries no embedding table")
        return EmbeddingTable(self.table, trainable=trainable)


@dataclass
class CmtConfig:
    layers: int = 3
    d_model: int = 768
    heads: int = 12
    ffn_dim: int = 2048
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ShapeError("d_model must be divisible by heads")


def init_cmt_params(store: ParamStore, cfg: CmtConfig, seed: int,
                    dtype=np.float32) -> ParamStore:
    """Add cross-modality transformer weights to an existing store."""
    ini = _Init(store, seed, dtype)
    for i in range(cfg.layers):
        pre = f"cmt{i}."
        ini.attention(pre + "mhca.", cfg.d_model)
        ini.norm(pre + "ln1", cfg.d_model)
        ini.linear(pre + "ffn.lin1", cfg.d_model, cfg.ffn_dim)
        ini.linear(pre + "ffn.lin2", cfg.ffn_dim, cfg.d_model)
        ini.norm(pre + "ln2", cfg.d_model)
    return store


def build_text_queries(tokens: TokenSequence, table: EmbeddingTable,
                       store: ParamStore | None = None) -> Tensor:
    """BOS + ids + EOS rows from the table, plus sinusoidal position encoding.

    When the table is trainable its tensor must live in `store` under
    "text.emb" so gradients flow into it.
    """
    _count("build_text_queries")
    ids = tokens.ids
    if len(ids) > MAX_TOKENS:
        warnings.warn(f"token sequence truncated to {MAX_TOKENS}")
        ids = ids[:MAX_TOKENS]
    full = np.concatenate(([tokens.bos_id], ids, [tokens.eos_id]))
    if full.min() < 0 or full.max() >= table.vocab_size:
        raise VocabError(f"token id out of range 0..{table.vocab_size - 1}")
    if table.trainable and store is not None and "text.emb" in store:
        emb = store["text.emb"][full]
    else:
        emb = Tensor(table.values[full].copy())
    pe = sinusoidal_encoding(len(full), table.d_t, dtype=emb.dtype)
    return emb + Tensor(pe)


def cmt_forward(e_t: Tensor, e_a: Tensor, store: ParamStore, cfg: CmtConfig,
                rng=None) -> tuple[Tensor, np.ndarray]:
    """Encoder stack with self-attention replaced by cross-attention.

    Text rows are queries; speech embeddings feed keys and values at every
    layer. Returns (Z, attention weights [layers, heads, N+2, T_a]).
    """
    _count("cmt_forward")
    if e_a.shape[0] < 1:
        raise InputError("empty speech embedding sequence")
    if e_t.shape[1] != cfg.d_model or e_a.shape[1] != cfg.d_model:
        raise ShapeError("embedding width does not match CMT d_model")
    z = e_t
    maps = []
    for i in range(cfg.layers):
        pre = f"cmt{i}."
        att, w = multi_head_attention(z, e_a, store, pre + "mhca.",
                                      cfg.heads, rng, cfg.dropout)
        maps.append(w.data.copy())
        z = _ln(z + dropout(att, cfg.dropout, rng), store, pre + "ln1")
        f = _linear(_linear(z, store, pre + "ffn.lin1").relu(),
                    store, pre + "ffn.lin2")
        z = _ln(z + dropout(f, cfg.dropout, rng), store, pre + "ln2")
    return z, np.stack(maps)


def shift_pairs(z: Tensor, z_hat: np.ndarray, mode: AlignMode) -> tuple[Tensor, np.ndarray]:
    """Select which N rows of Z are compared against the N target rows.

    Z carries BOS at row 0 and EOS at row N+1. Aligned pairs row t with
    target t. Right shift pairs row t-1 with target t (each query predicts
    the next token's embedding; BOS predicts token 1). Left shift pairs row
    t+1 with target t (each query predicts the previous token's embedding;
    EOS predicts token N). All modes yield exactly N pairs.
    """
    _count("shift_pairs")
    n = z_hat.shape[0]
    if n == 0:
        raise EmptyText("no real tokens; caller must fall back to SE-only loss")
    if z.shape[0] != n + 2:
        raise ShapeError(f"expected {n + 2} query rows, got {z.shape[0]}")
    if mode == AlignMode.ALIGNED:
        sel = z[1:n + 1]
    elif mode == AlignMode.RIGHT_SHIFT:
        sel = z[0:n]
    else:
        sel = z[2:n + 2]
    return sel, z_hat


def cma_loss(z_sel: Tensor, z_hat: np.ndarray) -> Tensor:
    """Sum over pairs of (1 - cosine similarity); range [0, 2N]."""
    _count("cma_loss")
    if z_sel.shape != z_hat.shape:
        raise ShapeError(f"{z_sel.shape} vs {z_hat.shape}")
    norms_hat = np.linalg.norm(z_hat, axis=1)
    if np.any(norms_hat == 0) or np.any(np.linalg.norm(z_sel.data, axis=1) == 0):
        raise DegenerateEmbedding("zero-norm embedding row")
    target = Tensor(z_hat.astype(z_sel.dtype) / norms_hat[:, None].astype(z_sel.dtype))
    z_norm = ((z_sel * z_sel).sum(axis=1, keepdims=True)) ** -0.5
    cos = (z_sel * z_norm * target).sum(axis=1)
    return (1.0 - cos).sum()


# -- EmbeddingArchive binary codec -------------------------------------------

def write_archive(path, archive: EmbeddingArchive) -> None:
    table = archive.table
    flags = 1 if table is not None else 0
    with open(str(path), "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<IIIIIiI", ARCHIVE_VERSION, archive.d_t,
                             0 if table is None else table.shape[0],
                             archive.bos_id, archive.eos_id,
                             archive.target_layer, flags))
        if table is not None:
            if table.shape[1] != archive.d_t:
                raise ShapeError("table width does not match d_t")
            fh.write(np.ascontiguousarray(table, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(archive.utterances)))
        for utt in archive.utterances.values():
            raw = utt.utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            ids = np.asarray(utt.ids, dtype="<u4")
            fh.write(struct.pack("<I", len(ids)))
            fh.write(ids.tobytes())
            fh.write(struct.pack("<B", 1 if utt.has_target else 0))
            if utt.has_target:
                if utt.target.shape != (len(ids), archive.d_t):
                    raise ShapeError(f"{utt.utt_id}: target shape mismatch")
                fh.write(np.ascontiguousarray(utt.target, dtype="<f4").tobytes())


def read_archive(path) -> EmbeddingArchive:
    with open(str(path), "rb") as fh:
        if fh.read(4) != ARCHIVE_MAGIC:
            raise CheckpointError(f"{path}: bad archive magic")
        version, d_t, vocab, bos, eos, layer, flags = struct.unpack("<IIIIIiI", fh.read(28))
        if version != ARCHIVE_VERSION:
            raise CheckpointError(f"{path}: unsupported archive version {version}")
        table = None
        if flags & 1:
            table = np.frombuffer(fh.read(4 * vocab * d_t), dtype="<f4").reshape(vocab, d_t).copy()
        archive = EmbeddingArchive(d_t=d_t, bos_id=bos, eos_id=eos,
                                   target_layer=layer, table=table)
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            utt_id = fh.read(id_len).decode("utf-8")
            (n,) = struct.unpack("<I", fh.read(4))
            ids = np.frombuffer(fh.read(4 * n), dtype="<u4").astype(np.int64)
            (has_target,) = struct.unpack("<B", fh.read(1))
            target = None
            if has_target:
                target = np.frombuffer(fh.read(4 * n * d_t), dtype="<f4").reshape(n, d_t).copy()
            archive.utterances[utt_id] = UtteranceText(utt_id, ids, target)
    return archive
