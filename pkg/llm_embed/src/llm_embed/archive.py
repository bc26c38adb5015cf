"""CMKE archive writer.

Byte layout (all little-endian):
  magic "CMKE"; u32 version (=1); u32 d_t; u32 vocab_size; u32 bos_id;
  u32 eos_id; i32 target_layer; u32 flags (bit0: embedding table present,
  bit1: hidden states were projected down to d_t); then, if bit0 is set,
  vocab_size*d_t f32 table values; u32 utterance count; per utterance:
  u32 id byte length, utf-8 id, u32 N, N u32 token ids, u8 has_target,
  and N*d_t f32 values when has_target is 1.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError

MAGIC = b"CMKE"
VERSION = 1

FLAG_TABLE = 1
FLAG_PROJECTED = 2


@dataclass
class UtteranceRecord:
    utt_id: str
    ids: np.ndarray            # [N] token ids, specials already stripped
    target: np.ndarray | None  # [N, d_t] f32, or None when has_target=0


@dataclass
class ArchivePayload:
    d_t: int
    bos_id: int
    eos_id: int
    target_layer: int
    projected: bool = False
    table: np.ndarray | None = None
    utterances: list[UtteranceRecord] = field(default_factory=list)


def write_cmke(path, payload: ArchivePayload) -> Path:
    """Serialize the payload, atomically (temp file + rename)."""
    path = Path(path)
    flags = (FLAG_TABLE if payload.table is not None else 0) \
        | (FLAG_PROJECTED if payload.projected else 0)
    vocab = 0 if payload.table is None else payload.table.shape[0]
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".cmke.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIIIIiI", VERSION, payload.d_t, vocab,
                                 payload.bos_id, payload.eos_id,
                                 payload.target_layer, flags))
            if payload.table is not None:
                fh.write(np.ascontiguousarray(payload.table, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", len(payload.utterances)))
            for utt in payload.utterances:
                raw = utt.utt_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                ids = np.asarray(utt.ids, dtype="<u4")
                fh.write(struct.pack("<I", len(ids)))
                fh.write(ids.tobytes())
                fh.write(struct.pack("<B", 0 if utt.target is None else 1))
                if utt.target is not None:
                    if utt.target.shape != (len(ids), payload.d_t):
                        raise AlignmentError(
                            f"{utt.utt_id}: {utt.target.shape} rows for {len(ids)} ids")
                    fh.write(np.ascontiguousarray(utt.target, dtype="<f4").tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path
