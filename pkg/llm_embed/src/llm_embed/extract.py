"""Turn manifest transcripts into a CMKE embedding archive.

One forward pass per utterance through a frozen pretrained language model;
hidden states of a chosen layer become the per-token target rows. Models
whose hidden width differs from the 768-wide archive convention are mapped
down with a fixed seeded orthonormal projection, recorded in the header
flags so readers know the rows are not raw model activations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import ArchivePayload, UtteranceRecord, write_cmke
from .errors import AlignmentError, ModelError

D_T = 768
PROJECTION_SEED = 768_001  # fixed so every extraction of a model agrees


@dataclass
class ExtractJob:
    manifest: str | Path
    model: str | Path            # local path or hub name of the language model
    out: str | Path
    target_layer: int = -1       # -1 = final hidden layer
    include_table: bool = False
    asr_model: str | Path | None = None


def load_manifest(path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def _load_lm(name):
    import torch
    from transformers import AutoModel, AutoTokenizer
    try:
        tokenizer = AutoTokenizer.from_pretrained(str(name))
        model = AutoModel.from_pretrained(str(name))
    except Exception as exc:
        raise ModelError(f"cannot load language model {name!r}: {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _projection(hidden: int) -> np.ndarray:
    """Orthonormal [hidden, 768] map, deterministic across runs."""
    if hidden < D_T:
        raise ModelError(f"hidden width {hidden} is narrower than {D_T}")
    rng = np.random.default_rng(PROJECTION_SEED)
    gauss = rng.standard_normal((hidden, D_T))
    q, _ = np.linalg.qr(gauss)
    return q.astype(np.float32)


def _special_ids(tokenizer) -> tuple[int, int]:
    bos = tokenizer.cls_token_id
    if bos is None:
        bos = tokenizer.bos_token_id
    eos = tokenizer.sep_token_id
    if eos is None:
        eos = tokenizer.eos_token_id
    if bos is None or eos is None:
        raise ModelError("tokenizer exposes no sentence boundary tokens")
    return int(bos), int(eos)


def extract(job: ExtractJob) -> Path:
    """Write the archive for every manifest record; returns its path."""
    records = load_manifest(job.manifest)
    if any("transcript" not in r for r in records):
        if job.asr_model is None:
            raise ModelError("manifest lacks transcripts and no ASR model was given")
        records = transcribe(records, job.asr_model,
                             base_dir=Path(job.manifest).parent)

    tokenizer, model = _load_lm(job.model)
    depth = int(model.config.num_hidden_layers)
    if not -1 <= job.target_layer <= depth:
        raise ModelError(f"target_layer {job.target_layer} outside depth {depth}")
    hidden = int(model.config.hidden_size)
    proj = None if hidden == D_T else _projection(hidden)
    bos, eos = _special_ids(tokenizer)

    payload = ArchivePayload(d_t=D_T, bos_id=bos, eos_id=eos,
                             target_layer=job.target_layer,
                             projected=proj is not None)
    if job.include_table:
        table = model.get_input_embeddings().weight.detach().numpy()
        if proj is not None:
            table = table @ proj
        payload.table = table.astype(np.float32)

    for rec in records:
        utt_id = rec["id"]
        text = rec.get("transcript", "").strip()
        if not text:
            payload.utterances.append(
                UtteranceRecord(utt_id, np.zeros(0, dtype=np.int64), None))
            continue
        enc = tokenizer(text, return_tensors="pt")
        ids = enc["input_ids"][0].tolist()
        special = np.asarray(tokenizer.get_special_tokens_mask(
            ids, already_has_special_tokens=True), dtype=bool)
        out = model(**enc, output_hidden_states=True)
        states = out.hidden_states[job.target_layer][0].numpy()
        try:
            if len(states) != len(ids):
                raise AlignmentError(
                    f"{utt_id}: {len(states)} rows for {len(ids)} tokens")
            kept_ids = np.asarray(ids)[~special]
            kept = states[~special]
        except AlignmentError as exc:
            warnings.warn(str(exc))
            continue
        if proj is not None:
            kept = kept @ proj
        payload.utterances.append(
            UtteranceRecord(utt_id, kept_ids, kept.astype(np.float32)))

    return write_cmke(job.out, payload)


def _read_audio(path) -> tuple[np.ndarray, int]:
    from scipy.io import wavfile
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    return data.astype(np.float32), int(rate)


def transcribe(manifest, asr_model, base_dir: Path | None = None) -> list[dict]:
    """Fill missing transcript fields via greedy ASR decoding.

    Silent audio, and audio the recognizer decodes to nothing, get an empty
    transcript — downstream those become has_target=0 records.
    """
    records = manifest if isinstance(manifest, list) else load_manifest(manifest)
    if base_dir is None and not isinstance(manifest, list):
        base_dir = Path(manifest).parent
    asr = None

    def recognizer():
        nonlocal asr
        if asr is None:
            try:
                from transformers import pipeline
                asr = pipeline("automatic-speech-recognition", model=str(asr_model))
            except Exception as exc:
                raise ModelError(f"cannot load ASR model {asr_model!r}: {exc}") from exc
        return asr

    out = []
    for rec in records:
        rec = dict(rec)
        if "transcript" not in rec:
            audio_path = Path(rec["clean"])
            if base_dir is not None and not audio_path.is_absolute():
                audio_path = base_dir / audio_path
            samples, rate = _read_audio(audio_path)
            if not np.any(samples):
                rec["transcript"] = ""
            else:
                result = recognizer()({"array": samples, "sampling_rate": rate})
                rec["transcript"] = result["text"].strip()
        out.append(rec)
    return out
