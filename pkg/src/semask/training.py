"""Loss assembly, optimizer, and the epoch loop.

Total loss is alpha * MAE(enhanced, clean) plus (1 - alpha) times the
cosine alignment loss when a transcript is available; utterances without
text fall back to the alpha-scaled MAE term alone.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import textalign
from .autodiff import Tensor
from .errors import (CheckpointError, ConfigError, IngestError, NumericsError,
                     ShapeError)
from .model import (ModelConfig, ParamStore, enhance_forward, init_params,
                    load_checkpoint, save_checkpoint)
from .signal import StftConfig, Waveform, mix_at_snr, read_wav, stft
from .textalign import (AlignMode, CmtConfig, EmbeddingArchive, TokenSequence,
                        build_text_queries, cma_loss, cmt_forward,
                        init_cmt_params, shift_pairs)

SNR_RANGE_DB = (-15.0, 15.0)


@dataclass
class TrainConfig:
    alpha: float = 0.7
    lr_peak: float = 0.001
    warmup_steps: int = 20000
    epochs: int = 130
    avg_last_k: int = 10
    align_mode: AlignMode = AlignMode.ALIGNED
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0
    max_steps: int | None = None
    use_align: bool = True
    mask_domain: str = "magnitude"
    scale_textfree_loss: bool = True    # keep the alpha factor without text
    train_text_table: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.warmup_steps < 1 or self.avg_last_k < 1:
            raise ConfigError("warmup_steps and avg_last_k must be >= 1")
        if isinstance(self.align_mode, str):
            self.align_mode = AlignMode(self.align_mode)

    def to_json(self) -> str:
        d = self.__dict__.copy()
        d["align_mode"] = self.align_mode.value
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def mae_loss(enhanced_log: Tensor, clean_log: np.ndarray,
             frame_mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over valid time-frequency bins."""
    if enhanced_log.shape != clean_log.shape:
        raise ShapeError(f"{enhanced_log.shape} vs {clean_log.shape}")
    diff = (enhanced_log - Tensor(clean_log.astype(enhanced_log.dtype))).abs()
    if frame_mask is None:
        return diff.mean()
    frame_mask = np.asarray(frame_mask, dtype=bool)
    weights = frame_mask.astype(enhanced_log.dtype)[:, None]
    n_valid = int(frame_mask.sum()) * clean_log.shape[1]
    return (diff * Tensor(weights)).sum() * (1.0 / n_valid)


def total_loss(l_mae: Tensor, l_cma: Tensor | None, alpha: float,
               scale_textfree: bool = True) -> Tensor:
    if l_cma is not None:
        return alpha * l_mae + (1.0 - alpha) * l_cma
    return alpha * l_mae if scale_textfree else l_mae


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then inverse-square-root decay."""
    if step < 1:
        raise ConfigError("step counts from 1")
    return cfg.lr_peak * min(step / cfg.warmup_steps,
                             np.sqrt(cfg.warmup_steps / step))


def adam_step(store: ParamStore, opt: OptimizerState, lr: float,
              grad_clip: float = 0.0) -> None:
    """Bias-corrected Adam over every parameter; missing grads count as zero."""
    grads = {}
    sq_sum = 0.0
    for name, t in store.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}; step aborted")
        grads[name] = g
        sq_sum += float(np.sum(g.astype(np.float64) ** 2))
    gnorm = np.sqrt(sq_sum)
    if grad_clip > 0.0 and gnorm > grad_clip:
        scale = grad_clip / gnorm
        for g in grads.values():
            g *= scale
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name, t in store.items():
        g = grads[name]
        m = opt.m.setdefault(name, np.zeros_like(t.data))
        v = opt.v.setdefault(name, np.zeros_like(t.data))
        m += (1.0 - opt.beta1) * (g - m)
        v += (1.0 - opt.beta2) * (g * g - v)
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)).astype(t.data.dtype)
    store.step = opt.step


def average_checkpoints(paths) -> ParamStore:
    """Arithmetic mean per tensor over the given checkpoint files."""
    paths = list(paths)
    if not paths:
        raise CheckpointError("no checkpoints to average")
    stores = [load_checkpoint(p) for p in paths]
    names = stores[0].names()
    for s in stores[1:]:
        if s.names() != names:
            raise CheckpointError("checkpoint tensor names differ")
    out = ParamStore()
    for name in names:
        shapes = {s[name].data.shape for s in stores}
        if len(shapes) != 1:
            raise CheckpointError(f"shape mismatch for {name}")
        acc = np.mean([s[name].data.astype(np.float64) for s in stores], axis=0)
        out.add(name, acc.astype(np.float32))
    return out


# -- data plumbing ------------------------------------------------------------

def load_manifest(path) -> list[dict]:
    """Read a JSONL manifest; relative audio paths resolve against it."""
    base = Path(path).parent
    records = []
    with open(str(path), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for key in ("clean", "noise", "noisy"):
                if key in rec and not Path(rec[key]).is_absolute():
                    rec[key] = str(base / rec[key])
            records.append(rec)
    return records


def _utt_rng(seed: int, utt_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(utt_id.encode("utf-8"))])


def resolve_noisy(record: dict, seed: int) -> tuple[Waveform, Waveform, float]:
    """Load (clean, noisy, snr_db) for one manifest record, deterministically.

    Records carry either a premixed "noisy" path or a "noise" path with an
    "snr_db" that may be the string "random" (resolved per utterance from
    the seed, uniform over the training SNR range).
    """
    utt_id = record["id"]
    try:
        clean = read_wav(record["clean"])
        if "noisy" in record:
            return clean, read_wav(record["noisy"]), float(record.get("snr_db", 0.0))
        noise = read_wav(record["noise"])
    except (OSError, KeyError) as exc:
        raise IngestError(f"utterance {utt_id!r}: {exc}") from exc
    rng = _utt_rng(seed, utt_id)
    snr = record.get("snr_db", "random")
    if snr == "random":
        snr = float(rng.uniform(*SNR_RANGE_DB))
    noisy = mix_at_snr(clean, noise, float(snr), rng)
    return clean, noisy, float(snr)


@dataclass
class TrainResult:
    checkpoints: list
    metrics_path: Path
    params: ParamStore
    final_average: ParamStore | None = None


def _text_branch(record: dict, archive: EmbeddingArchive, params: ParamStore,
                 cmt_cfg: CmtConfig, e_a: Tensor, mode: AlignMode, rng,
                 table) -> Tensor | None:
    utt = archive.utterances.get(record["id"])
    if utt is None or not utt.has_target or len(utt.ids) == 0:
        return None
    ids, target = utt.ids, utt.target
    if len(ids) > textalign.MAX_TOKENS:
        ids = ids[:textalign.MAX_TOKENS]
        target = target[:textalign.MAX_TOKENS]
    tokens = TokenSequence(ids, archive.bos_id, archive.eos_id)
    e_t = build_text_queries(tokens, table, params)
    z, _ = cmt_forward(e_t, e_a, params, cmt_cfg, rng)
    z_sel, z_hat = shift_pairs(z, target, mode)
    return cma_loss(z_sel, z_hat)


def train(manifest, archive: EmbeddingArchive | None, model_cfg: ModelConfig,
          train_cfg: TrainConfig, out_dir, cmt_cfg: CmtConfig | None = None,
          stft_cfg: StftConfig | None = None) -> TrainResult:
    """Run the optimization loop; writes per-epoch checkpoints and a CSV log."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stft_cfg = stft_cfg or StftConfig()
    align_active = (train_cfg.use_align and train_cfg.alpha < 1.0
                    and archive is not None)
    params = init_params(model_cfg, train_cfg.seed)
    table = None
    if align_active:
        cmt_cfg = cmt_cfg or CmtConfig(d_model=model_cfg.d_t)
        init_cmt_params(params, cmt_cfg, train_cfg.seed + 1)
        table = archive.embedding_table(trainable=train_cfg.train_text_table)
        if table.trainable:
            params.add("text.emb", table.values.astype(np.float32).copy())
    (out_dir / "model_config.json").write_text(model_cfg.to_json())
    (out_dir / "train_config.json").write_text(train_cfg.to_json())

    opt = OptimizerState()
    shuffle_rng = np.random.default_rng(train_cfg.seed + 17)
    drop_rng = np.random.default_rng(train_cfg.seed + 29)
    metrics_path = out_dir / "metrics.csv"
    checkpoints = []
    step = 0
    done = False
    with open(metrics_path, "w", newline="") as mfh:
        writer = csv.writer(mfh, lineterminator="\n")
        writer.writerow(["step", "lr", "l_mae", "l_cma", "total"])
        for epoch in range(train_cfg.epochs):
            order = shuffle_rng.permutation(len(manifest))
            for start in range(0, len(order), train_cfg.batch_size):
                batch = [manifest[i] for i in order[start:start + train_cfg.batch_size]]
                params.zero_grad()
                mae_vals, cma_vals, tot_vals = [], [], []
                for record in batch:
                    clean, noisy, _ = resolve_noisy(record, train_cfg.seed)
                    noisy_spec = stft(noisy, stft_cfg)
                    clean_spec = stft(clean, stft_cfg)
                    fwd = enhance_forward(noisy_spec, params, model_cfg,
                                          rng=drop_rng,
                                          mask_domain=train_cfg.mask_domain)
                    l_mae = mae_loss(fwd.enhanced_log, clean_spec.log_amp)
                    l_cma = None
                    if align_active:
                        l_cma = _text_branch(record, archive, params, cmt_cfg,
                                             fwd.e_a, train_cfg.align_mode,
                                             drop_rng, table)
                    loss = total_loss(l_mae, l_cma, train_cfg.alpha,
                                      train_cfg.scale_textfree_loss)
                    (loss * (1.0 / len(batch))).backward()
                    mae_vals.append(float(l_mae.data))
                    cma_vals.append(float(l_cma.data) if l_cma is not None else 0.0)
                    tot_vals.append(float(loss.data))
                step += 1
                lr = lr_at(step, train_cfg)
                adam_step(params, opt, lr, train_cfg.grad_clip)
                writer.writerow([step, f"{lr:.8g}",
                                 f"{np.mean(mae_vals):.8g}",
                                 f"{np.mean(cma_vals):.8g}",
                                 f"{np.mean(tot_vals):.8g}"])
                if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                    done = True
                    break
            ckpt = out_dir / f"epoch_{epoch:04d}.ckpt"
            save_checkpoint(ckpt, params)
            checkpoints.append(ckpt)
            if done:
                break
    final = None
    if len(checkpoints) >= 1:
        last = checkpoints[-train_cfg.avg_last_k:]
        final = average_checkpoints(last)
        save_checkpoint(out_dir / "final_averaged.ckpt", final)
    return TrainResult(checkpoints=checkpoints, metrics_path=metrics_path,
                       params=params, final_average=final)


# -- finite-difference verification -------------------------------------------

def _tiny_setup(loss_kind: str, seed: int):
    rng = np.random.default_rng(seed)
    model_cfg = ModelConfig(se_block_kind="conformer", n_blocks=1, d_a=16,
                            n_freq=9, attn_heads=2, ffn_dim=8, conv_kernel=3,
                            cnn_channels=(2, 2), d_t=12, dropout=0.0)
    cmt_cfg = CmtConfig(layers=1, d_model=12, heads=2, ffn_dim=8, dropout=0.0)
    t_a, n_tok = 8, 3
    stft_cfg = StftConfig(win_len=16, hop=4, n_fft=16)
    from .signal import Spectrogram
    spec = Spectrogram(log_amp=rng.normal(0.0, 1.0, (t_a, 9)),
                       phase=rng.uniform(-np.pi, np.pi, (t_a, 9)),
                       config=stft_cfg)
    clean_log = rng.normal(0.0, 1.0, (t_a, 9))
    z_hat = rng.normal(0.0, 1.0, (n_tok, 12))
    table = textalign.EmbeddingTable(rng.normal(0.0, 1.0, (8, 12)))
    tokens = TokenSequence(rng.integers(2, 8, n_tok), bos_id=0, eos_id=1)

    params = init_params(model_cfg, seed + 1, dtype=np.float64)
    if loss_kind in ("cma", "combined"):
        init_cmt_params(params, cmt_cfg, seed + 2, dtype=np.float64)

    def loss_fn(store: ParamStore) -> Tensor:
        fwd = enhance_forward(spec, store, model_cfg, rng=None)
        l_mae = mae_loss(fwd.enhanced_log, clean_log)
        if loss_kind == "se":
            return l_mae
        e_t = build_text_queries(tokens, table)
        z, _ = cmt_forward(e_t, fwd.e_a, store, cmt_cfg)
        z_sel, zh = shift_pairs(z, z_hat, AlignMode.ALIGNED)
        l_cma = cma_loss(z_sel, zh)
        if loss_kind == "cma":
            return l_cma
        return total_loss(l_mae, l_cma, alpha=0.7)

    return params, loss_fn


def grad_check(loss_kind: str = "se", seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error of reverse-mode grads vs central differences.

    Runs in double precision on a tiny configuration; loss_kind selects
    "se", "cma", or "combined".
    """
    if loss_kind not in ("se", "cma", "combined"):
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    params, loss_fn = _tiny_setup(loss_kind, seed)
    params.zero_grad()
    loss_fn(params).backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn(params).data)
            flat[i] = keep - h
            dn = float(loss_fn(params).data)
            flat[i] = keep
            fd = (up - dn) / (2.0 * h)
            denom = max(abs(fd), abs(a_flat[i]), 1e-6)
            worst = max(worst, abs(fd - a_flat[i]) / denom)
    return worst
