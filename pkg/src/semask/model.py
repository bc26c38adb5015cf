"""Masking speech-enhancement network.

Left branch of the architecture: CNN encoder with positional encoding,
a stack of sequence-encoder blocks (Conformer, Transformer or BLSTM),
a residual module producing speech embeddings, and a sigmoid mask head.
Inference consumes audio only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (Tensor, concat, conv2d_same, depthwise_conv1d_same,
                       dropout, layer_norm)
from .errors import CheckpointError, ShapeError
from .signal import Spectrogram

CHECKPOINT_MAGIC = b"CMKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    se_block_kind: str = "conformer"        # conformer | transformer | blstm
    n_blocks: int = 4                       # 5 for blstm per reference setup
    d_a: int = 256
    n_freq: int = 201
    attn_heads: int = 4
    ffn_dim: int = 2048
    conv_kernel: int = 15
    cnn_channels: tuple = (16, 16)
    cnn_kernel: int = 3
    cnn_stride: int = 1
    d_t: int = 768
    dropout: float = 0.1
    blstm_hidden: int = 256

    def __post_init__(self):
        if self.se_block_kind not in ("conformer", "transformer", "blstm"):
            raise ShapeError(f"unknown SE block kind {self.se_block_kind!r}")
        if self.d_a % self.attn_heads != 0:
            raise ShapeError("d_a must be divisible by attn_heads")
        if self.conv_kernel % 2 == 0 or self.cnn_kernel % 2 == 0:
            raise ShapeError("convolution kernels must be odd")
        if self.n_blocks < 1:
            raise ShapeError("need at least one block")
        if self.cnn_stride != 1:
            raise ShapeError("only stride 1 is supported")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["cnn_channels"] = tuple(d["cnn_channels"])
        return cls(**d)


class ParamStore:
    """Flat registry of named trainable tensors with deterministic order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ShapeError(f"duplicate parameter {name!r}")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())


class _Init:
    """Uniform fan-in initializer with a private RNG stream."""

    def __init__(self, store: ParamStore, seed: int, dtype):
        self.store = store
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def linear(self, name: str, n_in: int, n_out: int):
        bound = 1.0 / np.sqrt(n_in)
        self.store.add(name + ".w", self.rng.uniform(-bound, bound, (n_in, n_out)).astype(self.dtype))
        self.store.add(name + ".b", np.zeros(n_out, dtype=self.dtype))

    def conv2d(self, name: str, c_out: int, c_in: int, k: int):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.store.add(name + ".w", self.rng.uniform(-bound, bound, (c_out, c_in, k, k)).astype(self.dtype))
        self.store.add(name + ".b", np.zeros(c_out, dtype=self.dtype))

    def dwconv(self, name: str, k: int, ch: int):
        bound = 1.0 / np.sqrt(k)
        self.store.add(name + ".w", self.rng.uniform(-bound, bound, (k, ch)).astype(self.dtype))
        self.store.add(name + ".b", np.zeros(ch, dtype=self.dtype))

    def norm(self, name: str, dim: int):
        self.store.add(name + ".g", np.ones(dim, dtype=self.dtype))
        self.store.add(name + ".b", np.zeros(dim, dtype=self.dtype))

    def attention(self, prefix: str, d_model: int):
        for part in ("wq", "wk", "wv", "wo"):
            self.linear(prefix + part, d_model, d_model)


def _init_ffn(ini: _Init, prefix: str, d: int, ffn_dim: int):
    ini.norm(prefix + "ln", d)
    ini.linear(prefix + "lin1", d, ffn_dim)
    ini.linear(prefix + "lin2", ffn_dim, d)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fresh parameter store for the SE network; bitwise deterministic per seed."""
    store = ParamStore()
    ini = _Init(store, seed, dtype)
    c0, c1 = cfg.cnn_channels
    ini.conv2d("cnn.conv0", c0, 1, cfg.cnn_kernel)
    ini.conv2d("cnn.conv1", c1, c0, cfg.cnn_kernel)
    ini.linear("cnn.proj", c1 * cfg.n_freq, cfg.d_a)
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        if cfg.se_block_kind == "conformer":
            _init_ffn(ini, pre + "ffn1.", cfg.d_a, cfg.ffn_dim)
            ini.norm(pre + "mhsa.ln", cfg.d_a)
            ini.attention(pre + "mhsa.", cfg.d_a)
            ini.norm(pre + "conv.ln", cfg.d_a)
            ini.linear(pre + "conv.pw1", cfg.d_a, 2 * cfg.d_a)
            ini.dwconv(pre + "conv.dw", cfg.conv_kernel, cfg.d_a)
            ini.norm(pre + "conv.nln", cfg.d_a)
            ini.linear(pre + "conv.pw2", cfg.d_a, cfg.d_a)
            _init_ffn(ini, pre + "ffn2.", cfg.d_a, cfg.ffn_dim)
            ini.norm(pre + "out_ln", cfg.d_a)
        elif cfg.se_block_kind == "transformer":
            ini.attention(pre + "mhsa.", cfg.d_a)
            ini.norm(pre + "ln1", cfg.d_a)
            ini.linear(pre + "ffn.lin1", cfg.d_a, cfg.ffn_dim)
            ini.linear(pre + "ffn.lin2", cfg.ffn_dim, cfg.d_a)
            ini.norm(pre + "ln2", cfg.d_a)
        else:  # blstm
            h = cfg.blstm_hidden
            for direction in ("fwd", "bwd"):
                ini.linear(pre + direction + ".wx", cfg.d_a, 4 * h)
                ini.linear(pre + direction + ".wh", h, 4 * h)
            ini.linear(pre + "proj", 2 * h, cfg.d_a)
    ini.linear("res.fc1", cfg.d_a, cfg.d_t)
    ini.norm("res.ln1", cfg.d_t)
    ini.linear("res.fc2", cfg.d_t, cfg.d_a)
    ini.norm("res.ln2", cfg.d_a)
    ini.linear("mask.fc", cfg.d_a, cfg.n_freq)
    return store


def sinusoidal_encoding(n_pos: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n_pos)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def _linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return x @ store[name + ".w"] + store[name + ".b"]


def _ln(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return layer_norm(x, store[name + ".g"], store[name + ".b"])


def multi_head_attention(q_in: Tensor, kv_in: Tensor, store: ParamStore, prefix: str,
                         heads: int, rng=None, drop=0.0):
    """Projected scaled-dot attention; returns (output, weights [h, Tq, Tk])."""
    d_model = q_in.shape[-1]
    d_head = d_model // heads
    tq, tk = q_in.shape[0], kv_in.shape[0]
    q = _linear(q_in, store, prefix + "wq").reshape(tq, heads, d_head).transpose(1, 0, 2)
    k = _linear(kv_in, store, prefix + "wk").reshape(tk, heads, d_head).transpose(1, 0, 2)
    v = _linear(kv_in, store, prefix + "wv").reshape(tk, heads, d_head).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d_head))
    weights = scores.softmax(axis=-1)
    ctx = (dropout(weights, drop, rng) @ v).transpose(1, 0, 2).reshape(tq, d_model)
    return _linear(ctx, store, prefix + "wo"), weights


def _ffn_module(x: Tensor, store: ParamStore, prefix: str, rng, drop: float) -> Tensor:
    y = _ln(x, store, prefix + "ln")
    y = _linear(y, store, prefix + "lin1").swish()
    y = dropout(y, drop, rng)
    y = _linear(y, store, prefix + "lin2")
    return dropout(y, drop, rng)


def _conv_module(x: Tensor, store: ParamStore, prefix: str, rng, drop: float) -> Tensor:
    d = x.shape[-1]
    y = _ln(x, store, prefix + "ln")
    y = _linear(y, store, prefix + "pw1")
    y = y[:, :d] * y[:, d:].sigmoid()                       # GLU
    y = depthwise_conv1d_same(y, store[prefix + "dw.w"], store[prefix + "dw.b"])
    y = _ln(y, store, prefix + "nln").swish()
    y = _linear(y, store, prefix + "pw2")
    return dropout(y, drop, rng)


def _conformer_block(a: Tensor, store: ParamStore, pre: str, cfg: ModelConfig, rng, collect):
    drop = cfg.dropout
    a = a + 0.5 * _ffn_module(a, store, pre + "ffn1.", rng, drop)
    att_in = _ln(a, store, pre + "mhsa.ln")
    att, w = multi_head_attention(att_in, att_in, store, pre + "mhsa.",
                                  cfg.attn_heads, rng, drop)
    if collect is not None:
        collect.append(w.data.copy())
    a = a + dropout(att, drop, rng)
    a = a + _conv_module(a, store, pre + "conv.", rng, drop)
    a = a + 0.5 * _ffn_module(a, store, pre + "ffn2.", rng, drop)
    return _ln(a, store, pre + "out_ln")


def _transformer_block(a: Tensor, store: ParamStore, pre: str, cfg: ModelConfig, rng, collect):
    drop = cfg.dropout
    att, w = multi_head_attention(a, a, store, pre + "mhsa.", cfg.attn_heads, rng, drop)
    if collect is not None:
        collect.append(w.data.copy())
    a = _ln(a + dropout(att, drop, rng), store, pre + "ln1")
    f = _linear(_linear(a, store, pre + "ffn.lin1").relu(), store, pre + "ffn.lin2")
    return _ln(a + dropout(f, drop, rng), store, pre + "ln2")


def _lstm_direction(x: Tensor, store: ParamStore, prefix: str, hidden: int, reverse: bool):
    t_len = x.shape[0]
    pre_all = _linear(x, store, prefix + ".wx")
    wh, bh = store[prefix + ".wh.w"], store[prefix + ".wh.b"]
    h = Tensor(np.zeros((1, hidden), dtype=x.dtype))
    c = Tensor(np.zeros((1, hidden), dtype=x.dtype))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    outs = [None] * t_len
    for t in order:
        pre = pre_all[t:t + 1] + h @ wh + bh
        i = pre[:, :hidden].sigmoid()
        f = pre[:, hidden:2 * hidden].sigmoid()
        g = pre[:, 2 * hidden:3 * hidden].tanh()
        o = pre[:, 3 * hidden:].sigmoid()
        c = f * c + i * g
        h = o * c.tanh()
        outs[t] = h
    return concat(outs, axis=0)


def _blstm_block(a: Tensor, store: ParamStore, pre: str, cfg: ModelConfig, rng, collect):
    fwd = _lstm_direction(a, store, pre + "fwd", cfg.blstm_hidden, reverse=False)
    bwd = _lstm_direction(a, store, pre + "bwd", cfg.blstm_hidden, reverse=True)
    return _linear(concat([fwd, bwd], axis=1), store, pre + "proj")


_BLOCKS = {"conformer": _conformer_block, "transformer": _transformer_block,
           "blstm": _blstm_block}


def cnn_encode(x_log: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Two ReLU conv layers over (time, freq), flatten, project, add PE."""
    t_len, f_len = x_log.shape
    if f_len != cfg.n_freq:
        raise ShapeError(f"expected {cfg.n_freq} bins, got {f_len}")
    y = x_log.reshape(1, t_len, f_len)
    y = conv2d_same(y, store["cnn.conv0.w"], store["cnn.conv0.b"]).relu()
    y = conv2d_same(y, store["cnn.conv1.w"], store["cnn.conv1.b"]).relu()
    y = y.transpose(1, 0, 2).reshape(t_len, cfg.cnn_channels[1] * f_len)
    h = _linear(y, store, "cnn.proj")
    pe = sinusoidal_encoding(t_len, cfg.d_a, dtype=h.dtype)
    return h + Tensor(pe)


def se_block_forward(a: Tensor, store: ParamStore, cfg: ModelConfig,
                     rng=None, collect=None) -> Tensor:
    block = _BLOCKS[cfg.se_block_kind]
    for i in range(cfg.n_blocks):
        a = block(a, store, f"block{i}.", cfg, rng, collect)
    return a


def residual_module(a4: Tensor, store: ParamStore) -> tuple[Tensor, Tensor]:
    e_a = _linear(a4, store, "res.fc1")
    a_r = a4 + _ln(_linear(_ln(e_a, store, "res.ln1"), store, "res.fc2"), store, "res.ln2")
    return e_a, a_r


def regression_mask(a_r: Tensor, store: ParamStore) -> Tensor:
    return _linear(a_r, store, "mask.fc").sigmoid()


@dataclass
class ForwardResult:
    enhanced: Spectrogram          # numpy view for I/O and metrics
    enhanced_log: Tensor           # differentiable enhanced log-amplitude
    e_a: Tensor                    # speech embeddings [T_a, d_t]
    mask: Tensor                   # [T_a, F] in (0, 1)
    self_attention: list = field(default_factory=list)


def enhance_forward(spec: Spectrogram, store: ParamStore, cfg: ModelConfig,
                    rng=None, mask_domain: str = "magnitude",
                    collect_attention: bool = False) -> ForwardResult:
    """Full enhancement pass; audio in, audio features out, no text anywhere."""
    dtype = store["mask.fc.w"].dtype
    x = Tensor(spec.log_amp.astype(dtype))
    collect = [] if collect_attention else None
    a_in = cnn_encode(x, store, cfg)
    a4 = se_block_forward(a_in, store, cfg, rng, collect)
    e_a, a_r = residual_module(a4, store)
    mask = regression_mask(a_r, store)
    floor = spec.config.log_floor
    if mask_domain == "magnitude":
        enh_log = (mask * x.exp()).clamp_min(floor).log()
    elif mask_domain == "log":
        enh_log = mask * x
    else:
        raise ShapeError(f"unknown mask domain {mask_domain!r}")
    enhanced = Spectrogram(log_amp=enh_log.data.astype(np.float64),
                           phase=spec.phase.copy(), config=spec.config)
    return ForwardResult(enhanced=enhanced, enhanced_log=enh_log, e_a=e_a,
                         mask=mask, self_attention=collect or [])


# -- checkpoint codec ---------------------------------------------------------

def save_checkpoint(path, store: ParamStore) -> None:
    with open(str(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(store)))
        for name, t in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> ParamStore:
    store = ParamStore()
    with open(str(path), "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims).copy()
            store.add(name, values)
    return store
