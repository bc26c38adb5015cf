"""Peek at where the text queries look inside the audio.

Trains very briefly, then dumps the cross-attention weights for one
utterance as CSV (one row per text token, one column per audio frame) and a
PGM image you can open in any viewer.
"""

from pathlib import Path

from semask.evaluation import export_attention
from semask.model import ModelConfig, enhance_forward, load_checkpoint
from semask.signal import StftConfig, stft
from semask.synth import gen_synth
from semask.textalign import (AlignMode, CmtConfig, TokenSequence,
                              build_text_queries, cmt_forward, read_archive)
from semask.training import TrainConfig, load_manifest, resolve_noisy, train

work = Path("demo_attention")
paths = gen_synth(work / "data", n_utts=10, seed=1, d_t=32, vocab_size=32)
archive = read_archive(paths["archive"])

model_cfg = ModelConfig(n_blocks=1, d_a=32, attn_heads=4, ffn_dim=64,
                        cnn_channels=(4, 4), d_t=32, dropout=0.0)
train_cfg = TrainConfig(alpha=0.7, lr_peak=1e-3, warmup_steps=50, epochs=20,
                        avg_last_k=1, batch_size=4, seed=1,
                        align_mode=AlignMode.ALIGNED, max_steps=60)
cmt_cfg = CmtConfig(layers=2, d_model=32, heads=4, ffn_dim=64)
result = train(str(paths["manifest"]), archive, model_cfg, train_cfg,
               work / "run", cmt_cfg=cmt_cfg)
params = load_checkpoint(result.checkpoints[-1])

record = load_manifest(paths["manifest"])[0]
_, noisy, _ = resolve_noisy(record, seed=1)
fwd = enhance_forward(stft(noisy, StftConfig()), params, model_cfg, rng=None)

utt = archive.utterances[record["id"]]
tokens = TokenSequence(utt.ids, archive.bos_id, archive.eos_id)
queries = build_text_queries(tokens, archive.embedding_table())
_, weights = cmt_forward(queries, fwd.e_a, params, cmt_cfg)

print(f"attention tensor: {weights.shape}  (layers, heads, tokens, frames)")
for layer in range(cmt_cfg.layers):
    for path in export_attention(weights, layer, work / f"layer{layer}"):
        print("wrote", path)
