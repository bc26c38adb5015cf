"""Operator entry points.

Subcommands: gen-synth, prepare-data, train, enhance, evaluate,
export-attention. Flag > config file > built-in default; the resolved
configuration is echoed to stdout before work starts. Errors go to stderr
with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import IngestError, SemaskError
from .evaluation import (KNOWN_METRICS, enhance_waveform, evaluate,
                         export_attention)
from .model import ModelConfig, enhance_forward, load_checkpoint
from .signal import StftConfig, read_wav, stft, write_wav
from .synth import gen_synth
from .textalign import (CmtConfig, TokenSequence, build_text_queries,
                        cmt_forward, read_archive)
from .training import TrainConfig, load_manifest, resolve_noisy, train

ARCH_BLOCKS = {"conformer": 4, "transformer": 4, "blstm": 5}


def _echo(args: argparse.Namespace):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps(resolved, default=str, sort_keys=True))


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """Config file values fill in anything the command line left at default."""
    if not getattr(args, "config", None):
        return
    overrides = json.loads(Path(args.config).read_text())
    defaults = {}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub = action.choices[args.command]
            defaults.update({a.dest: a.default for a in sub._actions})
    for key, value in overrides.items():
        key = key.replace("-", "_")
        if not hasattr(args, key):
            raise SemaskError(f"unknown config key {key!r}")
        if getattr(args, key) == defaults.get(key):
            setattr(args, key, value)


def _model_config(args, d_t: int) -> ModelConfig:
    return ModelConfig(se_block_kind=args.arch,
                       n_blocks=args.n_blocks or ARCH_BLOCKS[args.arch],
                       d_a=args.d_a, d_t=d_t)


def cmd_gen_synth(args):
    result = gen_synth(args.out, args.n_utts, args.seed, d_t=args.d_t,
                       vocab_size=args.vocab)
    print(result["manifest"])
    print(result["archive"])
    return 0


def cmd_prepare_data(args):
    clean_paths = sorted(Path(args.clean_dir).glob("*.wav"))
    noise_paths = sorted(Path(args.noise_dir).glob("*.wav"))
    if not clean_paths or not noise_paths:
        raise IngestError("no wav files found in clean or noise directory")
    transcripts = {}
    if args.transcripts:
        for line in Path(args.transcripts).read_text(encoding="utf-8").splitlines():
            if "\t" in line:
                utt_id, text = line.split("\t", 1)
                transcripts[utt_id] = text
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for i, clean in enumerate(clean_paths):
            rec = {"id": clean.stem,
                   "clean": str(clean.resolve()),
                   "noise": str(noise_paths[i % len(noise_paths)].resolve()),
                   "snr_db": (args.snr if args.snr != "random"
                              else round(float(rng.uniform(-15.0, 15.0)), 4))}
            if clean.stem in transcripts:
                rec["transcript"] = transcripts[clean.stem]
            fh.write(json.dumps(rec) + "\n")
    print(out)
    return 0


def cmd_train(args):
    archive = read_archive(args.archive) if args.archive else None
    d_t = archive.d_t if archive is not None else args.d_t
    model_cfg = _model_config(args, d_t)
    train_cfg = TrainConfig(alpha=args.alpha, lr_peak=args.lr,
                            warmup_steps=args.warmup, epochs=args.epochs,
                            avg_last_k=args.avg_last_k, align_mode=args.align,
                            batch_size=args.batch_size, seed=args.seed,
                            grad_clip=args.grad_clip, max_steps=args.max_steps,
                            use_align=not args.no_align,
                            mask_domain=args.mask_domain)
    cmt_cfg = CmtConfig(layers=args.cmt_layers, d_model=d_t,
                        heads=args.cmt_heads, ffn_dim=args.cmt_ffn)
    result = train(args.manifest, archive, model_cfg, train_cfg, args.out,
                   cmt_cfg=cmt_cfg)
    print(result.metrics_path)
    for ckpt in result.checkpoints:
        print(ckpt)
    return 0


def cmd_enhance(args):
    params = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_json(Path(args.model_config).read_text())
    noisy = read_wav(args.infile)
    enhanced = enhance_waveform(noisy, params, model_cfg,
                                mask_domain=args.mask_domain)
    write_wav(args.out, enhanced)
    print(args.out)
    return 0


def cmd_evaluate(args):
    params = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_json(Path(args.model_config).read_text())
    metrics = tuple(args.metrics.split(","))
    report = evaluate(args.manifest, params, model_cfg, metrics,
                      seed=args.seed, mask_domain=args.mask_domain,
                      against_noisy=args.noisy_baseline,
                      report_path=args.report)
    print(args.report)
    for key, value in sorted(report.overall_means.items()):
        print(f"{key},{value:.6f}")
    return 0


def cmd_export_attention(args):
    params = load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_json(Path(args.model_config).read_text())
    archive = read_archive(args.archive)
    manifest = load_manifest(args.manifest)
    record = next((r for r in manifest if r["id"] == args.utt), None)
    if record is None:
        raise IngestError(f"utterance {args.utt!r} not in manifest")
    utt = archive.utterances.get(args.utt)
    if utt is None or not utt.has_target:
        raise IngestError(f"utterance {args.utt!r} has no text in the archive")
    _, noisy, _ = resolve_noisy(record, args.seed)
    fwd = enhance_forward(stft(noisy, StftConfig()), params, model_cfg, rng=None)
    cmt_cfg = CmtConfig(layers=args.cmt_layers, d_model=archive.d_t,
                        heads=args.cmt_heads, ffn_dim=args.cmt_ffn)
    tokens = TokenSequence(utt.ids, archive.bos_id, archive.eos_id)
    e_t = build_text_queries(tokens, archive.embedding_table())
    _, w_att = cmt_forward(e_t, fwd.e_a, params, cmt_cfg)
    for path in export_attention(w_att, args.layer, args.out_prefix, args.reduce):
        print(path)
    return 0


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (default 0)")


def _add_cmt_flags(p):
    p.add_argument("--cmt-layers", type=int, default=3, help="cross-modal encoder layers (default 3)")
    p.add_argument("--cmt-heads", type=int, default=12, help="cross-modal attention heads (default 12)")
    p.add_argument("--cmt-ffn", type=int, default=2048, help="cross-modal FFN width (default 2048)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semask",
                                     description="Masking speech enhancement with "
                                                 "text-aligned training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a seeded synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-utts", type=int, default=50, help="number of utterances (default 50)")
    p.add_argument("--d-t", type=int, default=768, help="pseudo-embedding width (default 768)")
    p.add_argument("--vocab", type=int, default=64, help="pseudo-vocabulary size (default 64)")
    _add_common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("prepare-data", help="build a manifest from wav directories")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noise-dir", required=True)
    p.add_argument("--out", required=True, help="manifest path (JSONL)")
    p.add_argument("--snr", default="random", help="fixed SNR in dB or 'random' in [-15,15]")
    p.add_argument("--transcripts", default=None, help="TSV file: utterance id, tab, text")
    _add_common(p)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train the enhancement model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--archive", default=None, help="embedding archive path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--alpha", type=float, default=0.7, help="SE loss weight (default 0.7)")
    p.add_argument("--align", choices=["aligned", "left", "right"], default="aligned",
                   help="alignment pairing mode (default aligned)")
    p.add_argument("--arch", choices=["conformer", "transformer", "blstm"],
                   default="conformer", help="SE block kind (default conformer)")
    p.add_argument("--n-blocks", type=int, default=None,
                   help="SE block count (default 4, blstm 5)")
    p.add_argument("--d-a", type=int, default=256, help="SE stream width (default 256)")
    p.add_argument("--d-t", type=int, default=768,
                   help="embedding width when no archive is given (default 768)")
    p.add_argument("--lr", type=float, default=0.001, help="peak learning rate (default 0.001)")
    p.add_argument("--warmup", type=int, default=20000, help="warmup steps (default 20000)")
    p.add_argument("--epochs", type=int, default=130, help="training epochs (default 130)")
    p.add_argument("--avg-last-k", type=int, default=10,
                   help="checkpoints averaged for the final model (default 10)")
    p.add_argument("--batch-size", type=int, default=8, help="utterances per step (default 8)")
    p.add_argument("--grad-clip", type=float, default=5.0, help="global grad-norm clip (default 5)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--no-align", action="store_true", help="disable the text branch entirely")
    p.add_argument("--mask-domain", choices=["magnitude", "log"], default="magnitude",
                   help="where the mask multiplies (default magnitude)")
    _add_cmt_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one wav file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-domain", choices=["magnitude", "log"], default="magnitude")
    _add_common(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score a checkpoint over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--metrics", default=",".join(KNOWN_METRICS),
                   help="comma-separated metric names (default stoi,si_sdr)")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--mask-domain", choices=["magnitude", "log"], default="magnitude")
    p.add_argument("--noisy-baseline", action="store_true",
                   help="score noisy-vs-clean instead of enhanced-vs-clean")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention", help="dump cross-attention maps for one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--utt", required=True, help="utterance id")
    p.add_argument("--layer", type=int, default=0, help="encoder layer index (default 0)")
    p.add_argument("--reduce", choices=["mean-heads", "per-head"], default="mean-heads")
    p.add_argument("--out-prefix", required=True)
    _add_cmt_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "config"):
            _apply_config_file(args, parser)
        _echo(args)
        return args.func(args)
    except SemaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
