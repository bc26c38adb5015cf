"""Command line front end: `llm-embed --manifest ... --model ... --out ...`."""

from __future__ import annotations

import argparse
import sys

from .errors import LlmEmbedError
from .extract import ExtractJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llm-embed",
        description="Extract per-token language-model embeddings into a CMKE archive")
    parser.add_argument("--manifest", required=True, help="JSONL manifest path")
    parser.add_argument("--model", required=True, help="language model path or name")
    parser.add_argument("--out", required=True, help="output archive path")
    parser.add_argument("--target-layer", type=int, default=-1,
                        help="hidden layer to dump (-1 = final, default)")
    parser.add_argument("--include-table", action="store_true",
                        help="also embed the model's input-embedding table")
    parser.add_argument("--asr-model", default=None,
                        help="ASR model for manifests without transcripts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExtractJob(manifest=args.manifest, model=args.model, out=args.out,
                     target_layer=args.target_layer,
                     include_table=args.include_table,
                     asr_model=args.asr_model)
    try:
        print(extract(job))
        return 0
    except (LlmEmbedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
