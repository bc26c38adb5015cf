"""Offline extractor: transcripts (or ASR output) -> embedding archives.

Produces the CMKE binary format consumed by the enhancement trainer; the
two tools share only that file format and the JSONL manifest convention.
"""

from .archive import write_cmke
from .errors import AlignmentError, LlmEmbedError, ModelError
from .extract import ExtractJob, extract, transcribe

__all__ = ["ExtractJob", "extract", "transcribe", "write_cmke",
           "LlmEmbedError", "ModelError", "AlignmentError"]
