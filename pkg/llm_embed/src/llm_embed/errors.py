class LlmEmbedError(Exception):
    """Base class for extractor failures."""


class ModelError(LlmEmbedError):
    """A model or tokenizer could not be loaded or is unusable."""


class AlignmentError(LlmEmbedError):
    """Token ids and hidden-state rows disagree for an utterance."""
