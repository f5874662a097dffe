class ExtractorError(Exception):
    pass


class ModelLoadError(ExtractorError):
    pass


class ContextLengthExceeded(ExtractorError):
    pass


class AttentionUnavailable(ExtractorError):
    pass


class EmbedderLoadError(ExtractorError):
    pass
