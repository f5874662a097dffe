"""echo-lens: echo-of-prompt analytics for LLM reasoning traces."""

__version__ = "0.1.0"
