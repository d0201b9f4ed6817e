"""HTTP service wrapping the processing library."""

from .app import create_app

__all__ = ["create_app"]
