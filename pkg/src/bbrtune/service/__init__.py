"""HTTP service exposing training, evaluation, comparison and plotting."""

from .app import create_app

__all__ = ["create_app"]
