"""HTTP service exposing upload, review, annotation, and export endpoints."""

from .app import create_app
from .config import ServerConfig
from .service import OccasionService

__all__ = ["create_app", "ServerConfig", "OccasionService"]
