"""Database package for the experiment artifact registry."""

from src.database.models import Artifact, Base, Run
from src.database.repository import Repository, file_sha256

__all__ = ["Artifact", "Base", "Run", "Repository", "file_sha256"]
