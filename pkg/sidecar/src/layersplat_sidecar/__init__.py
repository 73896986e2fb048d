from .app import create_app
from .backends import DEFAULT_MODEL_ID, ProceduralBackend, make_backend

__all__ = ["create_app", "DEFAULT_MODEL_ID", "ProceduralBackend", "make_backend"]
