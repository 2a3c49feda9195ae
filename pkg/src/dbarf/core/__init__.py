"""Core functionality for pose-free generalizable rendering."""

from .models import RunConfig, SceneSpec, load_config

__all__ = ["RunConfig", "SceneSpec", "load_config"]
