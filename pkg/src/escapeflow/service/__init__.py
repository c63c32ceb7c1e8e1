"""HTTP service wrapping the scenario runner and the flow integrator."""

from .app import app, create_app

__all__ = ["app", "create_app"]
