"""Switch between metaheuristics while they run, driven by per-epoch feedback."""

from pmf.about import __version__  # noqa: F401
