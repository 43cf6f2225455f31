"""Make this a module."""
