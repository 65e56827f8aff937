"""Generator scripts shipped with the package."""
