from omc.cli import main

__all__ = ["main"]
