"""Bundled test networks and risk maps."""
from importlib.resources import files


def path(name: str):
    return files(__name__) / name


def read(name: str) -> str:
    return path(name).read_text()
