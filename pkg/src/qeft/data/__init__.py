"""Shipped plain-text toy corpora."""

from importlib import resources

CORPORA = ("tiny_corpus.txt", "task_a.txt", "task_b.txt")


def load_text(name: str) -> bytes:
    """Return the raw bytes of a shipped corpus file."""
    if name not in CORPORA:
        raise KeyError(f"unknown corpus {name!r}; choose from {CORPORA}")
    return resources.files(__package__).joinpath(name).read_bytes()


def corpus_path(name: str) -> str:
    """Filesystem path of a shipped corpus (they are plain files in the wheel)."""
    if name not in CORPORA:
        raise KeyError(f"unknown corpus {name!r}; choose from {CORPORA}")
    return str(resources.files(__package__).joinpath(name))
