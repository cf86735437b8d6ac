"""Tree-based deep retrieval: tree index, neural scorer, beam search, tree learning."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def fixture_path(name: str) -> Path:
    """Path of a bundled example data file (see ``tdm/fixtures``)."""
    path = Path(str(resources.files("tdm") / "fixtures" / name))
    if not path.exists():
        raise FileNotFoundError(f"no bundled fixture named {name!r}")
    return path
