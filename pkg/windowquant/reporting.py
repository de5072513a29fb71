"""
WindowQuant -- Report rendering: JSON documents plus Jinja2 text summaries.
"""
import json
import pathlib
import sys

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined

SCHEMA_VERSION = 1

BASE_DIR = pathlib.Path(__file__).resolve().parent

templates = Environment(
    loader=FileSystemLoader(str(BASE_DIR / "templates")),
    undefined=StrictUndefined,
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def dumps_document(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_document(doc: dict, path: str | None = None) -> None:
    """Write ``doc`` to ``path``, or to standard output when no path is given."""
    text = dumps_document(doc)
    if path:
        pathlib.Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def render_summary(command: str, doc: dict) -> str:
    return templates.get_template(f"{command}.txt.j2").render(doc=doc)
