"""JSON serialization with lossless, deterministic float formatting.

Checkpoints must round-trip float64 values exactly and be byte-identical
across runs, so floats are always written with 17 significant digits
instead of whatever repr() happens to choose.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from .errors import PipelineError


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    return f"{x:.17g}"


def _encode(obj: Any, out: list[str], indent: int | None, depth: int) -> None:
    pad = "" if indent is None else "\n" + " " * (indent * (depth + 1))
    end_pad = "" if indent is None else "\n" + " " * (indent * depth)
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _encode(obj.tolist(), out, indent, depth)
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append("," + (" " if indent is None else ""))
            out.append(pad)
            _encode(item, out, indent, depth + 1)
        out.append(end_pad + "]")
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be str, got {type(key).__name__}")
            if i:
                out.append("," + (" " if indent is None else ""))
            out.append(pad + json.dumps(key) + ": ")
            _encode(value, out, indent, depth + 1)
        out.append(end_pad + "}")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} to JSON")


def dumps(obj: Any, indent: int | None = None) -> str:
    """Serialize to JSON text; floats use 17 significant digits."""
    out: list[str] = []
    _encode(obj, out, indent, 0)
    return "".join(out)


def save_json(path: str | Path, obj: Any, indent: int | None = None) -> None:
    Path(path).write_text(dumps(obj, indent=indent) + "\n", encoding="utf-8")


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def check_format_version(doc: dict, expected: int, context: str) -> None:
    version = doc.get("format_version")
    if version != expected:
        raise PipelineError(
            f"{context}: unsupported format_version {version!r} (expected {expected})"
        )
