"""Versioned plain-text key-value format shared by priors, schedules, codecs,
models, manifests and configs.

One ``key = value`` pair per line. Floats are written with 17 significant
digits so that a dump/load cycle is bit-exact; vectors are comma-separated.
Lines starting with ``#`` are comments.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_NAME = "nsdser-kv"
FORMAT_VERSION = 1


class KVFormatError(ValueError):
    pass


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def fmt_vector(v) -> str:
    return ",".join(fmt_float(x) for x in np.asarray(v, dtype=float).ravel())


def fmt_ints(v) -> str:
    return ",".join(str(int(x)) for x in np.asarray(v).ravel())


def _fmt_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return fmt_float(value)
    if isinstance(value, np.ndarray):
        if value.dtype.kind in "iub":
            return fmt_ints(value)
        return fmt_vector(value)
    if isinstance(value, (list, tuple)):
        if all(isinstance(x, (int, np.integer)) and not isinstance(x, bool) for x in value):
            return fmt_ints(value)
        if all(isinstance(x, (int, float, np.integer, np.floating)) for x in value):
            return fmt_vector(value)
        return ",".join(str(x) for x in value)
    if value is None:
        return ""
    text = str(value)
    if "\n" in text:
        raise KVFormatError("values must be single-line")
    return text


def dumps(kind: str, fields: Mapping[str, Any]) -> str:
    lines = [
        f"format = {FORMAT_NAME}",
        f"version = {FORMAT_VERSION}",
        f"kind = {kind}",
    ]
    for key, value in fields.items():
        if "=" in key or key.strip() != key or not key:
            raise KVFormatError(f"invalid key {key!r}")
        lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str, kind: str | None = None) -> dict[str, str]:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVFormatError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in fields:
            raise KVFormatError(f"line {lineno}: duplicate key {key!r}")
        fields[key] = value.strip()
    if fields.get("format") != FORMAT_NAME:
        raise KVFormatError("missing or wrong format header")
    if int(fields.get("version", "-1")) != FORMAT_VERSION:
        raise KVFormatError(f"unsupported version {fields.get('version')}")
    if kind is not None and fields.get("kind") != kind:
        raise KVFormatError(f"expected kind {kind!r}, got {fields.get('kind')!r}")
    return fields


def dump(path, kind: str, fields: Mapping[str, Any]) -> None:
    Path(path).write_text(dumps(kind, fields))


def load(path, kind: str | None = None) -> dict[str, str]:
    return loads(Path(path).read_text(), kind)


def parse_vector(text: str) -> np.ndarray:
    if not text:
        return np.zeros(0)
    return np.array([float(x) for x in text.split(",")])


def parse_ints(text: str) -> np.ndarray:
    if not text:
        return np.zeros(0, dtype=np.int64)
    return np.array([int(x) for x in text.split(",")], dtype=np.int64)


def parse_bool(text: str) -> bool:
    if text not in ("true", "false"):
        raise KVFormatError(f"not a boolean: {text!r}")
    return text == "true"
