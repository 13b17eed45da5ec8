from __future__ import annotations
from typing import Any, Iterable, Optional, Sequence, Union

import contextlib
import csv
import hashlib
import importlib.metadata
import json
import os
import pathlib
import subprocess
import numpy as np

__all__ = [
    "expand",
    "format_float",
    "mkdir_safe",
    "Settings",
    "substream",
    "version_string",
    "write_csv",
]


def expand(path: str, dir: Optional[str] = None) -> str:
    p = pathlib.Path(path).expanduser()
    if dir is not None:
        p = pathlib.Path(dir).joinpath(p)
    return str(p.expanduser().resolve())


def mkdir_safe(directory: str) -> None:
    with contextlib.suppress(FileExistsError):
        os.makedirs(directory)


def _entropy(key: Union[int, str]) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")
    return int(key)


def substream(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Independent generator for (seed, *keys); equal keys give equal streams."""
    return np.random.default_rng(
        np.random.SeedSequence([_entropy(seed), *(_entropy(k) for k in keys)])
    )


def version_string() -> str:
    """``git describe`` of the source checkout, else the installed version."""
    here = pathlib.Path(__file__).resolve().parent
    with contextlib.suppress(OSError, subprocess.SubprocessError):
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here,
            capture_output=True,
            text=True,
            check=True,
        )
        if out.stdout.strip():
            return out.stdout.strip()
    try:
        return importlib.metadata.version("loopymp")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def format_float(x: float) -> str:
    return repr(float(x))


def _key_path(keys) -> tuple:
    return keys if isinstance(keys, tuple) else (keys,)


class Settings:
    """Run configuration echoed into CSV headers.

    Tuple keys address nested entries, e.g. ``s["models", "cycbp"]``.
    """

    def __init__(self, **entries: Any) -> None:
        self.d = dict(entries)

    def __getitem__(self, keys) -> Any:
        branch = self.d
        for k in _key_path(keys):
            branch = branch[k]
        return Settings(**branch) if isinstance(branch, dict) else branch

    def __setitem__(self, keys, value) -> None:
        *head, last = _key_path(keys)
        branch = self.d
        for k in head:
            branch = branch.setdefault(k, {})
        branch[last] = value

    def to_json(self) -> str:
        return json.dumps(self.d, sort_keys=True, separators=(",", ":"), default=str)

    def __repr__(self) -> str:
        return f"Settings({self.d!r})"


def write_csv(
    path: str,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    settings: Optional[Settings] = None,
) -> None:
    """Write a CSV whose first line echoes the configuration and version.

    Floats are written with ``repr`` so values survive a round trip exactly.
    """
    parent = pathlib.Path(expand(path)).parent
    mkdir_safe(str(parent))
    with open(path, "w", newline="") as f:
        if settings is not None:
            f.write(f"# loopymp {version_string()} {settings.to_json()}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [
                    format_float(v) if isinstance(v, (float, np.floating)) else v
                    for v in row
                ]
            )
