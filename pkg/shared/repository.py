"""
fgvis — Artifact Repository
Filesystem + in-memory implementations for run outputs (images, CSV tables,
manifests, model files).
"""

from __future__ import annotations

import csv
import io
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Sequence

from pydantic import BaseModel

from .formats import dump_key_values, encode_image
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Abstract Repository
# ---------------------------------------------------------------------------

class ArtifactRepository(ABC):
    @abstractmethod
    def write_bytes(self, name: str, data: bytes) -> str: ...

    def write_text(self, name: str, text: str) -> str:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_csv(
        self,
        name: str,
        rows: Iterable[Mapping[str, Any] | BaseModel],
        fieldnames: Sequence[str] | None = None,
    ) -> str:
        return self.write_text(name, render_csv(rows, fieldnames))

    def write_manifest(self, name: str, values: Mapping[str, Any] | BaseModel) -> str:
        return self.write_text(name, dump_key_values(values))

    def write_image(self, stem: str, img: Tensor) -> str:
        """Write a [C, H, W] image in [0, 1] as <stem>.pgm or <stem>.ppm."""
        data, ext = encode_image(img)
        return self.write_bytes(f"{stem}.{ext}", data)


def _csv_value(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return value.value
    return value


def render_csv(
    rows: Iterable[Mapping[str, Any] | BaseModel], fieldnames: Sequence[str] | None = None
) -> str:
    dicts = [r.model_dump(by_alias=True) if isinstance(r, BaseModel) else dict(r) for r in rows]
    if fieldnames is None:
        fieldnames = list(dicts[0]) if dicts else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in dicts:
        writer.writerow({k: _csv_value(row.get(k)) for k in fieldnames})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Filesystem Repository
# ---------------------------------------------------------------------------

class FileSystemRepository(ArtifactRepository):
    """Writes under a root directory, creating parents on demand."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def write_bytes(self, name: str, data: bytes) -> str:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return str(path)


# ---------------------------------------------------------------------------
# In-Memory Repository (for development/testing)
# ---------------------------------------------------------------------------

class InMemoryRepository(ArtifactRepository):
    def __init__(self):
        self.files: Dict[str, bytes] = {}

    def write_bytes(self, name: str, data: bytes) -> str:
        self.files[name] = bytes(data)
        return name

    def text(self, name: str) -> str:
        return self.files[name].decode("utf-8")
