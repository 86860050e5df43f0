"""JSON-lines dataset manifests.

One entry per line with keys ``id, degraded_path, clean_path, labels, pseudo,
condition``. Paths are relative to the manifest file's directory.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

FIELDS = ("id", "degraded_path", "clean_path", "labels", "pseudo", "condition")


@dataclass
class ManifestEntry:
    id: str
    degraded_path: str
    clean_path: str | None = None
    labels: dict | None = None
    pseudo: dict | None = None
    condition: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        unknown = set(d) - set(FIELDS)
        if unknown:
            raise ConfigurationError(f"manifest entry has unknown keys {sorted(unknown)}")
        if "id" not in d or "degraded_path" not in d:
            raise ConfigurationError("manifest entry needs 'id' and 'degraded_path'")
        return cls(**{k: d.get(k, cls.__dataclass_fields__[k].default) for k in FIELDS})


def dumps(entries) -> str:
    return "".join(json.dumps(e.to_dict(), ensure_ascii=False) + "\n" for e in entries)


def write_manifest(path, entries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(entries), encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = ManifestEntry.from_dict(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        if entry.id in seen:
            raise ConfigurationError(f"{path}:{lineno}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        entries.append(entry)
    return entries


def resolve(manifest_path, rel: str | None) -> Path | None:
    if rel is None:
        return None
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def rebase(entry: ManifestEntry, src_manifest, dst_manifest) -> ManifestEntry:
    """Rewrite relative paths so they stay valid from ``dst_manifest``'s directory."""
    src_dir = Path(src_manifest).resolve().parent
    dst_dir = Path(dst_manifest).resolve().parent
    if src_dir == dst_dir:
        return entry

    def fix(p):
        if p is None or Path(p).is_absolute():
            return p
        return Path(os.path.relpath(src_dir / p, dst_dir)).as_posix()

    return ManifestEntry(entry.id, fix(entry.degraded_path), fix(entry.clean_path),
                         entry.labels, entry.pseudo, entry.condition)
