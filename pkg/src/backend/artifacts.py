"""Output directory writer: CSV, JSON, gnuplot .dat and the run manifest."""
import hashlib
import json
import logging
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from src import __version__
from src.config.settings import atomic_write_text
from src.models.history import CSV_FLOAT_FORMAT

logger = logging.getLogger("Artifacts")

MANIFEST_NAME = "manifest.json"


def to_jsonable(value):
    """Plain JSON types; NaN and infinities become null."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps_json(data) -> str:
    return json.dumps(to_jsonable(data), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactWriter:
    """Writes run artifacts atomically under one directory, honoring the enabled formats."""

    def __init__(self, directory: str, formats: Iterable[str] = ("csv", "json", "dat")):
        self.directory = directory
        self.formats = set(formats)
        os.makedirs(directory, exist_ok=True)
        self.written: List[str] = []

    def _path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def write_text(self, name: str, text: str) -> str:
        path = self._path(name)
        atomic_write_text(path, text)
        self.written.append(name)
        logger.info(f"Wrote {path}")
        return path

    def write_json(self, name: str, data) -> Optional[str]:
        if "json" not in self.formats:
            return None
        return self.write_text(name, dumps_json(data))

    def write_csv(self, name: str, text: str) -> Optional[str]:
        if "csv" not in self.formats:
            return None
        return self.write_text(name, text)

    def write_dat(self, name: str, header: Sequence[str], rows: Iterable[Sequence[float]],
                  comments: Sequence[str] = ()) -> Optional[str]:
        if "dat" not in self.formats:
            return None
        lines = [f"# {c}" for c in comments]
        lines.append("# " + " ".join(header))
        for row in rows:
            lines.append(" ".join(format(float(v), CSV_FLOAT_FORMAT) for v in row))
        return self.write_text(name, "\n".join(lines) + "\n")

    def file_hashes(self) -> Dict[str, str]:
        """sha256 of every file under the directory except the manifest."""
        hashes = {}
        for root, _, files in os.walk(self.directory):
            for filename in files:
                path = os.path.join(root, filename)
                rel = os.path.relpath(path, self.directory).replace(os.sep, "/")
                if rel == MANIFEST_NAME or filename.startswith(".memsde_"):
                    continue
                hashes[rel] = sha256_file(path)
        return dict(sorted(hashes.items()))

    def write_manifest(self, command: str, config_hash: str, seed: int, overrides: dict,
                       status: Dict[str, object]) -> str:
        manifest = {
            "command": command,
            "config_hash": config_hash,
            "seed": seed,
            "overrides": overrides,
            "version": __version__,
            "status": status,
            "files": self.file_hashes(),
        }
        return self.write_text(MANIFEST_NAME, dumps_json(manifest))
