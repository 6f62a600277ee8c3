"""
Artifact writers for experiment outputs (JSON, JSON-lines, CSV).
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable

import pandas as pd


class ArtifactLogger:
    """Writes run artifacts into one output directory.

    Every file is rewritten in full, never appended, so a re-run with the
    same inputs leaves byte-identical files behind.
    """

    def __init__(self, out_dir: str, verbose: bool = False):
        self.out_dir = Path(out_dir)
        self.verbose = verbose
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"Could not create output directory {self.out_dir}: {e}") from e

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _replace_atomically(self, path: Path, text: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_path = path.with_name(path.name + ".tmp")
        try:
            with open(temp_path, 'w', newline='') as f:
                f.write(text)
            os.replace(temp_path, path)
        except OSError as e:
            raise OSError(f"Could not write {path}: {e}") from e
        if self.verbose:
            print(f"📝 Wrote {path}")

    def write_json(self, name: str, data: Dict[str, Any]) -> Path:
        """Write one JSON document (sorted keys, 2-space indent)."""
        path = self.path(name)
        self._replace_atomically(path, json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path

    def write_jsonl(self, name: str, records: Iterable[Dict[str, Any]]) -> Path:
        """Write one compact JSON object per line."""
        path = self.path(name)
        lines = [json.dumps(r, sort_keys=True, separators=(',', ':')) for r in records]
        self._replace_atomically(path, "".join(line + "\n" for line in lines))
        return path

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """Write a DataFrame without its index, columns in frame order."""
        path = self.path(name)
        self._replace_atomically(path, frame.to_csv(index=False, lineterminator="\n"))
        return path


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except OSError as e:
        raise OSError(f"Could not read {path}: {e}") from e


def read_jsonl(path: str) -> list:
    try:
        with open(path, 'r') as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise OSError(f"Could not read {path}: {e}") from e
