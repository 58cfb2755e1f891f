"""Run manifest: what a command read, what it wrote, and content hashes of both."""
import hashlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field

MANIFEST_FILE = "manifest.json"


def git_blob_sha1(data: bytes) -> str:
    """Object id ``git hash-object`` would give ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_file(path: Union[str, Path]) -> str:
    return git_blob_sha1(Path(path).read_bytes())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Artifact(BaseModel):
    path: str
    sha1: str
    bytes: int
    deterministic: bool = True


class RunManifest(BaseModel):
    command: str
    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: List[Artifact] = Field(default_factory=list)
    outputs: List[Artifact] = Field(default_factory=list)
    started_at: str = Field(default_factory=_now)
    finished_at: Optional[str] = None

    def _entry(self, path: Union[str, Path], root: Optional[Path], deterministic: bool) -> Artifact:
        path = Path(path)
        shown = path
        if root is not None:
            try:
                shown = path.resolve().relative_to(root.resolve())
            except ValueError:
                pass
        return Artifact(path=shown.as_posix(), sha1=hash_file(path), bytes=path.stat().st_size, deterministic=deterministic)

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs.append(self._entry(path, None, True))

    def add_output(self, path: Union[str, Path], root: Optional[Path] = None, deterministic: bool = True) -> None:
        self.outputs.append(self._entry(path, root, deterministic))

    def output_hashes(self, deterministic_only: bool = True) -> Dict[str, str]:
        return {a.path: a.sha1 for a in self.outputs if a.deterministic or not deterministic_only}

    def finish(self) -> "RunManifest":
        self.finished_at = _now()
        return self

    def save(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / MANIFEST_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILE
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
