import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence

from slugify import slugify

from . import DEFAULT_WORKING_DIR, __version__
from .utils import LoggingObject, load_obj_from_json_file, safe_json_dump, write_csv

MANIFEST_FILE = "manifest.json"


@dataclass
class RunManifest:
    """
    Everything needed to repeat a run: the command line, the resolved configuration as INI
    text, the seed of stochastic commands and the produced files
    """
    argv: List[str]
    config_text: str
    seed: Optional[int] = None
    version: str = __version__
    outputs: List[str] = field(default_factory=list)
    wall_time_s: float = 0.0


class RunWriter(LoggingObject):
    """
    Writes the artifacts of one command inside an output directory. File names are slugified from the command and
    the given labels.
    """

    def __init__(self, command: str, working_dir: Path = None):
        """
        Constructor
        :param command: the command name, used as the prefix of every file written
        :param working_dir: output directory, DEFAULT_WORKING_DIR if not given
        """
        super().__init__()
        if working_dir is None:
            working_dir = DEFAULT_WORKING_DIR
        self.working_dir: Path = Path(working_dir).resolve(strict=False)
        self.command: str = command
        self.outputs: List[Path] = []
        os.makedirs(self.working_dir, exist_ok=True)

    def path_for(self, label: str, extension: str) -> Path:
        stem = slugify(f"{self.command} {label}" if label else self.command)
        return self.working_dir.joinpath(f"{stem}.{extension}")

    def write_csv(self, label: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.path_for(label, "csv")
        write_csv(path, header, rows)
        self._record(path)
        return path

    def write_json(self, label: str, obj: Any) -> Path:
        path = self.path_for(label, "json")
        safe_json_dump(path, obj, unpicklable=False)
        self._record(path)
        return path

    def write_text(self, label: str, extension: str, text: str) -> Path:
        path = self.path_for(label, extension)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        self._record(path)
        return path

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest.outputs = [path.name for path in self.outputs]
        path = self.working_dir.joinpath(MANIFEST_FILE)
        safe_json_dump(path, manifest)
        self.logger.info(f"Run manifest written to {path}")
        return path

    def _record(self, path: Path) -> None:
        if path not in self.outputs:
            self.outputs.append(path)
        self.logger.info(f"Wrote {path}")


def load_manifest(path: Path) -> RunManifest:
    manifest = load_obj_from_json_file(path)
    if not isinstance(manifest, RunManifest):
        raise ValueError(f"{path} does not hold a run manifest.")
    missing = [f.name for f in fields(RunManifest) if not hasattr(manifest, f.name)]
    if missing:
        raise ValueError(f"{path} is an incomplete run manifest, missing {', '.join(missing)}.")
    if not (isinstance(manifest.argv, list) and all(isinstance(arg, str) for arg in manifest.argv)):
        raise ValueError(f"{path}: the manifest argv must be a list of strings.")
    if not isinstance(manifest.config_text, str):
        raise ValueError(f"{path}: the manifest config_text must be a string.")
    return manifest
