"""Run directories, content hashes and per-command manifests."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)

RUN_ROOT_ENV = "MATRYOSHKA_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"
SUBDIRS = ("corpus", "checkpoints", "curves", "embeddings", "index", "reports", "plots", "manifests")


class StaleArtifactError(RuntimeError):
    """Raised when an upstream artifact no longer matches its manifest."""


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_run_dir(config_hash: str, run_dir: Optional[Union[str, Path]] = None) -> Path:
    """``--run-dir`` wins, then ``$MATRYOSHKA_RUN_ROOT/<hash>``, then ``./runs/<hash>``."""
    if run_dir is not None:
        return Path(run_dir)
    root = os.environ.get(RUN_ROOT_ENV) or DEFAULT_RUN_ROOT
    return Path(root) / config_hash[:16]


class RunDirectory:
    """One content-addressed run: artifacts in fixed subfolders plus a manifest per command."""

    def __init__(self, root: Union[str, Path], config_hash: str) -> None:
        self.root = Path(root)
        self.config_hash = config_hash
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def path(self, kind: str, name: str) -> Path:
        if kind not in SUBDIRS:
            raise ValueError(f"unknown artifact folder '{kind}'")
        return self.root / kind / name

    def relative(self, path: Union[str, Path]) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def manifest_path(self, command: str) -> Path:
        return self.path("manifests", f"{command}.json")

    def hashes(self, paths: Iterable[Union[str, Path]]) -> Dict[str, str]:
        return {self.relative(p): sha256_file(p) for p in sorted(Path(p) for p in paths)}

    def write_manifest(self, command: str, inputs: Sequence[Union[str, Path]], outputs: Sequence[Union[str, Path]],
                       volatile: Sequence[Union[str, Path]] = ()) -> Path:
        """Record input and output hashes; volatile outputs are listed but not hashed."""
        volatile_rel = sorted(self.relative(p) for p in volatile)
        manifest = {
            "command": command,
            "config_hash": self.config_hash,
            "inputs": self.hashes(inputs),
            "outputs": {k: v for k, v in self.hashes(outputs).items() if k not in volatile_rel},
            "volatile": volatile_rel,
        }
        path = self.manifest_path(command)
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        logger.debug(f"Wrote manifest {path}")
        return path

    def read_manifest(self, command: str) -> Dict[str, object]:
        path = self.manifest_path(command)
        if not path.is_file():
            raise StaleArtifactError(f"missing upstream artifacts: run `{command}` first (no {self.relative(path)})")
        return json.loads(path.read_text(encoding="utf-8"))

    def upstream_outputs(self, command: str, force: bool = False) -> List[Path]:
        """Outputs of ``command``, re-hashed against its manifest."""
        manifest = self.read_manifest(command)
        if manifest.get("config_hash") != self.config_hash and not force:
            raise StaleArtifactError(
                f"`{command}` artifacts were produced under config {str(manifest.get('config_hash'))[:16]}; "
                f"re-run `{command}` or pass --force"
            )
        outputs = manifest.get("outputs", {})
        assert isinstance(outputs, dict)
        paths = []
        for rel, recorded in sorted(outputs.items()):
            path = self.root / rel
            if not path.is_file():
                raise StaleArtifactError(f"`{command}` output {rel} is missing; re-run `{command}`")
            if sha256_file(path) != recorded:
                if not force:
                    raise StaleArtifactError(f"`{command}` output {rel} changed since it was written; re-run `{command}` or pass --force")
                logger.warning(f"Using modified upstream artifact {rel} (--force)")
            paths.append(path)
        return paths


def error_record(error: BaseException, command: Optional[str]) -> str:
    return json.dumps({"command": command, "error": type(error).__name__, "message": str(error)}, sort_keys=True)
