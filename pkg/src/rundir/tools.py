"""Dockerized executables: occasional tools in slim, versioned, cached images.

Tool recipes live under ``helpers/dockerized/<tool>/``: a ``Dockerfile``
plus an optional ``tool.yaml`` holding ``version`` and ``default_command``.
"""

from __future__ import annotations

import os
import re
import threading
import weakref
from dataclasses import dataclass
from pathlib import Path

import yaml

from .config import ContainerMode, Version
from .errors import InvalidValue, MissingField
from .runtime import Backend, ContainerSpec, Mount, RunResult

TOOLS_DIR = Path("helpers") / "dockerized"
TOOL_FILE = "tool.yaml"
WORKSPACE = "/workspace"

_NAME_RE = re.compile(r"[a-z0-9_\-]+")


@dataclass(frozen=True)
class ToolSpec:
    tool_name: str
    version: Version
    recipe: Path
    default_command: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not _NAME_RE.fullmatch(self.tool_name):
            raise InvalidValue(f"tool name must match [a-z0-9_-]+, got {self.tool_name!r}")

    @property
    def image_tag(self) -> str:
        return f"tool-{self.tool_name}:{self.version}"


def load_tool_spec(repo_root: str | os.PathLike, name: str, version: str | None = None) -> ToolSpec:
    """Read ``helpers/dockerized/<name>/tool.yaml``; ``version`` overrides the file."""
    tool_dir = Path(repo_root) / TOOLS_DIR / name
    meta = {}
    meta_path = tool_dir / TOOL_FILE
    if meta_path.is_file():
        meta = yaml.safe_load(meta_path.read_text()) or {}
    version = version or meta.get("version")
    if version is None:
        raise MissingField(f"{name}: version (pass --tool-version or set it in {meta_path})")
    command = meta.get("default_command") or ()
    if isinstance(command, str):
        command = command.split()
    return ToolSpec(name, Version.parse(version), tool_dir / "Dockerfile", tuple(command))


class ToolRunner:
    """Runs tools against one backend, building each (name, version) at most once."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._guard = threading.Lock()
        self._tool_locks: dict[str, threading.Lock] = {}

    def _lock_for(self, tag: str) -> threading.Lock:
        with self._guard:
            return self._tool_locks.setdefault(tag, threading.Lock())

    def ensure_image(self, spec: ToolSpec) -> str:
        tag = spec.image_tag
        with self._lock_for(tag):
            if not self.backend.image_exists(tag):
                self.backend.build_image(spec.recipe.parent, spec.recipe, tag)
        return tag

    def run(self, spec: ToolSpec, argv, repo_root: str | os.PathLike,
            mode: ContainerMode | str = ContainerMode.SIBLING) -> RunResult:
        command = tuple(argv) or spec.default_command
        if not command:
            raise InvalidValue(f"no command given for tool {spec.tool_name} and no default_command")
        repo_root = Path(repo_root).resolve()
        if not repo_root.is_dir():
            raise InvalidValue(f"repo root {repo_root} does not exist")
        tag = self.ensure_image(spec)
        return self.backend.run_container(ContainerSpec(
            image=tag,
            command=command,
            mounts=(Mount(str(repo_root), WORKSPACE, read_only=False),),
            workdir=WORKSPACE,
            mode=ContainerMode(mode),
            remove_after_exit=True,
        ))


_runners: "weakref.WeakKeyDictionary[Backend, ToolRunner]" = weakref.WeakKeyDictionary()
_runners_guard = threading.Lock()


def runner_for(backend: Backend) -> ToolRunner:
    """The process-wide runner for ``backend``, so build locks are shared."""
    with _runners_guard:
        runner = _runners.get(backend)
        if runner is None:
            runner = _runners[backend] = ToolRunner(backend)
        return runner


def run_tool(spec: ToolSpec, argv, repo_root, mode: ContainerMode | str = ContainerMode.SIBLING,
             *, backend: Backend) -> RunResult:
    return runner_for(backend).run(spec, argv, repo_root, mode)
