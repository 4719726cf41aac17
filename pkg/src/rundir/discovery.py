"""Locate runnable directories under a root and build their nesting tree."""

from __future__ import annotations

import os
import posixpath
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Iterable, Protocol

import yaml

from .config import MARKER_FILE, RunnableDirConfig, config_to_dict, parse_runnable_config
from .errors import ConfigError, DuplicateDirId, PathOutsideTree, RootNotRunnable


@dataclass(frozen=True)
class Entry:
    name: str
    is_dir: bool
    is_symlink: bool = False


class FileSystem(Protocol):
    """Read-only view used by :func:`discover`. Paths are root-relative POSIX strings."""

    def listdir(self, path: str) -> Iterable[Entry]: ...

    def read_text(self, path: str) -> str: ...

    def is_file(self, path: str) -> bool: ...


class LocalFileSystem:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _p(self, path: str) -> Path:
        return self.root / path if path not in ("", ".") else self.root

    def listdir(self, path: str) -> list[Entry]:
        out = []
        with os.scandir(self._p(path)) as it:
            for e in it:
                link = e.is_symlink()
                out.append(Entry(e.name, e.is_dir(follow_symlinks=False), link))
        return out

    def read_text(self, path: str) -> str:
        return self._p(path).read_text(encoding="utf-8")

    def is_file(self, path: str) -> bool:
        return self._p(path).is_file()


class MemoryFileSystem:
    """In-memory tree for tests: ``{"B/runnable_dir.yaml": "...", ...}``.

    Directories are implied by file paths. ``symlinks`` names directory
    paths that should be reported as symlinked directories.
    """

    def __init__(self, files: dict[str, str], symlinks: Iterable[str] = (), order: str = "asc"):
        self.files = {posixpath.normpath(k): v for k, v in files.items()}
        self.symlinks = {posixpath.normpath(s) for s in symlinks}
        # "desc" scrambles enumeration order to exercise deterministic sorting.
        self.order = order

    def listdir(self, path: str) -> list[Entry]:
        prefix = "" if path in ("", ".") else path.rstrip("/") + "/"
        seen: dict[str, bool] = {}
        for key in list(self.files) + list(self.symlinks):
            if not key.startswith(prefix):
                continue
            head, sep, _ = key[len(prefix):].partition("/")
            seen[head] = seen.get(head, False) or bool(sep)
        names = sorted(seen, reverse=self.order == "desc")
        return [
            Entry(n, seen[n] or prefix + n in self.symlinks, prefix + n in self.symlinks)
            for n in names
        ]

    def read_text(self, path: str) -> str:
        return self.files[posixpath.normpath(path)]

    def is_file(self, path: str) -> bool:
        return posixpath.normpath(path) in self.files


@dataclass
class DirNode:
    path: PurePosixPath
    config: RunnableDirConfig
    children: list["DirNode"] = field(default_factory=list)

    @property
    def dir_id(self) -> str:
        return self.config.dir_id

    @property
    def rel(self) -> str:
        return str(self.path)

    def walk(self):
        """Yield this node and all descendants, pre-order."""
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass
class DirTree:
    root: DirNode
    index: dict[str, DirNode]
    root_path: Path | None = None

    def nodes(self) -> list[DirNode]:
        return sorted(self.root.walk(), key=lambda n: n.path.parts)

    def abspath(self, node: DirNode) -> Path:
        if self.root_path is None:
            raise ValueError("tree was discovered from a virtual filesystem")
        return self.root_path / node.path

    def parent_of(self, node: DirNode) -> DirNode | None:
        for n in self.root.walk():
            if any(c is node for c in n.children):
                return n
        return None


def _join(base: str, name: str) -> str:
    return name if base in ("", ".") else f"{base}/{name}"


def _load_config(fs: FileSystem, rel: str) -> RunnableDirConfig:
    marker = _join(rel, MARKER_FILE)
    try:
        return parse_runnable_config(fs.read_text(marker))
    except ConfigError as exc:
        exc.source = marker
        raise


def discover(root_path: str | os.PathLike, fs: FileSystem | None = None) -> DirTree:
    """Scan ``root_path`` for marker files and return the nesting tree.

    Hidden directories and symlinked directories are not entered. Submodules
    are ordinary subdirectories here.
    """
    if fs is None:
        fs = LocalFileSystem(root_path)
    if not fs.is_file(MARKER_FILE):
        raise RootNotRunnable(f"{root_path} has no {MARKER_FILE}")

    root = DirNode(PurePosixPath("."), _load_config(fs, "."))
    index = {root.dir_id: root}

    def scan(rel: str, parent: DirNode) -> None:
        for entry in sorted(fs.listdir(rel), key=lambda e: e.name):
            if not entry.is_dir or entry.is_symlink or entry.name.startswith("."):
                continue
            sub = _join(rel, entry.name)
            owner = parent
            if fs.is_file(_join(sub, MARKER_FILE)):
                node = DirNode(PurePosixPath(sub), _load_config(fs, sub))
                if node.dir_id in index:
                    raise DuplicateDirId(node.dir_id, index[node.dir_id].rel, node.rel)
                index[node.dir_id] = node
                parent.children.append(node)
                owner = node
            scan(sub, owner)

    scan(".", root)
    for node in root.walk():
        node.children.sort(key=lambda n: n.path.parts)
    real_root = None if not isinstance(fs, LocalFileSystem) else Path(root_path).resolve()
    return DirTree(root=root, index=index, root_path=real_root)


def container_for(tree: DirTree, path: str | os.PathLike) -> DirNode:
    """Deepest runnable directory containing ``path`` (root-relative or absolute)."""
    raw = os.fspath(path)
    if os.path.isabs(raw):
        if tree.root_path is None:
            raise PathOutsideTree(f"{raw} is absolute but the tree has no filesystem root")
        try:
            raw = Path(raw).resolve().relative_to(tree.root_path).as_posix()
        except ValueError:
            raise PathOutsideTree(f"{raw} is not under {tree.root_path}") from None
    norm = posixpath.normpath(raw.replace(os.sep, "/"))
    if norm == ".." or norm.startswith("../"):
        raise PathOutsideTree(f"{raw} is outside the tree")
    parts = PurePosixPath(norm).parts if norm != "." else ()

    node = tree.root
    while True:
        for child in node.children:
            cp = child.path.parts
            if parts[: len(cp)] == cp:
                node = child
                break
        else:
            return node


def node_to_dict(node: DirNode) -> dict[str, Any]:
    return {
        "path": node.rel,
        "config": config_to_dict(node.config),
        "children": [node_to_dict(c) for c in node.children],
    }


def node_from_dict(data: dict[str, Any]) -> DirNode:
    config = parse_runnable_config(yaml.safe_dump(data["config"]))
    return DirNode(PurePosixPath(data["path"]), config,
                   [node_from_dict(c) for c in data.get("children", [])])


def tree_from_dict(data: dict[str, Any]) -> DirTree:
    root = node_from_dict(data)
    return DirTree(root, {n.dir_id: n for n in root.walk()})


def render_tree(tree: DirTree) -> str:
    """Indented text rendering, one runnable directory per line."""
    lines = [f"{tree.root.dir_id}  ({tree.root.rel})"]

    def walk(node: DirNode, indent: str) -> None:
        for i, child in enumerate(node.children):
            last = i == len(node.children) - 1
            lines.append(f"{indent}{'└── ' if last else '├── '}{child.dir_id}  ({child.rel})")
            walk(child, indent + ("    " if last else "│   "))

    walk(tree.root, "")
    return "\n".join(lines) + "\n"


def find_root(start: str | os.PathLike) -> Path | None:
    """Nearest ancestor of ``start`` (inclusive) holding a marker file."""
    here = Path(start).resolve()
    for cand in (here, *here.parents):
        if (cand / MARKER_FILE).is_file():
            return cand
    return None
