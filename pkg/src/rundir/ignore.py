"""File-dependency closure and ``.dockerignore`` generation.

References are extracted per file extension with regexes. Each regex has
one capture group; resolver templates turn a capture into candidate paths
relative to the repo root. Placeholders:

``{ref}``          the captured text
``{module_path}``  the capture with dots replaced by slashes
``{dir}``          directory of the referring file (``.`` at the root)
"""

from __future__ import annotations

import logging
import os
import posixpath
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import yaml

from .errors import EntrypointMissing, InvalidValue, MalformedYaml, NoEntrypoints

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Rule:
    pattern: str
    resolvers: tuple[str, ...]

    def __post_init__(self) -> None:
        try:
            rx = re.compile(self.pattern, re.MULTILINE)
        except re.error as exc:
            raise InvalidValue(f"bad reference pattern {self.pattern!r}: {exc}") from None
        if rx.groups != 1:
            raise InvalidValue(f"reference pattern {self.pattern!r} needs exactly one capture group")
        for tpl in self.resolvers:
            try:
                out = tpl.format(ref="x", module_path="x", dir="d")
            except (KeyError, IndexError, ValueError) as exc:
                raise InvalidValue(f"bad resolver template {tpl!r}: {exc}") from None
            if out.startswith("/"):
                raise InvalidValue(f"resolver template {tpl!r} must produce relative paths")
        object.__setattr__(self, "_rx", rx)

    @property
    def regex(self) -> re.Pattern:
        return self._rx  # type: ignore[attr-defined]


@dataclass(frozen=True)
class ScannerProfile:
    rules: dict[str, tuple[Rule, ...]] = field(default_factory=dict, hash=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ScannerProfile":
        raw = data.get("rules", data) if isinstance(data, dict) else None
        if not isinstance(raw, dict):
            raise MalformedYaml("scanner profile must map extensions to rule lists")
        rules = {}
        for ext, items in raw.items():
            parsed = []
            for item in items or ():
                res = item.get("resolver", item.get("resolvers", "{dir}/{ref}"))
                parsed.append(Rule(item["pattern"], (res,) if isinstance(res, str) else tuple(res)))
            rules[ext if ext.startswith(".") else "." + ext] = tuple(parsed)
        return cls(rules)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ScannerProfile":
        try:
            return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})
        except yaml.YAMLError as exc:
            raise MalformedYaml(f"{path}: {exc}") from exc


DEFAULT_PROFILE = ScannerProfile({
    ".py": (
        Rule(r"^\s*import\s+([A-Za-z_][\w.]*)",
             ("{module_path}.py", "{module_path}/__init__.py", "{dir}/{module_path}.py")),
        Rule(r"^\s*from\s+([A-Za-z_][\w.]*)\s+import\b",
             ("{module_path}.py", "{module_path}/__init__.py", "{dir}/{module_path}.py")),
        Rule(r"^\s*from\s+\.([A-Za-z_][\w.]*)\s+import\b",
             ("{dir}/{module_path}.py", "{dir}/{module_path}/__init__.py")),
    ),
    ".sh": (
        Rule(r"^\s*(?:source|\.)\s+[\"']?([\w./\-]+)", ("{dir}/{ref}", "{ref}")),
    ),
})


@dataclass(frozen=True)
class FileClosure:
    files: frozenset[str]
    roots: frozenset[str]
    warnings: tuple[str, ...] = ()


def _norm(path: str) -> str:
    return posixpath.normpath(path.replace(os.sep, "/"))


def _under(path: str, prefix: str) -> bool:
    return prefix in ("", ".") or path == prefix or path.startswith(prefix.rstrip("/") + "/")


def references(rel: str, text: str, profile: ScannerProfile) -> list[tuple[str, list[str]]]:
    """``(captured ref, candidate paths)`` for every reference found in one file."""
    rules = profile.rules.get(posixpath.splitext(rel)[1], ())
    here = posixpath.dirname(rel) or "."
    out = []
    for rule in rules:
        for m in rule.regex.finditer(text):
            ref = m.group(1)
            cands = [
                _norm(t.format(ref=ref, module_path=ref.replace(".", "/"), dir=here))
                for t in rule.resolvers
            ]
            out.append((ref, cands))
    return out


def compute_file_closure(repo_root: str | os.PathLike, entrypoints: Iterable[str],
                         profile: ScannerProfile = DEFAULT_PROFILE,
                         exclude_dirs: Iterable[str] = ()) -> FileClosure:
    """Least set containing the entrypoints and closed under resolved references.

    Files under ``exclude_dirs`` (typically nested runnable directories) are
    only followed when an entrypoint lives there. Unresolvable references
    become warnings.
    """
    root = Path(repo_root).resolve()
    roots = {_norm(str(e)) for e in entrypoints}
    if not roots:
        raise NoEntrypoints("at least one entrypoint is required")
    for e in sorted(roots):
        if e == ".." or e.startswith("../") or os.path.isabs(e) or not (root / e).is_file():
            raise EntrypointMissing(e)
    excluded = [
        d for d in (_norm(x) for x in exclude_dirs)
        if not any(_under(e, d) for e in roots)
    ]

    files = set(roots)
    warnings = []
    queue = deque(sorted(roots))
    while queue:
        rel = queue.popleft()
        text = (root / rel).read_text(encoding="utf-8", errors="replace")
        for ref, cands in references(rel, text, profile):
            hits = [
                c for c in cands
                if not (c == ".." or c.startswith("../")) and (root / c).is_file()
            ]
            if not hits:
                warnings.append(f"{rel}: unresolved reference {ref!r}")
                continue
            for c in hits:
                if any(_under(c, d) for d in excluded):
                    warnings.append(f"{rel}: {c} belongs to a nested runnable directory")
                    continue
                if c not in files:
                    files.add(c)
                    queue.append(c)
    for w in warnings:
        log.debug(w)
    return FileClosure(frozenset(files), frozenset(roots), tuple(dict.fromkeys(warnings)))


def _escape(path: str) -> str:
    return re.sub(r"([\\*?\[])", r"\\\1", path)


def emit_dockerignore(closure: FileClosure, always_keep: Iterable[str] = ()) -> str:
    """Exclude everything, then re-include each kept path, sorted."""
    keep = sorted(set(closure.files) | {_norm(p) for p in always_keep})
    return "".join(["*\n", *(f"!{_escape(p)}\n" for p in keep)])
