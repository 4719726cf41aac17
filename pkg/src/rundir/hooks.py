"""Pre-commit policy checks.

Six checks, always evaluated in this order and never short-circuited:
branch, author, file_size, forbidden_words, compile, secrets.
"""

from __future__ import annotations

import json
import os
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Callable, Iterable

import yaml

from .errors import (
    BuildFailed,
    CheckerUnavailable,
    InvalidValue,
    MalformedYaml,
    NotAGitRepo,
    RuntimeUnavailable,
)
from .tools import load_tool_spec, run_tool

CHECK_NAMES = ("branch", "author", "file_size", "forbidden_words", "compile", "secrets")
POLICY_FILE = Path("helpers") / "hook_policy.yaml"

DEFAULT_SECRET_PATTERNS = (
    r"AKIA[0-9A-Z]{16}",  # AWS access key id
    r"ASIA[0-9A-Z]{16}",  # AWS temporary key id
    r"AIza[0-9A-Za-z_\-]{35}",  # Google API key
    r"gh[pousr]_[A-Za-z0-9]{36}",  # GitHub token
    r"xox[abprs]-[0-9A-Za-z\-]{10,}",  # Slack token
    r"-----BEGIN (?:RSA |DSA |EC |OPENSSH |PGP |ENCRYPTED )?PRIVATE KEY(?: BLOCK)?-----",
)


@dataclass(frozen=True)
class CompileCheck:
    """A syntax checker run through a dockerized tool; ``{path}`` is substituted per file."""

    tool: str
    command: tuple[str, ...]
    version: str | None = None


@dataclass(frozen=True)
class HookPolicy:
    protected_branches: tuple[str, ...] = ("master", "main")
    author_name_pattern: str = r"^\S(.*\S)?$"
    author_email_pattern: str = r"^[^@\s]+@[^@\s]+\.[^@\s]+$"
    max_file_bytes: int = 512 * 1024
    forbidden_words: tuple[str, ...] = ()
    compile_checks: dict[str, CompileCheck] = field(
        default_factory=lambda: {
            ".py": CompileCheck("pycompile", ("python", "-m", "py_compile", "{path}")),
        },
        hash=False,
    )
    secret_patterns: tuple[str, ...] = DEFAULT_SECRET_PATTERNS
    enabled: tuple[str, ...] = CHECK_NAMES

    def __post_init__(self) -> None:
        if self.max_file_bytes <= 0:
            raise InvalidValue("max_file_bytes must be positive")
        for pat in (self.author_name_pattern, self.author_email_pattern, *self.secret_patterns):
            try:
                re.compile(pat)
            except re.error as exc:
                raise InvalidValue(f"bad pattern {pat!r}: {exc}") from None
        unknown = set(self.enabled) - set(CHECK_NAMES)
        if unknown:
            raise InvalidValue(f"unknown checks enabled: {sorted(unknown)}")


def load_policy(path: str | os.PathLike | None) -> HookPolicy:
    """Policy from YAML; missing file or keys fall back to defaults."""
    if path is None or not Path(path).is_file():
        return HookPolicy()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise MalformedYaml(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedYaml(f"{path}: hook policy must be a mapping")
    kw: dict[str, Any] = {}
    for key in ("protected_branches", "forbidden_words", "secret_patterns", "enabled"):
        if key in data:
            kw[key] = tuple(data[key] or ())
    for key in ("author_name_pattern", "author_email_pattern"):
        if key in data:
            kw[key] = str(data[key])
    if "max_file_bytes" in data:
        kw["max_file_bytes"] = int(data["max_file_bytes"])
    if "compile_checks" in data:
        kw["compile_checks"] = {
            ext: CompileCheck(c["tool"], tuple(c["command"]), c.get("version"))
            for ext, c in (data["compile_checks"] or {}).items()
        }
    return HookPolicy(**kw)


@dataclass(frozen=True)
class FileChange:
    path: str
    content: str
    size: int = -1

    def __post_init__(self) -> None:
        if self.size < 0:
            object.__setattr__(self, "size", len(self.content.encode("utf-8")))


@dataclass(frozen=True)
class ChangeSet:
    branch: str
    author_name: str
    author_email: str
    files: tuple[FileChange, ...] = ()

    def __post_init__(self) -> None:
        paths = [f.path for f in self.files]
        if len(paths) != len(set(paths)):
            raise InvalidValue("changeset contains duplicate paths")

    def to_dict(self) -> dict[str, Any]:
        return {
            "branch": self.branch,
            "author": {"name": self.author_name, "email": self.author_email},
            "files": [{"path": f.path, "size": f.size, "content": f.content} for f in self.files],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ChangeSet":
        author = data.get("author") or {}
        return cls(
            branch=data["branch"],
            author_name=author.get("name", ""),
            author_email=author.get("email", ""),
            files=tuple(
                FileChange(f["path"], f.get("content", ""), f.get("size", -1))
                for f in data.get("files", [])
            ),
        )


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    offending: tuple[str, ...] = ()


@dataclass(frozen=True)
class HookReport:
    results: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def result(self, name: str) -> CheckResult:
        return next(r for r in self.results if r.name == name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "overall": "pass" if self.passed else "fail",
            "results": [
                {"check": r.name, "status": "pass" if r.passed else "fail",
                 "offending": list(r.offending)}
                for r in self.results
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HookReport":
        return cls(tuple(
            CheckResult(r["check"], r["status"] == "pass", tuple(r["offending"]))
            for r in data["results"]
        ))


# (extension, check, file) -> (ok, output). Raises CheckerUnavailable if it cannot run.
Checker = Callable[[str, CompileCheck, FileChange], "tuple[bool, str]"]


def _check_branch(change: ChangeSet, policy: HookPolicy, _checker) -> list[str]:
    if change.branch in policy.protected_branches:
        return [change.branch]
    return []


def _check_author(change: ChangeSet, policy: HookPolicy, _checker) -> list[str]:
    bad = []
    if not re.search(policy.author_name_pattern, change.author_name):
        bad.append(f"name: {change.author_name!r}")
    if not re.search(policy.author_email_pattern, change.author_email):
        bad.append(f"email: {change.author_email!r}")
    return bad


def _check_size(change: ChangeSet, policy: HookPolicy, _checker) -> list[str]:
    return [f"{f.path} ({f.size} bytes)" for f in change.files if f.size > policy.max_file_bytes]


def _check_words(change: ChangeSet, policy: HookPolicy, _checker) -> list[str]:
    bad = []
    for f in change.files:
        for word in policy.forbidden_words:
            if re.search(rf"(?<!\w){re.escape(word)}(?!\w)", f.content, re.IGNORECASE):
                bad.append(f"{f.path}: {word}")
    return bad


def _check_compile(change: ChangeSet, policy: HookPolicy, checker: Checker | None) -> list[str]:
    bad = []
    for f in change.files:
        ext = PurePosixPath(f.path).suffix
        check = policy.compile_checks.get(ext)
        if check is None:
            continue
        if checker is None:
            raise CheckerUnavailable(ext, "no checker configured")
        ok, output = checker(ext, check, f)
        if not ok:
            first = output.strip().splitlines()[-1] if output.strip() else "check failed"
            bad.append(f"{f.path}: {first}")
    return bad


def _check_secrets(change: ChangeSet, policy: HookPolicy, _checker) -> list[str]:
    patterns = [re.compile(p) for p in policy.secret_patterns]
    bad = []
    for f in change.files:
        for lineno, line in enumerate(f.content.splitlines(), 1):
            if any(p.search(line) for p in patterns):
                bad.append(f"{f.path}:{lineno}")
    return bad


_CHECKS = {
    "branch": _check_branch,
    "author": _check_author,
    "file_size": _check_size,
    "forbidden_words": _check_words,
    "compile": _check_compile,
    "secrets": _check_secrets,
}


def run_checks(change: ChangeSet, policy: HookPolicy | None = None,
               checker: Checker | None = None) -> HookReport:
    """Evaluate every enabled check independently and collect the results."""
    policy = policy or HookPolicy()
    results = []
    for name in CHECK_NAMES:
        if name not in policy.enabled:
            continue
        offending = _CHECKS[name](change, policy, checker)
        results.append(CheckResult(name, not offending, tuple(offending)))
    return HookReport(tuple(results))


class DockerizedChecker:
    """Runs compile checks inside dockerized tools against the staged content.

    Each file is written to a scratch directory that becomes the tool's
    workspace, so the check sees exactly what is being committed.
    """

    def __init__(self, backend, repo_root: str | os.PathLike):
        self.backend = backend
        self.repo_root = Path(repo_root)

    def __call__(self, ext: str, check: CompileCheck, change: FileChange) -> tuple[bool, str]:
        try:
            spec = load_tool_spec(self.repo_root, check.tool, check.version)
        except Exception as exc:
            raise CheckerUnavailable(ext, str(exc)) from exc
        if not spec.recipe.is_file():
            raise CheckerUnavailable(ext, f"no recipe at {spec.recipe}")
        argv = [a.replace("{path}", change.path) for a in check.command]
        with tempfile.TemporaryDirectory(prefix="rundir-check-") as tmp:
            target = Path(tmp) / change.path
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(change.content, encoding="utf-8")
            try:
                result = run_tool(spec, argv, tmp, backend=self.backend)
            except (RuntimeUnavailable, BuildFailed) as exc:
                raise CheckerUnavailable(ext, str(exc)) from exc
        return result.exit_code == 0, result.stdout + result.stderr


def _git(repo: Path, *args: str) -> subprocess.CompletedProcess:
    return subprocess.run(["git", "-C", str(repo), *args], capture_output=True)


def changeset_from_git(repo_root: str | os.PathLike) -> ChangeSet:
    """Build a ChangeSet from the index (staged additions and modifications)."""
    repo = Path(repo_root)
    if _git(repo, "rev-parse", "--git-dir").returncode != 0:
        raise NotAGitRepo(str(repo))
    branch = _git(repo, "symbolic-ref", "--short", "-q", "HEAD").stdout.decode().strip() or "HEAD"
    ident = _git(repo, "var", "GIT_AUTHOR_IDENT").stdout.decode().strip()
    m = re.match(r"^(.*?)\s*<([^>]*)>", ident)
    name, email = (m.group(1), m.group(2)) if m else ("", "")
    listing = _git(repo, "diff", "--cached", "--name-only", "--diff-filter=ACMR", "-z").stdout
    files = []
    for path in filter(None, listing.decode().split("\0")):
        blob = _git(repo, "show", f":{path}").stdout
        files.append(FileChange(path, blob.decode("utf-8", errors="replace"), len(blob)))
    return ChangeSet(branch, name, email, tuple(files))


def load_changeset(path: str | os.PathLike) -> ChangeSet:
    return ChangeSet.from_dict(json.loads(Path(path).read_text()))


def iter_failures(report: HookReport) -> Iterable[str]:
    for r in report.results:
        for item in r.offending:
            yield f"{r.name}: {item}"
