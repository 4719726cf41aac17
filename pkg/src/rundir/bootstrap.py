"""Shared thin environment, git hook installation and the helpers link farm."""

from __future__ import annotations

import datetime as dt
import logging
import os
import shutil
import stat
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml
from filelock import FileLock

from . import __version__
from .errors import (
    EnvPathNotWritable,
    InvalidValue,
    MalformedYaml,
    NotAGitRepo,
    SourceMissing,
    TargetEscapesRepo,
)
from .runtime import CLI_ENV

log = logging.getLogger(__name__)

ENV_PATH_VAR = "RUNDIR_ENV_PATH"
DEFAULT_ENV_PATH = Path("~/.rundir-env")
MANIFEST_FILE = "manifest.yaml"
LINKS_FILE = "links.yaml"
HOOK_MARKER = "# managed by rundir"
HOOK_NAMES = ("pre-commit",)


def default_env_path() -> Path:
    return Path(os.environ.get(ENV_PATH_VAR) or DEFAULT_ENV_PATH).expanduser()


@dataclass(frozen=True)
class Dependency:
    name: str
    version: str


@dataclass
class EnvManifest:
    env_path: str
    created_at: str
    dependencies: list[Dependency]
    consumers: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EnvManifest":
        return cls(
            env_path=d["env_path"],
            created_at=str(d["created_at"]),
            dependencies=[Dependency(**x) for x in d.get("dependencies", [])],
            consumers=list(d.get("consumers", [])),
        )


def bootstrap_dependencies() -> list[Dependency]:
    # The container CLI is only presence-checked; the task runner is this package.
    return [
        Dependency(os.environ.get(CLI_ENV) or "docker", "present"),
        Dependency("rundir", f">={__version__}"),
    ]


def hooks_dir(repo_root: Path) -> Path:
    git = repo_root / ".git"
    if git.is_dir():
        return git / "hooks"
    if git.is_file():
        # Submodules and worktrees: ".git" is a file pointing at the real dir.
        text = git.read_text().strip()
        if text.startswith("gitdir:"):
            gitdir = Path(text.split(":", 1)[1].strip())
            if not gitdir.is_absolute():
                gitdir = (repo_root / gitdir).resolve()
            return gitdir / "hooks"
    raise NotAGitRepo(f"{repo_root} has no .git directory")


def hook_script() -> str:
    return (
        "#!/bin/sh\n"
        f"{HOOK_MARKER}\n"
        f'exec "{sys.executable}" -m rundir hooks run --staged "$@"\n'
    )


def install_hooks(repo_root: str | os.PathLike) -> list[Path]:
    """Write the policy hook scripts; a foreign hook is kept as ``<name>.orig``."""
    target_dir = hooks_dir(Path(repo_root))
    target_dir.mkdir(parents=True, exist_ok=True)
    installed = []
    for name in HOOK_NAMES:
        path = target_dir / name
        if path.exists() and HOOK_MARKER not in path.read_text(errors="replace"):
            path.replace(path.with_name(name + ".orig"))
        path.write_text(hook_script())
        path.chmod(0o755)
        installed.append(path)
    return installed


def _write_activate(env_path: Path) -> None:
    (env_path / "activate").write_text(
        "# source this file to use the shared rundir environment\n"
        f'export {ENV_PATH_VAR}="{env_path}"\n'
    )


def bootstrap_thin_env(env_path: str | os.PathLike, repo_root: str | os.PathLike) -> EnvManifest:
    """Create (or join) the shared thin environment and install hooks into ``repo_root``.

    Idempotent: a repeated call for the same repo leaves the manifest as is.
    """
    env_path = Path(env_path).expanduser().resolve()
    repo_root = Path(repo_root).resolve()
    if not (repo_root / ".git").exists():
        raise NotAGitRepo(f"{repo_root} has no .git")
    try:
        env_path.mkdir(parents=True, exist_ok=True)
        probe = env_path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise EnvPathNotWritable(f"{env_path}: {exc}") from exc

    manifest_path = env_path / MANIFEST_FILE
    with FileLock(str(env_path / ".lock")):
        if manifest_path.is_file():
            try:
                manifest = EnvManifest.from_dict(yaml.safe_load(manifest_path.read_text()))
            except (yaml.YAMLError, KeyError, TypeError) as exc:
                raise MalformedYaml(f"{manifest_path}: {exc}") from exc
            changed = False
        else:
            manifest = EnvManifest(
                env_path=str(env_path),
                created_at=dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
                dependencies=bootstrap_dependencies(),
            )
            _write_activate(env_path)
            changed = True
            log.info("created thin environment at %s", env_path)
        if str(repo_root) not in manifest.consumers:
            manifest.consumers.append(str(repo_root))
            changed = True
        if changed:
            manifest_path.write_text(yaml.safe_dump(manifest.to_dict(), sort_keys=False))

    cli = manifest.dependencies[0].name if manifest.dependencies else "docker"
    if shutil.which(cli) is None:
        log.warning("container CLI %r not found on PATH; containers will not start", cli)
    install_hooks(repo_root)
    return manifest


# -- link farm -------------------------------------------------------------


@dataclass(frozen=True)
class Link:
    source: str
    target: str


@dataclass(frozen=True)
class LinkManifest:
    links: tuple[Link, ...]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LinkManifest":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise MalformedYaml(f"{path}: {exc}") from exc
        raw = data.get("links", []) if isinstance(data, dict) else data
        if not isinstance(raw, list):
            raise MalformedYaml(f"{path}: links must be a list")
        return cls(tuple(Link(str(x["source"]), str(x["target"])) for x in raw))


@dataclass
class LinkReport:
    created: int = 0
    repaired: int = 0
    unchanged: int = 0
    conflicts: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "created": self.created,
            "repaired": self.repaired,
            "unchanged": self.unchanged,
            "conflicts": [{"target": t, "reason": r} for t, r in self.conflicts],
        }


def _make_read_only(path: Path) -> None:
    try:
        mode = stat.S_IMODE(path.stat().st_mode)
        path.chmod(mode & ~(stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH))
    except OSError as exc:
        log.warning("could not clear write bits on %s: %s", path, exc)


def _is_under(path: Path, root: Path) -> bool:
    return path == root or path.is_relative_to(root)


def sync_links(helpers_root: str | os.PathLike, repo_root: str | os.PathLike,
               manifest: LinkManifest, repair: bool = False) -> LinkReport:
    """Make every manifest target a relative symlink to its helpers source.

    A regular file already at a target is a conflict unless ``repair`` is
    set; a symlink pointing elsewhere is always repaired. Sources lose their
    write bits, so links are read-only.
    """
    repo_root = Path(repo_root).resolve()
    helpers_root = Path(helpers_root)
    if not helpers_root.is_absolute():
        helpers_root = repo_root / helpers_root
    helpers_root = helpers_root.resolve()
    if not helpers_root.is_dir() or not _is_under(helpers_root, repo_root):
        raise InvalidValue(f"helpers root {helpers_root} must be a directory under {repo_root}")

    plan = []
    for link in manifest.links:
        src = (helpers_root / link.source).resolve()
        if not _is_under(src, helpers_root) or not src.is_file():
            raise SourceMissing(f"{link.source} is not a file under {helpers_root}")
        rel = Path(os.path.normpath(link.target))
        if rel.is_absolute() or rel.parts[:1] == ("..",) or str(rel) == ".":
            raise TargetEscapesRepo(link.target)
        target = repo_root / rel
        if not _is_under(target.parent.resolve(), repo_root):
            raise TargetEscapesRepo(link.target)
        plan.append((link, src, target))

    report = LinkReport()
    for link, src, target in plan:
        text = os.path.relpath(src, target.parent.resolve())
        if target.is_symlink():
            if target.resolve() == src:
                report.unchanged += 1
            else:
                target.unlink()
                target.symlink_to(text)
                report.repaired += 1
        elif target.is_dir():
            report.conflicts.append((link.target, "a directory exists at the target"))
            continue
        elif target.exists():
            if not repair:
                report.conflicts.append((link.target, "a regular file exists at the target"))
                continue
            target.unlink()
            target.symlink_to(text)
            report.repaired += 1
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.symlink_to(text)
            report.created += 1
        _make_read_only(src)
    return report
