"""Per-directory configuration, changelogs and image tag resolution.

A runnable directory is marked by ``runnable_dir.yaml`` at its root. The
directory's build recipe and ``changelog.yaml`` live under ``build_context``
(``devops`` unless configured otherwise).
"""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import yaml

from .errors import (
    EmptyChangelog,
    InvalidValue,
    MalformedVersion,
    MalformedYaml,
    MissingField,
    NonMonotonicVersions,
    StageUserMismatch,
)

MARKER_FILE = "runnable_dir.yaml"
CHANGELOG_FILE = "changelog.yaml"
RECIPE_FILE = "Dockerfile"
DEFAULT_TEST_COMMAND = "pytest"
DEFAULT_BUILD_CONTEXT = "devops"

_ID_RE = re.compile(r"[a-z0-9_\-]+")
_VERSION_RE = re.compile(r"(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)")
# Docker tag component charset.
_TAG_PART_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*")

_KNOWN_FIELDS = (
    "dir_id",
    "image_name",
    "registry",
    "test_command",
    "container_mode",
    "storage",
    "build_context",
)


class Stage(str, Enum):
    LOCAL = "local"
    DEV = "dev"
    PROD = "prod"


class ContainerMode(str, Enum):
    CHILD = "child"
    SIBLING = "sibling"


@dataclass(frozen=True, order=True)
class Version:
    major: int
    minor: int
    patch: int

    @classmethod
    def parse(cls, text: Any) -> "Version":
        m = _VERSION_RE.fullmatch(str(text).strip()) if text is not None else None
        if m is None:
            raise MalformedVersion(f"not a major.minor.patch version: {text!r}")
        return cls(*(int(g) for g in m.groups()))

    def __str__(self) -> str:
        return f"{self.major}.{self.minor}.{self.patch}"


@dataclass(frozen=True)
class Storage:
    bucket: str
    prefix: str


@dataclass(frozen=True)
class RunnableDirConfig:
    dir_id: str
    image_name: str
    registry: str | None = None
    test_command: str = DEFAULT_TEST_COMMAND
    container_mode: ContainerMode = ContainerMode.SIBLING
    storage: Storage | None = None
    build_context: str = DEFAULT_BUILD_CONTEXT
    # Unrecognised keys are kept verbatim so a render/parse cycle is lossless.
    extra: dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        if not self.dir_id or not _ID_RE.fullmatch(self.dir_id):
            raise InvalidValue(f"dir_id must match [a-z0-9_-]+, got {self.dir_id!r}")
        if not self.image_name:
            raise InvalidValue("image_name must be non-empty")
        if not self.test_command.strip():
            raise InvalidValue("test_command must be non-empty")
        _check_relative(self.build_context, "build_context")


@dataclass(frozen=True)
class ChangelogEntry:
    version: Version
    date: dt.date
    note: str


@dataclass(frozen=True)
class Changelog:
    entries: tuple[ChangelogEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise EmptyChangelog("changelog has no entries")
        for newer, older in zip(self.entries, self.entries[1:]):
            if not newer.version > older.version:
                raise NonMonotonicVersions(
                    f"version {newer.version} listed before {older.version}; "
                    "entries must be newest first with strictly decreasing versions"
                )

    @property
    def latest(self) -> Version:
        return self.entries[0].version


@dataclass(frozen=True)
class ImageRef:
    name: str
    stage: Stage
    version: Version
    user: str | None = None
    registry: str | None = None

    def __post_init__(self) -> None:
        if (self.stage is Stage.LOCAL) != (self.user is not None):
            raise StageUserMismatch(
                f"stage {self.stage.value} "
                + ("requires a user" if self.stage is Stage.LOCAL else "takes no user")
            )

    @property
    def tag(self) -> str:
        if self.stage is Stage.LOCAL:
            return f"{self.name}:local-{self.user}-{self.version}"
        prefix = f"{self.registry}/" if self.registry else ""
        return f"{prefix}{self.name}:{self.stage.value}-{self.version}"

    def __str__(self) -> str:
        return self.tag


def _check_relative(path: str, what: str) -> None:
    if not path or path.startswith("/") or re.match(r"^[A-Za-z]:[\\/]", path):
        raise InvalidValue(f"{what} must be a relative path, got {path!r}")
    if ".." in re.split(r"[\\/]", path):
        raise InvalidValue(f"{what} must not contain '..' segments, got {path!r}")


def _load_yaml(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MalformedYaml(f"invalid YAML: {exc}") from exc


def _as_str(value: Any, what: str) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int, float)):
        raise InvalidValue(f"{what} must be a string, got {value!r}")
    return str(value)


def parse_runnable_config(text: str) -> RunnableDirConfig:
    """Parse a ``runnable_dir.yaml`` document, applying defaults."""
    data = _load_yaml(text)
    if not isinstance(data, dict):
        raise MalformedYaml("runnable_dir.yaml must contain a mapping")
    for required in ("dir_id", "image_name"):
        if data.get(required) in (None, ""):
            raise MissingField(required)

    storage = None
    raw_storage = data.get("storage")
    if raw_storage is not None:
        if not isinstance(raw_storage, dict):
            raise InvalidValue("storage must be a mapping with bucket and prefix")
        for key in ("bucket", "prefix"):
            if key not in raw_storage:
                raise MissingField(f"storage.{key}")
        storage = Storage(
            bucket=_as_str(raw_storage["bucket"], "storage.bucket"),
            prefix=_as_str(raw_storage["prefix"], "storage.prefix"),
        )

    mode = data.get("container_mode", ContainerMode.SIBLING.value)
    try:
        mode = ContainerMode(mode)
    except ValueError:
        raise InvalidValue(f"container_mode must be child or sibling, got {mode!r}") from None

    registry = data.get("registry")
    return RunnableDirConfig(
        dir_id=_as_str(data["dir_id"], "dir_id"),
        image_name=_as_str(data["image_name"], "image_name"),
        registry=None if registry is None else _as_str(registry, "registry"),
        test_command=_as_str(data.get("test_command", DEFAULT_TEST_COMMAND), "test_command"),
        container_mode=mode,
        storage=storage,
        build_context=_as_str(data.get("build_context", DEFAULT_BUILD_CONTEXT), "build_context"),
        extra={k: v for k, v in data.items() if k not in _KNOWN_FIELDS},
    )


def config_to_dict(config: RunnableDirConfig) -> dict[str, Any]:
    out: dict[str, Any] = {
        "dir_id": config.dir_id,
        "image_name": config.image_name,
        "test_command": config.test_command,
        "container_mode": config.container_mode.value,
        "build_context": config.build_context,
    }
    if config.registry is not None:
        out["registry"] = config.registry
    if config.storage is not None:
        out["storage"] = {"bucket": config.storage.bucket, "prefix": config.storage.prefix}
    out.update(config.extra)
    return out


def render_runnable_config(config: RunnableDirConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def parse_changelog(text: str) -> Changelog:
    """Parse ``changelog.yaml``: a list of version/date/note mappings, newest first."""
    data = _load_yaml(text)
    if data is None or data == []:
        raise EmptyChangelog("changelog is empty")
    if not isinstance(data, list):
        raise MalformedYaml("changelog must be a YAML list of entries")

    entries = []
    for i, raw in enumerate(data):
        if not isinstance(raw, dict):
            raise MalformedYaml(f"changelog entry {i} is not a mapping")
        if "version" not in raw:
            raise MissingField(f"entries[{i}].version")
        version = Version.parse(raw["version"])
        date = raw.get("date")
        if isinstance(date, dt.datetime):
            date = date.date()
        elif not isinstance(date, dt.date):
            try:
                date = dt.date.fromisoformat(str(date))
            except ValueError:
                raise InvalidValue(f"entry {version}: date must be ISO-8601, got {date!r}") from None
        entries.append(ChangelogEntry(version, date, str(raw.get("note") or "")))
    return Changelog(tuple(entries))


def render_changelog(changelog: Changelog) -> str:
    return yaml.safe_dump(
        [
            {"version": str(e.version), "date": e.date.isoformat(), "note": e.note}
            for e in changelog.entries
        ],
        sort_keys=False,
    )


def resolve_image_tag(
    config: RunnableDirConfig,
    changelog: Changelog,
    stage: Stage | str,
    user: str | None = None,
) -> ImageRef:
    """Image identity for ``config`` at ``stage``, pinned to the latest changelog version.

    Local images are per developer and never carry a registry prefix.
    """
    stage = Stage(stage)
    if stage is Stage.LOCAL and not user:
        raise StageUserMismatch("local stage requires a user")
    if stage is not Stage.LOCAL and user is not None:
        raise StageUserMismatch(f"stage {stage.value} does not take a user")
    if user is not None and not _TAG_PART_RE.fullmatch(user):
        raise InvalidValue(f"user {user!r} cannot appear in an image tag")
    return ImageRef(
        name=config.image_name,
        stage=stage,
        version=changelog.latest,
        user=user,
        registry=None if stage is Stage.LOCAL else config.registry,
    )
