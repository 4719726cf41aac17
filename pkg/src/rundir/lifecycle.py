"""Local -> dev -> prod progression of a runnable directory's image."""

from __future__ import annotations

import contextlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from filelock import FileLock

from .config import (
    CHANGELOG_FILE,
    RECIPE_FILE,
    Changelog,
    ImageRef,
    Stage,
    Version,
    parse_changelog,
    resolve_image_tag,
)
from .discovery import DirNode
from .errors import ConfigError, EmptyChangelog, IllegalTransition, ImageMissing
from .runtime import Backend

log = logging.getLogger(__name__)

LOCK_FILE = ".rundir.lock"
LEGAL_TRANSITIONS = {(Stage.LOCAL, Stage.DEV), (Stage.DEV, Stage.PROD)}


@dataclass(frozen=True)
class StageTransition:
    node_id: str
    from_stage: Stage
    to_stage: Stage
    version: Version
    actor: str | None

    def __post_init__(self) -> None:
        if (self.from_stage, self.to_stage) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(
                f"{self.node_id}: {self.from_stage.value} -> {self.to_stage.value} is not allowed "
                "(images move local -> dev -> prod one stage at a time)"
            )


@contextlib.contextmanager
def node_lock(node_dir: Path, timeout: float = 60):
    """Advisory per-node lock serializing build/promote for one directory."""
    with FileLock(str(node_dir / LOCK_FILE), timeout=timeout):
        yield


def load_changelog(node_dir: Path, node: DirNode) -> Changelog:
    path = node_dir / node.config.build_context / CHANGELOG_FILE
    if not path.is_file():
        raise EmptyChangelog(f"{node.dir_id}: no changelog at {path}")
    try:
        return parse_changelog(path.read_text(encoding="utf-8"))
    except ConfigError as exc:
        exc.source = str(path)
        raise


def resolve_for(node_dir: Path, node: DirNode, stage: Stage | str, user: str | None = None) -> ImageRef:
    return resolve_image_tag(node.config, load_changelog(node_dir, node), stage, user)


def build_stage(node: DirNode, user: str, *, backend: Backend, node_dir: str | os.PathLike,
                arch: str | None = None) -> ImageRef:
    """Build the directory's recipe into its local-stage image for ``user``.

    The build context is the directory itself; the recipe is
    ``<build_context>/Dockerfile``.
    """
    node_dir = Path(node_dir)
    with node_lock(node_dir):
        ref = resolve_for(node_dir, node, Stage.LOCAL, user)
        recipe = node_dir / node.config.build_context / RECIPE_FILE
        digest = backend.build_image(node_dir, recipe, ref.tag, arch=arch)
    log.info("built %s (%s)", ref.tag, digest)
    return ref


def promote(node: DirNode, from_stage: Stage | str, to_stage: Stage | str, user: str | None = None,
            *, backend: Backend, node_dir: str | os.PathLike) -> ImageRef:
    """Retag the current version from one stage to the next. Never builds.

    ``user`` names the local image owner when promoting out of local, and is
    otherwise only recorded as the actor.
    """
    from_stage, to_stage = Stage(from_stage), Stage(to_stage)
    node_dir = Path(node_dir)
    with node_lock(node_dir):
        changelog = load_changelog(node_dir, node)
        transition = StageTransition(node.dir_id, from_stage, to_stage, changelog.latest, user)
        src = resolve_image_tag(node.config, changelog, from_stage,
                                user if from_stage is Stage.LOCAL else None)
        dst = resolve_image_tag(node.config, changelog, to_stage)
        if not backend.image_exists(src.tag):
            raise ImageMissing(src.tag, node.dir_id)
        backend.retag(src.tag, dst.tag)
    log.info("promoted %s -> %s (version %s, actor %s)", src.tag, dst.tag,
             transition.version, transition.actor or "-")
    return dst
