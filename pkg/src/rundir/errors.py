"""Exception hierarchy shared by all rundir modules."""

from __future__ import annotations


class RundirError(Exception):
    """Base class for every domain failure raised by rundir."""


# -- configuration ---------------------------------------------------------


class ConfigError(RundirError):
    """A config or changelog document could not be accepted.

    ``source`` is filled in by callers that know which file was parsed.
    """

    source: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        if self.source:
            return f"{self.source}: {msg}"
        return msg


class MalformedYaml(ConfigError):
    pass


class MissingField(ConfigError):
    def __init__(self, field: str):
        super().__init__(f"missing required field {field!r}")
        self.field = field


class InvalidValue(ConfigError):
    pass


class EmptyChangelog(ConfigError):
    pass


class NonMonotonicVersions(ConfigError):
    pass


class MalformedVersion(ConfigError):
    pass


class StageUserMismatch(RundirError):
    pass


# -- discovery -------------------------------------------------------------


class RootNotRunnable(RundirError):
    pass


class DuplicateDirId(RundirError):
    def __init__(self, dir_id: str, first: str, second: str):
        super().__init__(f"dir_id {dir_id!r} used by both {first!r} and {second!r}")
        self.dir_id = dir_id
        self.paths = (first, second)


class PathOutsideTree(RundirError):
    pass


# -- container runtime -----------------------------------------------------


class BuildFailed(RundirError):
    def __init__(self, tag: str, output: str = ""):
        super().__init__(f"build of {tag} failed" + (f":\n{output}" if output else ""))
        self.tag = tag
        self.output = output


class ContextMissing(RundirError):
    pass


class ImageMissing(RundirError):
    def __init__(self, tag: str, node: str | None = None):
        where = f" (node {node})" if node else ""
        super().__init__(f"image {tag} not found{where}")
        self.tag = tag
        self.node = node


class RuntimeUnavailable(RundirError):
    pass


# -- lifecycle / orchestration ---------------------------------------------


class IllegalTransition(RundirError):
    pass


class UnknownSelector(RundirError):
    def __init__(self, dir_id: str):
        super().__init__(f"no runnable directory with dir_id {dir_id!r}")
        self.dir_id = dir_id


# -- workspace bootstrap ---------------------------------------------------


class EnvPathNotWritable(RundirError):
    pass


class NotAGitRepo(RundirError):
    pass


class SourceMissing(RundirError):
    pass


class TargetEscapesRepo(RundirError):
    pass


# -- hooks / ignore generation ---------------------------------------------


class CheckerUnavailable(RundirError):
    def __init__(self, extension: str, reason: str = ""):
        super().__init__(f"no usable checker for {extension}" + (f": {reason}" if reason else ""))
        self.extension = extension


class NoEntrypoints(RundirError):
    pass


class EntrypointMissing(RundirError):
    pass
