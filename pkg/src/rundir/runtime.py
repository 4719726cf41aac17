"""Container operations behind one interface.

Two backends are provided:

* :class:`ExecBackend` shells out to an OCI-compatible CLI (``docker`` by
  default, overridable with ``RUNDIR_CONTAINER_CLI``).
* :class:`FakeBackend` keeps images and containers in memory, synthesizes
  content-hash digests, and can be scripted with exit codes and build
  failures. It can persist its state to JSON so separate CLI invocations
  share one fake "daemon".

Every backend records a :class:`BackendEvent` per build/run/retag/remove.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from .config import ContainerMode
from .errors import (
    BuildFailed,
    ContextMissing,
    ImageMissing,
    InvalidValue,
    RuntimeUnavailable,
)

log = logging.getLogger(__name__)

CLI_ENV = "RUNDIR_CONTAINER_CLI"
HOST_SOCKET = "/var/run/docker.sock"
# Never part of a build context listing.
_CONTEXT_SKIP = {".git", ".rundir.lock"}


@dataclass(frozen=True)
class Mount:
    host: str
    container: str
    read_only: bool = False


@dataclass(frozen=True)
class ContainerSpec:
    """A single container invocation. ``image`` is a rendered tag."""

    image: str
    command: tuple[str, ...]
    mounts: tuple[Mount, ...] = ()
    env: dict[str, str] = field(default_factory=dict, hash=False)
    workdir: str | None = None
    mode: ContainerMode = ContainerMode.SIBLING
    remove_after_exit: bool = True

    def __post_init__(self) -> None:
        if not self.command:
            raise InvalidValue("container command must be non-empty")
        for m in self.mounts:
            if not os.path.isabs(m.host):
                raise InvalidValue(f"mount host path must be absolute: {m.host!r}")

    def to_payload(self) -> dict[str, Any]:
        return {
            "image": self.image,
            "command": list(self.command),
            "mounts": [asdict(m) for m in self.mounts],
            "env": dict(sorted(self.env.items())),
            "workdir": self.workdir,
            "mode": ContainerMode(self.mode).value,
            "remove_after_exit": self.remove_after_exit,
        }


@dataclass(frozen=True)
class RunResult:
    exit_code: int
    stdout: str = ""
    stderr: str = ""
    duration_ms: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.exit_code <= 255:
            raise InvalidValue(f"exit code out of range: {self.exit_code}")


class EventKind(str, Enum):
    BUILD = "build"
    RUN = "run"
    RETAG = "retag"
    REMOVE = "remove"


@dataclass(frozen=True)
class BackendEvent:
    kind: EventKind
    payload: dict[str, Any]
    sequence: int

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "payload": self.payload, "sequence": self.sequence}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BackendEvent":
        return cls(EventKind(d["kind"]), d["payload"], int(d["sequence"]))


def _check_context(context: Path, recipe: Path) -> tuple[Path, Path]:
    context = Path(context).resolve()
    recipe = Path(recipe)
    if not recipe.is_absolute():
        recipe = context / recipe
    recipe = recipe.resolve()
    if not context.is_dir():
        raise ContextMissing(f"build context {context} does not exist")
    if not recipe.is_relative_to(context) or not recipe.is_file():
        raise ContextMissing(f"recipe {recipe} is not a file inside {context}")
    return context, recipe


def context_listing(context: Path) -> list[tuple[str, str]]:
    """Sorted ``(relative path, sha256 of content)`` for every file in a build context."""
    out = []
    for dirpath, dirnames, filenames in os.walk(context):
        dirnames[:] = [d for d in dirnames if d not in _CONTEXT_SKIP]
        for name in filenames:
            if name in _CONTEXT_SKIP:
                continue
            p = Path(dirpath) / name
            if p.is_symlink() and not p.exists():
                continue
            rel = p.relative_to(context).as_posix()
            out.append((rel, hashlib.sha256(p.read_bytes()).hexdigest()))
    out.sort()
    return out


def content_digest(context: Path, recipe: Path, tag: str) -> str:
    h = hashlib.sha256()
    for rel, sha in context_listing(context):
        h.update(f"{rel}\0{sha}\n".encode())
    h.update(b"\0recipe\0")
    h.update(recipe.read_bytes())
    h.update(b"\0tag\0")
    h.update(tag.encode())
    return "sha256:" + h.hexdigest()


class Backend:
    """Common event-log bookkeeping. Subclasses implement the operations."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._events: list[BackendEvent] = []
        self._seq = 0

    def _record(self, kind: EventKind, payload: dict[str, Any]) -> BackendEvent:
        with self._lock:
            self._seq += 1
            ev = BackendEvent(kind, payload, self._seq)
            self._events.append(ev)
            return ev

    @property
    def events(self) -> list[BackendEvent]:
        with self._lock:
            return list(self._events)

    def count(self, kind: EventKind | str) -> int:
        kind = EventKind(kind)
        return sum(1 for e in self.events if e.kind is kind)

    def build_image(self, context, recipe, tag: str, arch: str | None = None) -> str:
        raise NotImplementedError

    def run_container(self, spec: ContainerSpec) -> RunResult:
        raise NotImplementedError

    def retag(self, src: str, dst: str) -> None:
        raise NotImplementedError

    def image_exists(self, tag: str) -> bool:
        raise NotImplementedError

    def digest(self, tag: str) -> str:
        raise NotImplementedError

    def live_containers(self) -> set[str]:
        raise NotImplementedError

    def remove_container(self, container_id: str) -> None:
        raise NotImplementedError


def _annotate(spec: ContainerSpec, parent_context: str) -> dict[str, Any]:
    payload = spec.to_payload()
    if ContainerMode(spec.mode) is ContainerMode.SIBLING:
        payload["host_socket"] = HOST_SOCKET
    else:
        payload["nested_under"] = parent_context
    return payload


@dataclass
class _Script:
    exit_code: int = 0
    stdout: str = ""
    stderr: str = ""
    duration_ms: int = 0
    delay: float = 0.0


class FakeBackend(Backend):
    """Deterministic in-memory runtime.

    Run outcomes are scripted per image tag (:meth:`script_run`) or computed
    by a handler (:meth:`on_run`); unscripted runs exit 0 with no output.
    ``delay`` values only slow calls down, they never change results.
    """

    def __init__(self, *, available: bool = True, context_name: str = "host",
                 build_delay: float = 0.0):
        super().__init__()
        self.available = available
        self.context_name = context_name
        self.build_delay = build_delay
        self.images: dict[str, dict[str, Any]] = {}
        self._containers: set[str] = set()
        self._next_container = 0
        self._scripts: dict[str, _Script] = {}
        self._handlers: dict[str, Callable[[ContainerSpec], RunResult]] = {}
        self._failing_builds: dict[str, str] = {}

    # -- scripting ---------------------------------------------------------

    def script_run(self, tag: str, exit_code: int = 0, stdout: str = "", stderr: str = "",
                   duration_ms: int = 0, delay: float = 0.0) -> None:
        self._scripts[tag] = _Script(exit_code, stdout, stderr, duration_ms, delay)

    def on_run(self, tag: str, handler: Callable[[ContainerSpec], RunResult]) -> None:
        self._handlers[tag] = handler

    def fail_build(self, tag: str, output: str = "scripted build failure") -> None:
        self._failing_builds[tag] = output

    def add_image(self, tag: str, digest: str | None = None) -> str:
        """Seed an image without emitting a build event."""
        digest = digest or "sha256:" + hashlib.sha256(tag.encode()).hexdigest()
        with self._lock:
            self.images[tag] = {"digest": digest, "arch": None}
        return digest

    # -- operations --------------------------------------------------------

    def _require_runtime(self) -> None:
        if not self.available:
            raise RuntimeUnavailable("fake runtime marked unavailable")

    def build_image(self, context, recipe, tag: str, arch: str | None = None) -> str:
        self._require_runtime()
        context, recipe = _check_context(context, recipe)
        digest = content_digest(context, recipe, tag)
        if self.build_delay:
            time.sleep(self.build_delay)
        self._record(EventKind.BUILD, {
            "context": str(context), "recipe": str(recipe), "tag": tag, "arch": arch,
        })
        if tag in self._failing_builds:
            raise BuildFailed(tag, self._failing_builds[tag])
        with self._lock:
            self.images[tag] = {"digest": digest, "arch": arch}
        return digest

    def run_container(self, spec: ContainerSpec) -> RunResult:
        self._require_runtime()
        if not self.image_exists(spec.image):
            raise ImageMissing(spec.image)
        with self._lock:
            self._next_container += 1
            cid = f"fake-{self._next_container}"
            self._containers.add(cid)
        payload = _annotate(spec, self.context_name)
        payload["container"] = cid
        self._record(EventKind.RUN, payload)
        try:
            handler = self._handlers.get(spec.image)
            if handler is not None:
                result = handler(spec)
            else:
                s = self._scripts.get(spec.image, _Script())
                if s.delay:
                    time.sleep(s.delay)
                result = RunResult(s.exit_code, s.stdout, s.stderr, s.duration_ms)
        finally:
            if spec.remove_after_exit:
                self.remove_container(cid)
        return result

    def remove_container(self, container_id: str) -> None:
        with self._lock:
            if container_id not in self._containers:
                return
            self._containers.discard(container_id)
        self._record(EventKind.REMOVE, {"container": container_id})

    def retag(self, src: str, dst: str) -> None:
        self._require_runtime()
        with self._lock:
            if src not in self.images:
                raise ImageMissing(src)
            self.images[dst] = dict(self.images[src])
        self._record(EventKind.RETAG, {"src": src, "dst": dst})

    def image_exists(self, tag: str) -> bool:
        with self._lock:
            return tag in self.images

    def digest(self, tag: str) -> str:
        with self._lock:
            if tag not in self.images:
                raise ImageMissing(tag)
            return self.images[tag]["digest"]

    def live_containers(self) -> set[str]:
        with self._lock:
            return set(self._containers)

    # -- persistence -------------------------------------------------------

    def to_state(self) -> dict[str, Any]:
        with self._lock:
            return {
                "available": self.available,
                "context_name": self.context_name,
                "images": self.images,
                "containers": sorted(self._containers),
                "next_container": self._next_container,
                "sequence": self._seq,
                "events": [e.to_dict() for e in self._events],
                "scripts": {t: asdict(s) for t, s in self._scripts.items()},
                "failing_builds": self._failing_builds,
            }

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "FakeBackend":
        fb = cls(available=state.get("available", True),
                 context_name=state.get("context_name", "host"))
        fb.images = {k: dict(v) for k, v in state.get("images", {}).items()}
        fb._containers = set(state.get("containers", []))
        fb._next_container = int(state.get("next_container", 0))
        fb._events = [BackendEvent.from_dict(e) for e in state.get("events", [])]
        fb._seq = int(state.get("sequence", len(fb._events)))
        fb._scripts = {t: _Script(**s) for t, s in state.get("scripts", {}).items()}
        fb._failing_builds = dict(state.get("failing_builds", {}))
        return fb

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FakeBackend":
        p = Path(path)
        if not p.exists():
            return cls()
        return cls.from_state(json.loads(p.read_text()))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_state(), indent=2, sort_keys=True))


class ExecBackend(Backend):
    """Drives a container CLI binary (``docker``, ``podman``, ...).

    Child mode runs the container privileged so it can host its own daemon;
    how that nested daemon is provisioned is left to the image.
    """

    def __init__(self, binary: str | None = None, *, context_name: str = "host"):
        super().__init__()
        self.binary = binary or os.environ.get(CLI_ENV) or "docker"
        self.context_name = context_name

    def _exe(self) -> str:
        exe = shutil.which(self.binary) or (self.binary if os.path.isfile(self.binary) else None)
        if exe is None:
            raise RuntimeUnavailable(f"container CLI {self.binary!r} not found")
        return exe

    def _cli(self, *args: str, check: bool = False) -> subprocess.CompletedProcess:
        exe = self._exe()
        try:
            proc = subprocess.run([exe, *args], capture_output=True, text=True)
        except OSError as exc:
            raise RuntimeUnavailable(f"cannot execute {exe}: {exc}") from exc
        if check and proc.returncode != 0:
            raise RuntimeUnavailable(f"{self.binary} {args[0]} failed: {proc.stderr.strip()}")
        return proc

    def image_exists(self, tag: str) -> bool:
        return self._cli("image", "inspect", tag).returncode == 0

    def digest(self, tag: str) -> str:
        proc = self._cli("image", "inspect", "--format", "{{.Id}}", tag)
        if proc.returncode != 0:
            raise ImageMissing(tag)
        return proc.stdout.strip()

    def build_image(self, context, recipe, tag: str, arch: str | None = None) -> str:
        context, recipe = _check_context(context, recipe)
        self._exe()
        args = ["build", "-f", str(recipe), "-t", tag]
        if arch:
            # Recorded only; no cross-architecture emulation is attempted.
            args += ["--label", f"rundir.arch={arch}"]
        args.append(str(context))
        self._record(EventKind.BUILD, {
            "context": str(context), "recipe": str(recipe), "tag": tag, "arch": arch,
        })
        proc = self._cli(*args)
        if proc.returncode != 0:
            raise BuildFailed(tag, proc.stdout + proc.stderr)
        return self.digest(tag)

    def run_args(self, spec: ContainerSpec) -> list[str]:
        args = ["run"]
        if spec.remove_after_exit:
            args.append("--rm")
        if ContainerMode(spec.mode) is ContainerMode.SIBLING:
            args += ["-v", f"{HOST_SOCKET}:{HOST_SOCKET}"]
        else:
            args.append("--privileged")
            args += ["-e", f"RUNDIR_PARENT_CONTEXT={self.context_name}"]
        for m in spec.mounts:
            args += ["-v", f"{m.host}:{m.container}" + (":ro" if m.read_only else "")]
        for k, v in sorted(spec.env.items()):
            args += ["-e", f"{k}={v}"]
        if spec.workdir:
            args += ["-w", spec.workdir]
        args.append(spec.image)
        args += list(spec.command)
        return args

    def run_container(self, spec: ContainerSpec) -> RunResult:
        if not self.image_exists(spec.image):
            raise ImageMissing(spec.image)
        self._record(EventKind.RUN, _annotate(spec, self.context_name))
        start = time.monotonic()
        proc = self._cli(*self.run_args(spec))
        elapsed = int((time.monotonic() - start) * 1000)
        code = proc.returncode
        if code < 0:
            code = 128 + (-code)
        return RunResult(min(code, 255), proc.stdout, proc.stderr, elapsed)

    def retag(self, src: str, dst: str) -> None:
        if not self.image_exists(src):
            raise ImageMissing(src)
        self._record(EventKind.RETAG, {"src": src, "dst": dst})
        self._cli("tag", src, dst, check=True)

    def live_containers(self) -> set[str]:
        proc = self._cli("ps", "-aq", check=True)
        return set(proc.stdout.split())

    def remove_container(self, container_id: str) -> None:
        self._record(EventKind.REMOVE, {"container": container_id})
        self._cli("rm", "-f", container_id)


def backend_from_env(environ: dict[str, str] | None = None) -> Backend:
    """``RUNDIR_FAKE_STATE`` selects a persisted fake backend; otherwise exec."""
    env = os.environ if environ is None else environ
    state = env.get("RUNDIR_FAKE_STATE")
    if state:
        return FakeBackend.load(state)
    return ExecBackend(env.get(CLI_ENV))
