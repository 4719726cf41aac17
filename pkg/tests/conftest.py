from __future__ import annotations

import subprocess
import textwrap
from pathlib import Path

import pytest

from rundir.config import Stage
from rundir.discovery import DirTree, discover
from rundir.lifecycle import build_stage, promote
from rundir.runtime import FakeBackend


def make_rundir(path: Path, dir_id: str, image: str, versions=("1.0.0",), *,
                test_command: str | None = None, mode: str | None = None,
                registry: str | None = None) -> Path:
    """Write a minimal runnable directory: marker, recipe, changelog."""
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"dir_id: {dir_id}", f"image_name: {image}"]
    if test_command:
        lines.append(f"test_command: {test_command}")
    if mode:
        lines.append(f"container_mode: {mode}")
    if registry:
        lines.append(f"registry: {registry}")
    (path / "runnable_dir.yaml").write_text("\n".join(lines) + "\n")
    devops = path / "devops"
    devops.mkdir(exist_ok=True)
    (devops / "Dockerfile").write_text(f"FROM python:3.11-slim\nLABEL dir={dir_id}\n")
    entries = "".join(
        f"- version: {v}\n  date: 2024-0{i + 1}-01\n  note: release {v}\n"
        for i, v in enumerate(versions)
    )
    (devops / "changelog.yaml").write_text(entries)
    return path


@pytest.fixture
def abc_repo(tmp_path) -> Path:
    """Root A with a plain subdirectory B and a submodule-style directory C."""
    root = tmp_path / "A"
    make_rundir(root, "a", "img-a", ("1.1.0", "1.0.0"))
    make_rundir(root / "B", "b", "img-b", ("1.2.0",), mode="child")
    make_rundir(root / "C", "c", "img-c", ("0.3.1", "0.3.0"))
    (root / "C" / ".git").write_text("gitdir: ../.git/modules/C\n")
    (root / "B" / "src").mkdir()
    (root / "B" / "src" / "x.py").write_text("print('b')\n")
    (root / "docs").mkdir()
    (root / "docs" / "readme").write_text("docs\n")
    return root


@pytest.fixture
def fake() -> FakeBackend:
    return FakeBackend()


def seed_stage(tree: DirTree, backend: FakeBackend, stage: Stage = Stage.DEV, user: str = "ann"):
    """Build every node locally and promote up to ``stage``; return {dir_id: tag}."""
    tags = {}
    for node in tree.nodes():
        node_dir = tree.abspath(node)
        ref = build_stage(node, user, backend=backend, node_dir=node_dir)
        if stage in (Stage.DEV, Stage.PROD):
            ref = promote(node, Stage.LOCAL, Stage.DEV, user, backend=backend, node_dir=node_dir)
        if stage is Stage.PROD:
            ref = promote(node, Stage.DEV, Stage.PROD, user, backend=backend, node_dir=node_dir)
        tags[node.dir_id] = ref.tag
    return tags


@pytest.fixture
def abc_tree(abc_repo) -> DirTree:
    return discover(abc_repo)


def git_init(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    subprocess.run(["git", "init", "-q", str(path)], check=True)
    subprocess.run(["git", "-C", str(path), "config", "user.name", "Ann Dev"], check=True)
    subprocess.run(["git", "-C", str(path), "config", "user.email", "ann@example.com"], check=True)
    return path


def dedent(s: str) -> str:
    return textwrap.dedent(s).lstrip("\n")


# -- acceptance reporting ------------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = f"{mark.args[0]}. {mark.args[1]}"
    if rep.when == "call" or rep.failed:
        status = "PASS" if rep.passed and rep.when == "call" else "FAIL"
        if _criteria.get(key, ("PASS",))[0] != "FAIL":
            _criteria[key] = (status, item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: int(k.split(".")[0])):
        terminalreporter.write_line(f"[{_criteria[key][0]}] {key}")
