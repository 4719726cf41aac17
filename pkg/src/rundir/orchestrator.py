"""Recursive test execution: every runnable directory's tests in its own image."""

from __future__ import annotations

import json
import logging
import shlex
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

from .config import ImageRef, Stage
from .discovery import DirNode, DirTree
from .errors import ImageMissing, InvalidValue, UnknownSelector
from .lifecycle import resolve_for
from .runtime import Backend, ContainerSpec, Mount, RunResult

log = logging.getLogger(__name__)

WORKSPACE = "/workspace"
EXCERPT_CHARS = 2000


@dataclass(frozen=True)
class TestEntry:
    __test__ = False

    node_id: str
    path: str
    image: str
    exit_code: int | None
    duration_ms: int
    output: str
    skipped: bool = False


@dataclass(frozen=True)
class TestReport:
    __test__ = False

    entries: tuple[TestEntry, ...]
    aggregate: str = field(init=False)

    def __post_init__(self) -> None:
        ok = all(e.exit_code == 0 for e in self.entries)
        object.__setattr__(self, "aggregate", "pass" if ok else "fail")

    @property
    def passed(self) -> bool:
        return self.aggregate == "pass"

    def to_dict(self) -> dict[str, Any]:
        return {"aggregate": self.aggregate, "entries": [asdict(e) for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TestReport":
        report = cls(tuple(TestEntry(**e) for e in data["entries"]))
        if report.aggregate != data.get("aggregate", report.aggregate):
            raise InvalidValue("report aggregate disagrees with its entries")
        return report


def _excerpt(result: RunResult) -> str:
    text = result.stdout + result.stderr
    return text[-EXCERPT_CHARS:]


def select_nodes(tree: DirTree, selector: Iterable[str] | None) -> list[DirNode]:
    if selector is None:
        return tree.nodes()
    wanted = set(selector)
    for dir_id in sorted(wanted):
        if dir_id not in tree.index:
            raise UnknownSelector(dir_id)
    return [n for n in tree.nodes() if n.dir_id in wanted]


def node_test_spec(tree: DirTree, node: DirNode, image: ImageRef) -> ContainerSpec:
    return ContainerSpec(
        image=image.tag,
        command=tuple(shlex.split(node.config.test_command)),
        mounts=(Mount(str(tree.abspath(node)), WORKSPACE),),
        workdir=WORKSPACE,
        mode=node.config.container_mode,
        remove_after_exit=True,
    )


def run_tests(
    tree: DirTree,
    backend: Backend,
    selector: Iterable[str] | None = None,
    stage: Stage | str = Stage.DEV,
    parallelism: int = 1,
    *,
    fail_fast: bool = False,
    user: str | None = None,
) -> TestReport:
    """Run each selected directory's ``test_command`` in that directory's stage image.

    Nodes run flat, never nested inside a parent's container. The report is
    ordered by path whatever the completion order. With ``fail_fast`` no new
    node is started after a failure; unstarted nodes are reported as skipped.
    """
    if parallelism < 1:
        raise InvalidValue(f"parallelism must be positive, got {parallelism}")
    stage = Stage(stage)
    nodes = select_nodes(tree, selector)
    refs = {}
    for node in nodes:
        ref = resolve_for(tree.abspath(node), node, stage, user)
        if not backend.image_exists(ref.tag):
            raise ImageMissing(ref.tag, node.dir_id)
        refs[node.dir_id] = ref

    results: dict[str, RunResult] = {}
    pending = list(nodes)
    failed = False
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        in_flight: dict[Future, DirNode] = {}
        while pending or in_flight:
            while pending and len(in_flight) < parallelism and not (fail_fast and failed):
                node = pending.pop(0)
                spec = node_test_spec(tree, node, refs[node.dir_id])
                log.info("testing %s in %s", node.dir_id, spec.image)
                in_flight[pool.submit(backend.run_container, spec)] = node
            if not in_flight:
                break
            done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            for fut in done:
                node = in_flight.pop(fut)
                results[node.dir_id] = fut.result()
                failed = failed or results[node.dir_id].exit_code != 0

    entries = []
    for node in nodes:
        res = results.get(node.dir_id)
        if res is None:
            entries.append(TestEntry(node.dir_id, node.rel, refs[node.dir_id].tag, None, 0, "", True))
        else:
            entries.append(TestEntry(node.dir_id, node.rel, refs[node.dir_id].tag,
                                     res.exit_code, res.duration_ms, _excerpt(res)))
    return TestReport(tuple(entries))
