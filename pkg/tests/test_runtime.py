import hashlib
import json
import sys
import threading
from pathlib import Path

import pytest

from rundir.config import ContainerMode
from rundir.errors import BuildFailed, ContextMissing, ImageMissing, InvalidValue, RuntimeUnavailable
from rundir.runtime import (
    HOST_SOCKET,
    ContainerSpec,
    EventKind,
    ExecBackend,
    FakeBackend,
    Mount,
    RunResult,
    backend_from_env,
)


@pytest.fixture
def context(tmp_path):
    ctx = tmp_path / "ctx"
    (ctx / "devops").mkdir(parents=True)
    (ctx / "devops" / "Dockerfile").write_text("FROM scratch\n")
    (ctx / "app.py").write_text("print(1)\n")
    (ctx / "pkg").mkdir()
    (ctx / "pkg" / "mod.py").write_text("x = 2\n")
    return ctx


def oracle_digest(context: Path, recipe: Path, tag: str) -> str:
    """Recompute the fake digest from its definition with a different traversal."""
    rows = sorted(
        (p.relative_to(context).as_posix(), hashlib.sha256(p.read_bytes()).hexdigest())
        for p in context.rglob("*")
        if p.is_file() and not {".git", ".rundir.lock"} & set(p.relative_to(context).parts)
    )
    blob = "".join(f"{r}\0{s}\n" for r, s in rows).encode()
    blob += b"\0recipe\0" + recipe.read_bytes() + b"\0tag\0" + tag.encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def test_digest_matches_oracle_and_is_stable(context):
    recipe = context / "devops" / "Dockerfile"
    a, b = FakeBackend(), FakeBackend()
    d1 = a.build_image(context, recipe, "app:dev-1.0.0")
    d2 = a.build_image(context, recipe, "app:dev-1.0.0")
    d3 = b.build_image(context, "devops/Dockerfile", "app:dev-1.0.0")
    assert d1 == d2 == d3 == oracle_digest(context, recipe, "app:dev-1.0.0")


def test_digest_tracks_content_and_ignores_lock(context):
    fb = FakeBackend()
    recipe = context / "devops" / "Dockerfile"
    d1 = fb.build_image(context, recipe, "t:1")
    (context / ".rundir.lock").write_text("")
    assert fb.build_image(context, recipe, "t:1") == d1
    (context / "app.py").write_text("print(2)\n")
    assert fb.build_image(context, recipe, "t:1") != d1


def test_recipe_outside_context(context, tmp_path):
    outside = tmp_path / "Dockerfile"
    outside.write_text("FROM scratch\n")
    with pytest.raises(ContextMissing):
        FakeBackend().build_image(context, outside, "t:1")
    with pytest.raises(ContextMissing):
        FakeBackend().build_image(tmp_path / "nope", outside, "t:1")
    with pytest.raises(ContextMissing):
        FakeBackend().build_image(context, "devops/Missing", "t:1")


def test_scripted_build_failure(context):
    fb = FakeBackend()
    fb.fail_build("app:dev-1.0.0", "boom")
    with pytest.raises(BuildFailed) as ei:
        fb.build_image(context, "devops/Dockerfile", "app:dev-1.0.0")
    assert "boom" in ei.value.output
    assert not fb.image_exists("app:dev-1.0.0")


def test_run_scripted_exit(fake):
    fake.add_image("img:1")
    res = fake.run_container(ContainerSpec("img:1", ("true",)))
    assert res == RunResult(0)
    fake.script_run("img:1", exit_code=3, stdout="out")
    assert fake.run_container(ContainerSpec("img:1", ("true",))).exit_code == 3


def test_run_unknown_image(fake):
    with pytest.raises(ImageMissing):
        fake.run_container(ContainerSpec("ghost:1", ("true",)))


def test_runtime_unavailable():
    fb = FakeBackend(available=False)
    with pytest.raises(RuntimeUnavailable):
        fb.run_container(ContainerSpec("x:1", ("true",)))


def test_two_sibling_runs_distinct_sequence(fake):
    fake.add_image("img:1")
    spec = ContainerSpec("img:1", ("true",), mode=ContainerMode.SIBLING)
    fake.run_container(spec)
    fake.run_container(spec)
    runs = [e for e in fake.events if e.kind is EventKind.RUN]
    assert len(runs) == 2
    assert runs[0].sequence < runs[1].sequence
    assert all(e.payload["host_socket"] == HOST_SOCKET for e in runs)
    seqs = [e.sequence for e in fake.events]
    assert seqs == sorted(set(seqs))


def test_child_mode_annotated_nested():
    fb = FakeBackend(context_name="parent-ci")
    fb.add_image("img:1")
    fb.run_container(ContainerSpec("img:1", ("true",), mode=ContainerMode.CHILD))
    (run,) = [e for e in fb.events if e.kind is EventKind.RUN]
    assert run.payload["nested_under"] == "parent-ci"
    assert "host_socket" not in run.payload


def test_remove_after_exit_leaves_no_container(fake):
    fake.add_image("img:1")
    before = fake.live_containers()
    fake.run_container(ContainerSpec("img:1", ("true",)))
    assert fake.live_containers() == before
    fake.run_container(ContainerSpec("img:1", ("sleep", "1"), remove_after_exit=False))
    (left,) = fake.live_containers()
    fake.remove_container(left)
    assert fake.live_containers() == set()


def test_remove_even_when_handler_raises(fake):
    fake.add_image("img:1")

    def explode(spec):
        raise RuntimeError("tool crashed")

    fake.on_run("img:1", explode)
    with pytest.raises(RuntimeError):
        fake.run_container(ContainerSpec("img:1", ("x",)))
    assert fake.live_containers() == set()


def test_retag_aliases_digest(fake, context):
    d = fake.build_image(context, "devops/Dockerfile", "app:local-ann-1.0.0")
    fake.retag("app:local-ann-1.0.0", "app:dev-1.0.0")
    assert fake.digest("app:dev-1.0.0") == d == fake.digest("app:local-ann-1.0.0")


def test_retag_event_counts(fake):
    fake.add_image("app:local-ann-1.0.0")
    fake.retag("app:local-ann-1.0.0", "app:dev-1.0.0")
    assert fake.count("retag") == 1 and fake.count("build") == 0


def test_retag_missing(fake):
    with pytest.raises(ImageMissing):
        fake.retag("nope:1", "nope:2")


def test_spec_invariants():
    with pytest.raises(InvalidValue):
        ContainerSpec("img:1", ())
    with pytest.raises(InvalidValue):
        ContainerSpec("img:1", ("true",), mounts=(Mount("relative/path", "/w"),))
    with pytest.raises(InvalidValue):
        RunResult(256)


def _script(fb: FakeBackend, context: Path):
    fb.build_image(context, "devops/Dockerfile", "a:1")
    fb.retag("a:1", "a:2")
    fb.run_container(ContainerSpec("a:2", ("pytest",), mounts=(Mount(str(context), "/workspace"),)))
    fb.run_container(ContainerSpec("a:1", ("true",), mode=ContainerMode.CHILD))
    return [e.to_dict() for e in fb.events]


def test_event_log_is_a_function_of_calls(context):
    assert _script(FakeBackend(), context) == _script(FakeBackend(), context)


def test_concurrent_runs_keep_log_consistent(fake):
    fake.add_image("img:1")
    fake.script_run("img:1", delay=0.002)
    threads = [threading.Thread(target=fake.run_container, args=(ContainerSpec("img:1", ("t",)),))
               for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seqs = [e.sequence for e in fake.events]
    assert seqs == list(range(1, 33))
    assert fake.count("run") == 16 and fake.live_containers() == set()


def test_state_round_trip(tmp_path, context):
    fb = FakeBackend()
    fb.build_image(context, "devops/Dockerfile", "a:1")
    fb.script_run("a:1", exit_code=4, stdout="x")
    fb.fail_build("b:1")
    state = tmp_path / "state.json"
    fb.save(state)
    again = FakeBackend.load(state)
    assert again.to_state() == fb.to_state()
    assert again.run_container(ContainerSpec("a:1", ("t",))).exit_code == 4
    assert again.events[-1].sequence == fb.events[-1].sequence + 2


def test_backend_from_env(tmp_path):
    assert isinstance(backend_from_env({"RUNDIR_FAKE_STATE": str(tmp_path / "s.json")}), FakeBackend)
    be = backend_from_env({"RUNDIR_CONTAINER_CLI": "podman"})
    assert isinstance(be, ExecBackend) and be.binary == "podman"


# -- exec backend against a stub CLI ---------------------------------------

STUB = r'''
import json, os, sys
state_path = os.environ["STUB_STATE"]
state = json.load(open(state_path)) if os.path.exists(state_path) else {"images": [], "calls": []}
args = sys.argv[1:]
state["calls"].append(args)
code = 0
if args[:2] == ["image", "inspect"]:
    tag = args[-1]
    code = 0 if tag in state["images"] else 1
    if code == 0 and "--format" in args:
        print("sha256:stub-" + tag)
elif args[0] == "build":
    state["images"].append(args[args.index("-t") + 1])
elif args[0] == "tag":
    state["images"].append(args[2])
elif args[0] == "run":
    print("hello from", args[-1])
    code = 7 if args[-1] == "fail" else 0
elif args[0] == "ps":
    pass
json.dump(state, open(state_path, "w"))
sys.exit(code)
'''


@pytest.fixture
def stub_cli(tmp_path, monkeypatch):
    exe = tmp_path / "stubdocker"
    exe.write_text(f"#!{sys.executable}\n{STUB}")
    exe.chmod(0o755)
    state = tmp_path / "stub.json"
    monkeypatch.setenv("STUB_STATE", str(state))
    monkeypatch.setenv("RUNDIR_CONTAINER_CLI", str(exe))
    return lambda: json.loads(state.read_text())["calls"]


def test_exec_backend_cli_arguments(stub_cli, context):
    be = ExecBackend()
    digest = be.build_image(context, "devops/Dockerfile", "app:local-ann-1.0.0", arch="arm64")
    assert digest == "sha256:stub-app:local-ann-1.0.0"
    be.retag("app:local-ann-1.0.0", "app:dev-1.0.0")
    res = be.run_container(ContainerSpec(
        "app:dev-1.0.0", ("pytest", "-q"), mounts=(Mount(str(context), "/workspace", True),),
        env={"B": "2", "A": "1"}, workdir="/workspace",
    ))
    assert res.exit_code == 0 and "hello from -q" in res.stdout
    calls = stub_cli()
    build = next(c for c in calls if c[0] == "build")
    assert build[-1] == str(context.resolve())
    assert "--label" in build and "rundir.arch=arm64" in build
    assert ["tag", "app:local-ann-1.0.0", "app:dev-1.0.0"] in calls
    run = next(c for c in calls if c[0] == "run")
    assert run == [
        "run", "--rm", "-v", f"{HOST_SOCKET}:{HOST_SOCKET}",
        "-v", f"{context}:/workspace:ro", "-e", "A=1", "-e", "B=2", "-w", "/workspace",
        "app:dev-1.0.0", "pytest", "-q",
    ]
    assert [e.kind for e in be.events] == [EventKind.BUILD, EventKind.RETAG, EventKind.RUN]


def test_exec_backend_child_mode_and_exit_code(stub_cli, context):
    be = ExecBackend()
    be.build_image(context, "devops/Dockerfile", "t:1")
    res = be.run_container(ContainerSpec("t:1", ("fail",), mode=ContainerMode.CHILD, remove_after_exit=False))
    assert res.exit_code == 7
    run = next(c for c in stub_cli() if c[0] == "run")
    assert "--privileged" in run and "--rm" not in run
    assert f"{HOST_SOCKET}:{HOST_SOCKET}" not in run


def test_exec_backend_missing_image(stub_cli):
    with pytest.raises(ImageMissing):
        ExecBackend().run_container(ContainerSpec("ghost:1", ("true",)))


def test_exec_backend_missing_binary(context):
    be = ExecBackend("definitely-not-a-container-cli")
    with pytest.raises(RuntimeUnavailable):
        be.build_image(context, "devops/Dockerfile", "t:1")
