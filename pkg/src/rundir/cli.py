"""``rundir`` command-line entry point.

Exit codes: 0 success, 1 domain failure (failed tests or hooks, link
conflicts, any rundir error), 2 usage error.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bootstrap import LINKS_FILE, LinkManifest, bootstrap_thin_env, default_env_path, sync_links
from .config import ContainerMode, Stage
from .discovery import DirNode, DirTree, container_for, discover, find_root, node_to_dict, render_tree
from .errors import InvalidValue, RootNotRunnable, RundirError
from .hooks import (
    POLICY_FILE,
    DockerizedChecker,
    changeset_from_git,
    iter_failures,
    load_changeset,
    load_policy,
    run_checks,
)
from .ignore import DEFAULT_PROFILE, ScannerProfile, compute_file_closure, emit_dockerignore
from .lifecycle import build_stage, promote
from .orchestrator import run_tests
from .runtime import Backend, FakeBackend, backend_from_env
from .tools import load_tool_spec, run_tool

log = logging.getLogger("rundir")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    root_help = "repository root (default: nearest ancestor with runnable_dir.yaml)"
    # SUPPRESS keeps a subcommand from overwriting a --root given before it.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", default=argparse.SUPPRESS, help=root_help)

    p = _Parser(prog="rundir", description="Runnable-directory build, test and policy tooling.")
    p.add_argument("--root", help=root_help)
    p.add_argument("--version", action="version", version=f"rundir {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("list", parents=[common], help="show the runnable directory tree")
    s.add_argument("--json", action="store_true")

    stage_choices = [st.value for st in Stage]

    s = sub.add_parser("build", parents=[common], help="build the local-stage image")
    s.add_argument("--node", help="dir_id (default: directory containing the cwd)")
    s.add_argument("--user")
    s.add_argument("--arch", help="requested architecture, recorded as metadata")

    s = sub.add_parser("promote", parents=[common], help="retag an image to the next stage")
    s.add_argument("--node")
    s.add_argument("--from", dest="from_stage", required=True, choices=stage_choices)
    s.add_argument("--to", dest="to_stage", required=True, choices=stage_choices)
    s.add_argument("--user")

    s = sub.add_parser("test", parents=[common], help="run every directory's tests in its own image")
    s.add_argument("--select", help="comma-separated dir_ids")
    s.add_argument("--stage", default=Stage.DEV.value, choices=stage_choices)
    s.add_argument("-j", "--jobs", type=int, default=1)
    s.add_argument("--fail-fast", action="store_true")
    s.add_argument("--user", help="image owner when --stage local")
    s.add_argument("--report-out")
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("exec", parents=[common], help="run a dockerized executable")
    s.add_argument("tool")
    s.add_argument("--tool-version")
    s.add_argument("--mode", default=ContainerMode.SIBLING.value,
                   choices=[m.value for m in ContainerMode])
    s.add_argument("argv", nargs="*", help="tool arguments; put them after -- if they start with -")

    s = sub.add_parser("bootstrap", parents=[common], help="create/join the thin environment")
    s.add_argument("--env-path")
    s.add_argument("--repo", help="git repository to register (default: root)")

    links = sub.add_parser("links", help="helpers link farm").add_subparsers(
        dest="links_command", metavar="ACTION", parser_class=_Parser)
    links.required = True
    s = links.add_parser("sync", parents=[common])
    s.add_argument("--helpers", default="helpers")
    s.add_argument("--manifest", help=f"default: <helpers>/{LINKS_FILE}")
    s.add_argument("--repair", action="store_true")
    s.add_argument("--json", action="store_true")

    hooks = sub.add_parser("hooks", help="policy hooks").add_subparsers(
        dest="hooks_command", metavar="ACTION", parser_class=_Parser)
    hooks.required = True
    s = hooks.add_parser("run", parents=[common])
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--changeset", help="ChangeSet JSON file")
    src.add_argument("--staged", action="store_true", help="read the change from the git index")
    s.add_argument("--policy", help=f"default: <root>/{POLICY_FILE}")
    s.add_argument("--json", action="store_true")

    ignore = sub.add_parser("ignore", help="dockerignore generation").add_subparsers(
        dest="ignore_command", metavar="ACTION", parser_class=_Parser)
    ignore.required = True
    s = ignore.add_parser("gen", parents=[common])
    s.add_argument("--entry", action="append", default=[])
    s.add_argument("--keep", action="append", default=[], help="extra always-kept path")
    s.add_argument("--profile")
    s.add_argument("--node", help="runnable directory whose defaults/nesting apply")
    s.add_argument("--out", required=True)
    return p


class _Ctx:
    def __init__(self, args, backend: Backend | None, cwd: Path):
        self.args = args
        self.cwd = cwd
        self._backend = backend
        self._tree: DirTree | None = None

    @property
    def backend(self) -> Backend:
        if self._backend is None:
            self._backend = backend_from_env()
        return self._backend

    @property
    def root(self) -> Path:
        if self.args.root:
            return (self.cwd / self.args.root).resolve()
        found = find_root(self.cwd)
        if found is None:
            raise RootNotRunnable(f"no runnable_dir.yaml in {self.cwd} or its ancestors")
        return found

    @property
    def tree(self) -> DirTree:
        if self._tree is None:
            self._tree = discover(self.root)
        return self._tree

    def node(self, dir_id: str | None) -> DirNode:
        if dir_id:
            if dir_id not in self.tree.index:
                raise InvalidValue(f"unknown dir_id {dir_id!r}")
            return self.tree.index[dir_id]
        return container_for(self.tree, self.cwd)

    def user(self) -> str:
        return self.args.user or os.environ.get("USER") or getpass.getuser()


def _emit(data, as_json: bool, text: str) -> None:
    if as_json:
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        sys.stdout.write(text)


def cmd_list(ctx: _Ctx) -> int:
    _emit(node_to_dict(ctx.tree.root), ctx.args.json, render_tree(ctx.tree))
    return EXIT_OK


def cmd_build(ctx: _Ctx) -> int:
    node = ctx.node(ctx.args.node)
    ref = build_stage(node, ctx.user(), backend=ctx.backend, node_dir=ctx.tree.abspath(node),
                      arch=ctx.args.arch)
    print(f"{ref.tag} {ctx.backend.digest(ref.tag)}")
    return EXIT_OK


def cmd_promote(ctx: _Ctx) -> int:
    a = ctx.args
    node = ctx.node(a.node)
    ref = promote(node, a.from_stage, a.to_stage, ctx.user(), backend=ctx.backend,
                  node_dir=ctx.tree.abspath(node))
    print(ref.tag)
    return EXIT_OK


def cmd_test(ctx: _Ctx) -> int:
    a = ctx.args
    selector = [s.strip() for s in a.select.split(",") if s.strip()] if a.select else None
    user = ctx.user() if a.stage == Stage.LOCAL.value else None
    report = run_tests(ctx.tree, ctx.backend, selector, a.stage, a.jobs,
                       fail_fast=a.fail_fast, user=user)
    if a.report_out:
        Path(a.report_out).write_text(report.to_json() + "\n")
    lines = []
    for e in report.entries:
        status = "SKIP" if e.skipped else ("PASS" if e.exit_code == 0 else f"FAIL({e.exit_code})")
        lines.append(f"{status:9} {e.node_id:20} {e.image}\n")
    lines.append(f"aggregate: {report.aggregate}\n")
    _emit(report.to_dict(), a.json, "".join(lines))
    return EXIT_OK if report.passed else EXIT_FAIL


def _repo_root(ctx: _Ctx) -> Path:
    # exec and hooks also work in repos without a runnable root
    if ctx.args.root:
        return (ctx.cwd / ctx.args.root).resolve()
    return find_root(ctx.cwd) or ctx.cwd


def cmd_exec(ctx: _Ctx) -> int:
    a = ctx.args
    root = _repo_root(ctx)
    spec = load_tool_spec(root, a.tool, a.tool_version)
    result = run_tool(spec, a.argv, root, a.mode, backend=ctx.backend)
    sys.stdout.write(result.stdout)
    sys.stderr.write(result.stderr)
    return EXIT_OK if result.exit_code == 0 else EXIT_FAIL


def cmd_bootstrap(ctx: _Ctx) -> int:
    a = ctx.args
    env_path = Path(a.env_path).expanduser() if a.env_path else default_env_path()
    repo = (ctx.cwd / a.repo).resolve() if a.repo else (
        (ctx.cwd / a.root).resolve() if a.root else ctx.cwd)
    manifest = bootstrap_thin_env(env_path, repo)
    print(f"thin environment: {manifest.env_path} ({len(manifest.consumers)} consumer(s))")
    return EXIT_OK


def cmd_links(ctx: _Ctx) -> int:
    a = ctx.args
    root = ctx.root
    helpers = (root / a.helpers).resolve()
    manifest = LinkManifest.load(Path(a.manifest) if a.manifest else helpers / LINKS_FILE)
    report = sync_links(helpers, root, manifest, repair=a.repair)
    text = (f"created {report.created}, repaired {report.repaired}, "
            f"unchanged {report.unchanged}, conflicts {len(report.conflicts)}\n")
    text += "".join(f"conflict: {t}: {r}\n" for t, r in report.conflicts)
    _emit(report.to_dict(), a.json, text)
    return EXIT_FAIL if report.conflicts else EXIT_OK


def cmd_hooks(ctx: _Ctx) -> int:
    a = ctx.args
    root = _repo_root(ctx)
    change = changeset_from_git(root) if a.staged else load_changeset(ctx.cwd / a.changeset)
    policy = load_policy(Path(a.policy) if a.policy else root / POLICY_FILE)
    report = run_checks(change, policy, DockerizedChecker(ctx.backend, root))
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name}\n" for r in report.results]
    lines += [f"  {item}\n" for item in iter_failures(report)]
    _emit(report.to_dict(), a.json, "".join(lines))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_ignore(ctx: _Ctx) -> int:
    a = ctx.args
    root = ctx.root
    node = ctx.node(a.node)

    def rel(p: str) -> str:
        return os.path.relpath((ctx.cwd / p).resolve(), root).replace(os.sep, "/")

    profile = ScannerProfile.load(a.profile) if a.profile else DEFAULT_PROFILE
    nested = [n.rel for n in node.walk() if n is not node]
    closure = compute_file_closure(root, [rel(e) for e in a.entry], profile, exclude_dirs=nested)
    prefix = "" if node.rel == "." else node.rel + "/"
    keep = {f"{prefix}runnable_dir.yaml", f"{prefix}{node.config.build_context}"}
    keep |= {rel(k) for k in a.keep}
    out = ctx.cwd / a.out
    out.write_text(emit_dockerignore(closure, keep))
    for w in closure.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {out} ({len(closure.files)} file(s) in closure)")
    return EXIT_OK


COMMANDS = {
    "list": cmd_list,
    "build": cmd_build,
    "promote": cmd_promote,
    "test": cmd_test,
    "exec": cmd_exec,
    "bootstrap": cmd_bootstrap,
    "links": cmd_links,
    "hooks": cmd_hooks,
    "ignore": cmd_ignore,
}


def main(argv: list[str] | None = None, *, backend: Backend | None = None,
         cwd: str | os.PathLike | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # Everything after the first "--" belongs to the dockerized tool.
    tail: list[str] = []
    if "--" in argv:
        cut = argv.index("--")
        argv, tail = argv[:cut], argv[cut + 1:]
    try:
        args = parser.parse_args(argv)
        if tail and args.command != "exec":
            parser.error("'--' is only accepted by exec")
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if args.command == "exec":
        args.argv = [*args.argv, *tail]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    state_file = os.environ.get("RUNDIR_FAKE_STATE") if backend is None else None
    ctx = _Ctx(args, backend, Path(cwd or os.getcwd()).resolve())
    try:
        return COMMANDS[args.command](ctx)
    except RundirError as exc:
        print(f"rundir: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if state_file and isinstance(ctx._backend, FakeBackend):
            ctx._backend.save(state_file)


if __name__ == "__main__":
    sys.exit(main())
