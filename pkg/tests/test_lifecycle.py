import itertools

import pytest
from conftest import make_rundir

from rundir.config import Stage, Version
from rundir.discovery import discover
from rundir.errors import BuildFailed, EmptyChangelog, IllegalTransition, ImageMissing
from rundir.lifecycle import LEGAL_TRANSITIONS, StageTransition, build_stage, promote
from rundir.runtime import EventKind, FakeBackend


@pytest.fixture
def app(tmp_path):
    root = make_rundir(tmp_path / "app", "app", "app", ("1.2.0", "1.1.0"))
    tree = discover(root)
    return tree.root, tree.abspath(tree.root)


def test_build_stage_creates_local_image(app, fake):
    node, path = app
    ref = build_stage(node, "ann", backend=fake, node_dir=path)
    assert ref.tag == "app:local-ann-1.2.0"
    assert fake.image_exists("app:local-ann-1.2.0")
    (build,) = [e for e in fake.events if e.kind is EventKind.BUILD]
    assert build.payload["recipe"] == str(path / "devops" / "Dockerfile")
    assert build.payload["context"] == str(path)


def test_missing_changelog(app, fake):
    node, path = app
    (path / "devops" / "changelog.yaml").unlink()
    with pytest.raises(EmptyChangelog):
        build_stage(node, "ann", backend=fake, node_dir=path)
    assert fake.count("build") == 0


def test_empty_changelog_file(app, fake):
    node, path = app
    (path / "devops" / "changelog.yaml").write_text("")
    with pytest.raises(EmptyChangelog):
        build_stage(node, "ann", backend=fake, node_dir=path)


def test_rebuild_same_digest(app, fake):
    node, path = app
    build_stage(node, "ann", backend=fake, node_dir=path)
    d1 = fake.digest("app:local-ann-1.2.0")
    build_stage(node, "ann", backend=fake, node_dir=path)
    assert fake.digest("app:local-ann-1.2.0") == d1
    assert fake.count("build") == 2


def test_build_failure_propagates(app, fake):
    node, path = app
    fake.fail_build("app:local-ann-1.2.0")
    with pytest.raises(BuildFailed):
        build_stage(node, "ann", backend=fake, node_dir=path)


def test_promote_local_to_dev_keeps_digest(app, fake):
    node, path = app
    build_stage(node, "ann", backend=fake, node_dir=path)
    ref = promote(node, Stage.LOCAL, Stage.DEV, "ann", backend=fake, node_dir=path)
    assert ref.tag == "app:dev-1.2.0"
    assert fake.digest("app:dev-1.2.0") == fake.digest("app:local-ann-1.2.0")


def test_promote_skipping_dev_rejected(app, fake):
    node, path = app
    build_stage(node, "ann", backend=fake, node_dir=path)
    with pytest.raises(IllegalTransition):
        promote(node, Stage.LOCAL, Stage.PROD, "ann", backend=fake, node_dir=path)
    assert fake.count("retag") == 0


def test_promote_missing_source(app, fake):
    node, path = app
    with pytest.raises(ImageMissing):
        promote(node, Stage.DEV, Stage.PROD, backend=fake, node_dir=path)


def test_promote_other_users_local_image_missing(app, fake):
    node, path = app
    build_stage(node, "ann", backend=fake, node_dir=path)
    with pytest.raises(ImageMissing):
        promote(node, Stage.LOCAL, Stage.DEV, "bob", backend=fake, node_dir=path)


def test_full_progression_event_counts(app, fake):
    node, path = app
    build_stage(node, "ann", backend=fake, node_dir=path)
    promote(node, "local", "dev", "ann", backend=fake, node_dir=path)
    prod = promote(node, "dev", "prod", "ann", backend=fake, node_dir=path)
    assert fake.count(EventKind.BUILD) == 1
    assert fake.count(EventKind.RETAG) == 2
    digests = {fake.digest(t) for t in ("app:local-ann-1.2.0", "app:dev-1.2.0", prod.tag)}
    assert len(digests) == 1


def test_registry_applies_to_shared_stages(tmp_path, fake):
    root = make_rundir(tmp_path / "r", "svc", "svc", ("2.0.0",), registry="reg.example")
    tree = discover(root)
    build_stage(tree.root, "ann", backend=fake, node_dir=root)
    ref = promote(tree.root, "local", "dev", "ann", backend=fake, node_dir=root)
    assert ref.tag == "reg.example/svc:dev-2.0.0"


def test_new_version_needs_changelog_entry(app, fake):
    node, path = app
    build_stage(node, "ann", backend=fake, node_dir=path)
    promote(node, "local", "dev", "ann", backend=fake, node_dir=path)
    log = path / "devops" / "changelog.yaml"
    log.write_text("- {version: 1.3.0, date: 2024-09-01, note: bump}\n" + log.read_text())
    # dev has 1.2.0 only; 1.3.0 must be built locally before it can be promoted
    with pytest.raises(ImageMissing):
        promote(node, "dev", "prod", backend=fake, node_dir=path)


@pytest.mark.parametrize("pair", list(itertools.product(Stage, Stage)))
def test_transition_table(pair):
    src, dst = pair
    if pair in LEGAL_TRANSITIONS:
        StageTransition("n", src, dst, Version(1, 0, 0), "ann")
    else:
        with pytest.raises(IllegalTransition):
            StageTransition("n", src, dst, Version(1, 0, 0), "ann")


def test_stage_monotonicity_over_random_sequences(app):
    """Any successful transition history for one version visits local, dev, prod in order."""
    node, path = app
    for seq in itertools.product([(Stage.LOCAL, Stage.DEV), (Stage.DEV, Stage.PROD),
                                  (Stage.LOCAL, Stage.PROD), (Stage.PROD, Stage.DEV)], repeat=3):
        fb = FakeBackend()
        build_stage(node, "ann", backend=fb, node_dir=path)
        reached = [Stage.LOCAL]
        for src, dst in seq:
            try:
                promote(node, src, dst, "ann", backend=fb, node_dir=path)
            except (IllegalTransition, ImageMissing):
                continue
            if dst not in reached:
                reached.append(dst)
        order = [Stage.LOCAL, Stage.DEV, Stage.PROD]
        assert reached == order[: len(reached)]
