import hashlib
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from m2t2.datagen import BundleError, GenConfig, deserialize, generate_scene, serialize  # noqa: E402

REPO = Path(__file__).resolve().parents[1]
SRC = REPO / "src" / "m2t2"
DATA_SOURCES = ("datagen/*.py", "geometry.py", "primitives.py", "collision.py")


def cache_dir() -> Path:
    """Where expensive artifacts (scene sets, trained checkpoints) are kept between runs."""
    d = Path(os.environ.get("M2T2_TEST_CACHE", REPO / ".test_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def source_hash(patterns=("**/*.py",)) -> str:
    """Digest of the package sources matching ``patterns``; cached artifacts are keyed on it."""
    h = hashlib.sha256()
    files = sorted({f for pat in patterns for f in SRC.glob(pat)})
    for f in files:
        h.update(str(f.relative_to(SRC)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def keyed_dir(kind: str, key: str) -> Path:
    """``cache/kind/key``; stale siblings from older sources are removed."""
    root = cache_dir() / kind
    root.mkdir(exist_ok=True)
    for old in root.iterdir():
        if old.name != key:
            shutil.rmtree(old, ignore_errors=True)
    d = root / key
    d.mkdir(exist_ok=True)
    return d


def cached_scenes(name: str, seeds, cfg: GenConfig | None = None) -> Path:
    """Directory holding bundles for ``seeds``, generating only those missing or unreadable."""
    cfg = cfg or GenConfig()
    key = hashlib.sha256((source_hash(DATA_SOURCES) + repr(cfg.to_dict())).encode()).hexdigest()[:16]
    root = keyed_dir(f"scenes_{name}", key)
    for seed in seeds:
        path = root / f"scene_{seed:05d}"
        try:
            deserialize(path)
        except BundleError:
            shutil.rmtree(path, ignore_errors=True)
            serialize(generate_scene(seed, cfg), path)
    return root


@pytest.fixture(scope="session")
def scene0():
    return generate_scene(0, GenConfig())


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    """Two default scenes on disk."""
    root = tmp_path_factory.mktemp("scenes")
    for seed in (0, 1):
        serialize(generate_scene(seed, GenConfig()), root / f"scene_{seed:05d}")
    return root


@pytest.fixture(scope="session")
def scene1(scene_dir):
    return deserialize(scene_dir / "scene_00001")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---- acceptance report ---------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria 1-10 (slow on a cold cache)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
