import numpy as np
import pytest

from biomeshift import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(rng):
    from biomeshift.data import TileDataset

    labels = rng.integers(0, 3, (3, 8, 8)).astype(np.uint8)
    labels[0, 0, 0] = 255
    return TileDataset(biome_id="tiny", tile_ids=["t0", "t1", "t2"],
                       images=rng.random((3, 8, 8, 2)).astype(np.float32), labels=labels, n_classes=3,
                       class_names=["a", "b", "c"])


@pytest.fixture
def tiny_dataset_path(tmp_path, tiny_dataset):
    from biomeshift.data import write_dataset

    path = tmp_path / "tiny.svds"
    write_dataset(tiny_dataset, path)
    return path


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
