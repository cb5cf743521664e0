import numpy as np
import pytest

from otassign.data import write_idx


def mnist_arrays():
    """The 5000-image MNIST subset bundled with mlxtend, as uint8 images and labels."""
    mlx = pytest.importorskip("mlxtend.data")
    x, y = mlx.mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    images, labels = mnist_arrays()
    root = tmp_path_factory.mktemp("mnist")
    write_idx(root / "images-idx3-ubyte", images)
    write_idx(root / "labels-idx1-ubyte", labels)
    return root / "images-idx3-ubyte", root / "labels-idx1-ubyte"


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
