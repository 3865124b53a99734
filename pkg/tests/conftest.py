import os
from pathlib import Path

import numpy as np
import pytest

from rigl.arch import CONV, FC, ArchitectureSpec, LayerSpec, mlp
from rigl.data import load_mnist

REPO = Path(__file__).resolve().parent.parent
ACCEPTANCE_LINES = []


def mnist_dir():
    root = os.environ.get("RIGL_DATA_ROOT")
    base = Path(root) if root else REPO / "data"
    return base / "mnist"


def have_mnist():
    return (mnist_dir() / "train-images-idx3-ubyte").exists() or \
        (mnist_dir() / "train-images-idx3-ubyte.gz").exists()


@pytest.fixture(scope="session")
def mnist():
    if not have_mnist():
        pytest.skip(f"MNIST not found under {mnist_dir()}; set RIGL_DATA_ROOT")
    return load_mnist(mnist_dir(), "train"), load_mnist(mnist_dir(), "test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_mlp(sizes=(12, 8, 6, 4)):
    return mlp("tiny", list(sizes), input_shape=(1, 1, sizes[0]))


def tiny_conv():
    layers = (
        LayerSpec(CONV, 2, 3, 3, 3, pool=2, name="c1"),
        LayerSpec(CONV, 3, 4, 3, 3, name="c2"),
        LayerSpec(FC, 2 * 2 * 4, 5, name="f1"),
        LayerSpec(FC, 5, 3, name="f2"),
    )
    return ArchitectureSpec("tiny-conv", (4, 4, 2), layers)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
