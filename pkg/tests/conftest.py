import os

import pytest

MNIST_DIR = os.environ.get("SHF_MNIST_DIR", "/root/data/mnist")
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

# criterion number -> (description, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def mnist_available():
    return all(os.path.exists(os.path.join(MNIST_DIR, f)) for f in MNIST_FILES)


def mnist_path(name):
    return os.path.join(MNIST_DIR, name)


@pytest.fixture
def record_criterion():
    def record(number, description, passed, detail=""):
        ACCEPTANCE[number] = (description, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        description, passed, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
