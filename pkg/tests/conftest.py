import numpy as np
import pytest
import torch

from ageus.synth import PhantomSpec, gen_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six complete synthetic studies on disk."""
    root = tmp_path_factory.mktemp("synth6")
    gen_dataset(PhantomSpec(seed=3), 6, root)
    return root


def disk_mask(shape, center, radius):
    rows, cols = np.indices(shape)
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2


def pair_error(found, truth) -> float:
    """Worst endpoint distance under the better of the two point matchings."""
    found, truth = np.asarray(found, float), np.asarray(truth, float)
    direct = np.hypot(*(found - truth).T).max()
    swapped = np.hypot(*(found - truth[::-1]).T).max()
    return float(min(direct, swapped))


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
