import re

import numpy as np
import pytest

from direct_pretrain.data.coco import CocoDataset
from direct_pretrain.harness.synthetic import SyntheticSpec, generate_shapes_dataset

# criterion number -> "PASS ..." / "FAIL ..." line, filled by the acceptance suite
VERDICTS = {}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_shapes_dataset(SyntheticSpec(num_images=10, image_size=(96, 80), seed=3), root)
    return CocoDataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the criterion named in the test function.

    A test that raises before calling ``record`` is reported as FAIL.
    """
    num = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))

    def record(title, ok, detail=""):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        VERDICTS[num] = line
        print(line)
        assert ok, line

    yield record
    if num not in VERDICTS:
        VERDICTS[num] = f"criterion {num:>2}: FAIL  (raised before a verdict was recorded)"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[num])
