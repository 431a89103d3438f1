import numpy as np
import pytest

from recttt import ops
from recttt.config import from_dict

TINY = {
    "seeds": [0],
    "data": {"n_train": 96, "n_test": 32, "corruptions": ["gaussian_noise", "brightness"]},
    "model": {"channels": [4, 8, 8, 8]},
    "train": {"epochs": 1, "milestones": [], "batch_size": 32,
              "pretrain_epochs": 1, "pretrain_milestones": []},
    "adapt": {"iterations": 2, "batch_size": 16},
    "sweep": {"iterations": [0, 1], "batch_sizes": [8, 16], "depths": [1, 3]},
}


@pytest.fixture
def tiny_cfg(tmp_path):
    return from_dict({**TINY, "out_dir": str(tmp_path / "run")})


@pytest.fixture
def rng_np():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "torch"])
def conv_backend(request):
    if request.param == "torch" and ops.torch is None:
        pytest.skip("torch not installed")
    previous = ops.conv_backend()
    ops.set_conv_backend(request.param)
    yield request.param
    ops.set_conv_backend(previous)


# -- acceptance summary: one PASS/FAIL line per criterion ------------------------------

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        status = "PASS" if report.outcome == "passed" else ("SKIP" if report.outcome == "skipped" else "FAIL")
        if name not in _CRITERIA or status != "PASS":
            _CRITERIA[name] = (status, detail or _CRITERIA.get(name, ("", ""))[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        number = name.split("_")[2]
        terminalreporter.write_line(f"criterion {int(number):2d}: {status}  {detail}".rstrip())
