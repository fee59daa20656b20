import pytest

from rddlab.config import config_from_dict

TINY = {
    "scene": {"image_size": 16, "shapes_min": 1, "shapes_max": 2},
    "total_iters": 12,
    "eval_every": 6,
    "batch_size": 4,
    "eval_batch_size": 8,
    "train_size": 16,
    "val_size": 8,
    "seeds": [0, 1],
}


@pytest.fixture
def tiny_config(tmp_path):
    return config_from_dict({**TINY, "output_dir": str(tmp_path / "runs")})


@pytest.fixture
def tiny_teacher(tiny_config, tmp_path):
    from rddlab import harness

    return harness.pretrain_teacher(tiny_config, 0, tmp_path / "teacher")


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def verdict():
    def record(number: int, status: str, detail: str = "") -> None:
        ACCEPTANCE[number] = (status, detail)
        print(f"[acceptance {number}] {status} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status:<9} {detail}")
