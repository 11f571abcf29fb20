import numpy as np
import pytest

BEHAVIORS = {"click": 1.0, "like": 2.0, "share": 4.0}


def write_log(path, n_users=40, n_items=30, per_user=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = list(BEHAVIORS)
    lines = ["user_id,item_id,behavior,timestamp"]
    for u in range(n_users):
        group = u % 3
        pool = np.arange(group * 10, group * 10 + 10)
        for t, item in enumerate(rng.choice(pool, size=per_user, replace=False)):
            lines.append(f"user{u},item{item},{labels[rng.integers(3)]},{1000 + 7 * t + u}")
    # one item nobody touches keeps every user away from a full row
    lines.append(f"user0,item{n_items - 1},click,1")
    path.write_text("\n".join(lines) + "\n")
    return path


CONFIG = """\
[data]
path = log.csv
format = generic_csv
split = 0.7, 0.1, 0.2
split_seed = 3

[behaviors]
click = 1.0
like = 2.0
share = 4.0

[model]
embed_dim = 8
final_dim = 6
n_layers = 2
max_seq_len = 10

[training]
n_negatives = 3
epochs = 6
patience = 3
seed = 1

[eval]
k = 5, 10

[output]
dir = run
"""


@pytest.fixture
def tiny_config(tmp_path):
    write_log(tmp_path / "log.csv")
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG)
    return path


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the final summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        CRITERIA[number] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
