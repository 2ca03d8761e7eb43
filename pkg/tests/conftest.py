import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("zc", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("zc")

# criterion id -> list of (part, status, detail); status in PASS / FAIL / SKIP
ACCEPTANCE: dict[str, list[tuple[str, str, str]]] = {}


@pytest.fixture
def record_criterion():
    def record(criterion: str, part: str, status, detail: str = "") -> None:
        if isinstance(status, (bool, np.bool_)):
            status = "PASS" if status else "FAIL"
        ACCEPTANCE.setdefault(criterion, []).append((part, status, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE, key=lambda c: int(c)):
        parts = ACCEPTANCE[criterion]
        statuses = {s for _, s, _ in parts}
        overall = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        detail = "; ".join(f"{p}: {s}{' (' + d + ')' if d else ''}" for p, s, d in parts)
        terminalreporter.write_line(f"{overall} criterion {criterion}: {detail}")


@pytest.fixture(autouse=True)
def _no_output_override(monkeypatch):
    monkeypatch.delenv("ZC_OUTPUT_DIR", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
