from __future__ import annotations

import numpy as np
import pytest

from lambo.mec import GenConfig, MecInstance, PhysParams

# SNR 1023 at these constants -> 1e7 bit/s uplink
UNIT_RATE_GAIN = 1.023e-7


def make_tiny(n_ues: int = 2, capacity: float = 1.5e10, gain: float = UNIT_RATE_GAIN,
              **phys) -> MecInstance:
    """n identical UEs (D=2e6 b, C=1e9, f_loc=1e9) around one server at rate 1e7 b/s."""
    return MecInstance(
        ue_pos=np.full((n_ues, 2), 10.0),
        data_bits=np.full(n_ues, 2e6),
        cycles=np.full(n_ues, 1e9),
        f_local=np.full(n_ues, 1e9),
        server_pos=np.array([[12.0, 10.0]]),
        capacity=np.array([capacity]),
        gains=np.full((n_ues, 1), gain),
        phys=PhysParams(**phys),
    )


@pytest.fixture
def tiny():
    return make_tiny(2)


@pytest.fixture
def one_ue():
    return make_tiny(1)


@pytest.fixture
def small_gen():
    return GenConfig(n_ues=4, n_servers=2)


# -- acceptance report ---------------------------------------------------------------------

ACCEPTANCE_CRITERIA = range(1, 10)
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        passed, detail = ACCEPTANCE_RESULTS.get(n, (None, "not run"))
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"criterion {n}: {status} | {detail}")
