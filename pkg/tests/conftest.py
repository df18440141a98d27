import numpy as np
import pytest

from gnnrrm.scenario import PATHLOSS, RAYLEIGH, SystemConfig, make_dataset


def rayleigh_channels(K, nt=1, n=1, snr_db=10.0, seed=0, weighted=False):
    cfg = SystemConfig(num_pairs=K, num_tx_antennas=nt, channel_model=RAYLEIGH, snr_db=snr_db,
                       weighted=weighted)
    return [inst.channel for inst in make_dataset(cfg, n, seed)]


def pathloss_cfg(K=10, area=450.0, nt=1, D=500.0, weighted=True):
    return SystemConfig(num_pairs=K, num_tx_antennas=nt, channel_model=PATHLOSS, area_side=area,
                        dmin=10.0, dmax=50.0, edge_threshold=D, weighted=weighted)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
