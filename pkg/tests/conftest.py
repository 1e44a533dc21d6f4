from pathlib import Path

from pytest import fixture

from modecascade.config import Config
from modecascade.planner import plan_2d
from modecascade.spectrum import build_line_spectrum

THISDIR = Path(__file__).resolve().parent


@fixture
def config():
    return Config()


@fixture
def spectrum_r5():
    # uphill line (5, 0) -> (0, 6)
    return build_line_spectrum((5, 0), (-5, 6), "uphill")


@fixture
def spectrum_r8():
    return build_line_spectrum((8, 0), (-8, 9), "uphill")


@fixture
def downhill_spectrum():
    # second step of a 4D block from (0, 0, 1) with p = 10
    return build_line_spectrum((0, 0, 1, -11), (0, -1, 0, 21), "downhill")


@fixture
def step_r5(config):
    return plan_2d(5, config)


@fixture
def config_file():
    return THISDIR / "data" / "cascade.cfg"
