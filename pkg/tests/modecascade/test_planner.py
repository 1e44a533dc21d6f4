import pytest

from modecascade.config import Config
from modecascade.errors import AssumptionFail
from modecascade.planner import (
    CascadePlan,
    TransferStep,
    build_cascade,
    chain_ok,
    ell_orthogonal,
    is_sum_of_three_squares,
    plan_2d,
    plan_3d,
    plan_4d,
    separation_gap,
    sphere_geometry_check,
    three_square_lift,
    trace_norms,
)
from modecascade.spectrum import Direction, norm2


def test_plan_2d(step_r5: TransferStep):
    """Test the uphill step (5, 0) -> (0, 6).

    Parameters
    ----------
    step_r5 : TransferStep
        The planned step.
    """
    assert step_r5.a == (5, 0)
    assert step_r5.b == (-5, 6)
    assert step_r5.c == (0, 6)
    assert step_r5.direction is Direction.UPHILL
    assert step_r5.assumptions.passed
    assert step_r5.support_radius2 == 25
    assert ell_orthogonal(step_r5)
    assert separation_gap(step_r5, 3) == 4 * 3 * 36
    with pytest.raises(AssumptionFail):
        plan_2d(3)
    with pytest.raises(ValueError):
        plan_2d(1)


def test_sphere_geometry(step_r5: TransferStep, config: Config):
    """Test the per-instance sphere geometry items.

    Parameters
    ----------
    step_r5 : TransferStep
        The planned step.
    config : Config
        Default configuration.
    """
    check = sphere_geometry_check(step_r5)
    assert check.k_range == (-config.geometry_k, config.geometry_k + 1)
    narrow = sphere_geometry_check(step_r5, config=config.replace(geometry_k=6))
    assert narrow.k_range == (-6, 7)
    assert narrow.to_dict()["k_range"] == [-6, 7]
    assert narrow.K <= check.K
    assert sphere_geometry_check(step_r5, k_range=(-3, 4)).k_range == (-3, 4)
    assert check.passed
    assert 1 < check.K < float("inf")
    assert check.delta == pytest.approx(0.2)
    assert set(check.to_dict()["items"]) == {"difference_nonzero", "angle", "growth", "separation"}


def test_three_squares():
    """Test the three-square lift."""
    assert not is_sum_of_three_squares(7)
    assert not is_sum_of_three_squares(28)
    assert not is_sum_of_three_squares(112)
    assert is_sum_of_three_squares(8)
    assert three_square_lift(25) == ((0, 1, 5), 26)
    assert three_square_lift(6) == ((0, 2, 2), 8)
    for n in range(1, 200):
        (x, y, z), m = three_square_lift(n)
        assert n < m <= n + 8
        assert x * x + y * y + z * z == m
        assert 0 <= x <= y <= z


def test_three_squares_brute_force():
    """Test the lift for n ≤ 10⁴ against an enumeration of x ≤ y ≤ z ≤ 101."""
    smallest: dict[int, tuple[int, int, int]] = {}
    for x in range(102):
        for y in range(x, 102):
            for z in range(y, 102):
                smallest.setdefault(x * x + y * y + z * z, (x, y, z))
    limit = 10**4
    for n in range(limit + 9):
        assert is_sum_of_three_squares(n) == (n in smallest)
    for n in range(1, limit + 1):
        m = next(m for m in range(n + 1, n + 9) if m in smallest)
        assert three_square_lift(n) == (smallest[m], m)


def test_plan_3d():
    """Test one 3D step from (5, 0, 0)."""
    step = plan_3d((5, 0, 0))
    assert step.a == (0, 0, 5)
    assert step.c == (0, -5, 1)
    assert norm2(step.lab_c) == 26
    assert step.lab_a == (5, 0, 0)
    assert step.spectrum.L == 1
    assert step.spectrum[-1] == 81


def test_plan_4d():
    """Test the two steps of a 4D block."""
    uphill, downhill = plan_4d((0, 0, 1), 10)
    assert uphill.direction is Direction.UPHILL
    assert uphill.spectrum[-1] == 41
    assert uphill.spectrum.L == 21
    assert downhill.direction is Direction.DOWNHILL
    assert downhill.a == (0, 0, 1, -11)
    assert downhill.c == (0, -1, 1, 10)
    assert norm2(downhill.c) < norm2(downhill.a)
    assert uphill.lab_c == downhill.lab_a
    with pytest.raises(ValueError):
        plan_4d((0, 0, 1), 9)


def test_build_cascade(config: Config):
    """Test chaining, mode traces and the plan's dictionary form.

    Parameters
    ----------
    config : Config
        Default configuration.
    """
    plan = build_cascade(2, (5, 0), 2, config)
    assert len(plan.steps) == 4
    assert plan.blocks == (0, 0, 1, 1)
    assert plan.mode_trace == ((5, 0), (7, 0), (9, 0))
    assert trace_norms(plan) == [25, 49, 81]
    assert chain_ok(plan)
    assert plan.steps[1].lab_a == (0, 6)
    assert plan.steps[1].lab_c == (7, 0)

    rebuilt = CascadePlan.from_dict(plan.to_dict(), config)
    assert [s.spectrum.d for s in rebuilt.steps] == [s.spectrum.d for s in plan.steps]
    assert rebuilt.mode_trace == plan.mode_trace

    plan3 = build_cascade(3, (1, 2, 2), 3, config)
    assert [norm2(m) for m in plan3.mode_trace] == [9, 10, 11, 12]
    assert chain_ok(plan3)

    plan4 = build_cascade(4, (0, 0, 1), 1, config)
    assert plan4.p == 10
    assert plan4.mode_trace[-1] == (0, -1, 1, 10)

    empty = build_cascade(2, (5, 0), 0, config)
    assert empty.steps == () and empty.n_blocks == 0


def test_build_cascade_tags_failing_step(config: Config):
    """Test that a failing step reports its index.

    Parameters
    ----------
    config : Config
        Default configuration.
    """
    with pytest.raises(AssumptionFail) as error:
        build_cascade(2, (5, 0), 2, config.replace(m_min=11))
    assert error.value.step_index == 0
    assert str(error.value).startswith("step 0: ")
    with pytest.raises(ValueError):
        build_cascade(5, (1, 2), 1, config)
