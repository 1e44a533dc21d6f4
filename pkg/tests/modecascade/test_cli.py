import json
import sys
from pathlib import Path
from tempfile import TemporaryDirectory

import pytest

from modecascade.cli import main


def _main(monkeypatch: pytest.MonkeyPatch, *args: str) -> int:
    monkeypatch.setattr(sys, "argv", ["mode_cascade", *args])
    with pytest.raises(SystemExit) as info:
        main()
    return info.value.code


def test_plan_and_check(monkeypatch: pytest.MonkeyPatch, config_file: Path):
    """Test planning a cascade and checking its assumptions.

    Parameters
    ----------
    monkeypatch : pytest.MonkeyPatch
        Used to set the command line.
    config_file : Path
        The test configuration file.
    """
    with TemporaryDirectory() as tmp_dir:
        plan_path = Path(tmp_dir) / "plan.json"
        assert _main(monkeypatch, "plan", "--dim", "2", "--start", "5,0", "--steps", "2", "--out", str(plan_path)) == 0
        data = json.loads(plan_path.read_text())
        assert data["dimension"] == 2
        assert data["mode_trace"] == [[5, 0], [7, 0], [9, 0]]
        assert len(data["steps"]) == 4
        assert _main(monkeypatch, "--config", str(config_file), "check", "--plan", str(plan_path)) == 0
        # steps from (5, 0) have M = 111/11 < 11
        assert _main(monkeypatch, "check", "--plan", str(plan_path), "--m-min", "11") == 1


def test_errors(monkeypatch: pytest.MonkeyPatch):
    """Test that library errors become exit code 1.

    Parameters
    ----------
    monkeypatch : pytest.MonkeyPatch
        Used to set the command line.
    """
    assert _main(monkeypatch, "plan", "--dim", "2", "--start", "3,0", "--steps", "1") == 1
    assert _main(monkeypatch, "plan", "--dim", "2", "--start", "5,1", "--steps", "1") == 1
    # argparse rejects the dimension itself
    assert _main(monkeypatch, "plan", "--dim", "5", "--start", "5,0", "--steps", "1") == 2


def test_verify_and_report(monkeypatch: pytest.MonkeyPatch):
    """Test verifying and plotting a report of an empty cascade.

    Parameters
    ----------
    monkeypatch : pytest.MonkeyPatch
        Used to set the command line.
    """
    with TemporaryDirectory() as tmp_dir:
        tmp_path = Path(tmp_dir)
        plan_path = tmp_path / "plan.json"
        report_path = tmp_path / "report.json"
        assert _main(monkeypatch, "plan", "--dim", "3", "--start", "1,2,2", "--steps", "0", "--out", str(plan_path)) == 0
        assert _main(monkeypatch, "run", "--plan", str(plan_path), "--out", str(report_path)) == 0
        assert _main(monkeypatch, "verify", "--report", str(report_path)) == 0
        svg_path = tmp_path / "decay.svg"
        csv_path = tmp_path / "decay.csv"
        assert _main(monkeypatch, "report", "--in", str(report_path), "--svg", str(svg_path), "--csv", str(csv_path)) == 0
        assert svg_path.read_text().lstrip().startswith("<?xml")
        assert csv_path.read_text().splitlines() == [
            "t,mass,log_mass,dirichlet_ratio,step_index,phase_label",
            "0.0,1.0,0.0,9.0,0,start",
        ]


def test_plan_prints_json(monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]):
    """Test that the plan goes to stdout without an output file.

    Parameters
    ----------
    monkeypatch : pytest.MonkeyPatch
        Used to set the command line.
    capsys : pytest.CaptureFixture[str]
        Captures the printed plan.
    """
    assert _main(monkeypatch, "plan", "--dim", "2", "--start", "5,0", "--steps", "1") == 0
    out = capsys.readouterr().out
    data = json.loads(out[out.index("\n{\n") + 1 :])
    assert data["dimension"] == 2
    assert data["mode_trace"] == [[5, 0], [7, 0]]
    assert len(data["steps"]) == 2
