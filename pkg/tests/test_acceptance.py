"""Acceptance suite: the twelve shipped criteria at their documented sizes and tolerances.

Each test prints one ``[PASS]``/``[FAIL]`` line; a summary of all lines is
repeated at the end of the pytest run. Set ``EXITBSDE_SCALE=quick`` for a
fast indicative pass with reduced sample sizes.
"""
import os

import pytest

from exitbsde.acceptance import CRITERIA, c12_determinism

SCALE = os.environ.get("EXITBSDE_SCALE", "full")
LINES: list[str] = []


def _report(result, capsys):
    line = result.line()
    LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert result.passed, f"{line}\n{result.to_dict()}"


@pytest.mark.slow
@pytest.mark.parametrize("number", list(range(1, 12)))
def test_criterion(number, capsys):
    _report(CRITERIA[number](scale=SCALE), capsys)


@pytest.mark.slow
def test_criterion_12_determinism(tmp_path, capsys):
    _report(c12_determinism(scale=SCALE, workdir=tmp_path), capsys)
