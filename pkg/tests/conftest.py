import sys
from pathlib import Path

# the stand-alone bound re-evaluation lives outside the helper module on purpose
sys.path.insert(0, str(Path(__file__).parent / "oracles"))

from _helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
