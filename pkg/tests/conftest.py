import contextlib
import time

ACCEPTANCE = []


@contextlib.contextmanager
def criterion(number, title):
    """Record one PASS/FAIL line per acceptance criterion; failures still raise."""
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        ACCEPTANCE.append((number, "FAIL", title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"))
        raise
    detail = "; ".join(notes)
    ACCEPTANCE.append((number, "PASS", title, f"{detail} [{time.perf_counter() - start:.1f}s]".strip()))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, status, title, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{status} {number:>2}. {title}: {detail}")
