import pytest

_ACCEPTANCE_RESULTS = []


class _CriterionRecorder:
    """Records one acceptance-criterion outcome for the terminal summary."""

    def __init__(self, name):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            status = "PASS"
        elif exc_type is pytest.skip.Exception:
            status = "SKIP"
            self.detail = self.detail or str(exc)
        elif exc_type is AssertionError:
            status = "FAIL"
        else:
            status = "ERROR"
            self.detail = self.detail or repr(exc)
        _ACCEPTANCE_RESULTS.append((self.name, status, self.detail))
        return False


@pytest.fixture
def acceptance():
    return _CriterionRecorder


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _ACCEPTANCE_RESULTS:
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"{status:5s} {name}{suffix}")
