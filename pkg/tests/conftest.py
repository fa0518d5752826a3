_ACCEPTANCE = []


def pytest_configure(config):
    config._acceptance_lines = _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def record_acceptance(line):
    _ACCEPTANCE.append(line)
