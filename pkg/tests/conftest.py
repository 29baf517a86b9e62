import logging

from hypothesis import HealthCheck, settings

settings.register_profile(
    "caql", deadline=None, max_examples=100,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("caql")

# trainer warnings about constant predictions are expected in tiny runs
logging.getLogger("caql").setLevel(logging.ERROR)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
