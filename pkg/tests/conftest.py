import os

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    print_blob=True,
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Filled by tests/test_acceptance.py: criterion number -> (passed, detail).
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[num]
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {num}. {title}: {detail}")
