"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = []


def record(number, name, passed, detail):
    line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} - {detail}"
    LINES.append(line)
    print(line)
    return passed
