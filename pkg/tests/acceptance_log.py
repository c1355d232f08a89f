"""PASS/FAIL lines collected by the acceptance tests and printed at the end of the run."""

LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
    LINES.append(line)
    print(line)
    return ok
