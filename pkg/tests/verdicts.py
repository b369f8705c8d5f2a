"""Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

LINES: list = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    LINES.append((number, line))
    print(line, flush=True)
    return ok
