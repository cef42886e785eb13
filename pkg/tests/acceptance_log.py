"""Shared record of acceptance verdicts, printed by conftest at the end of the run."""

RESULTS: list[tuple[int, str, bool, str]] = []


def verdict(number: int, title: str, passed: bool, detail: str) -> bool:
    RESULTS.append((number, title, bool(passed), detail))
    return bool(passed)
