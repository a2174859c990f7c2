"""Shared store for acceptance verdicts, printed by the terminal summary hook."""

RESULTS: dict = {}


def record_acceptance(criterion, ok: bool, detail: str) -> None:
    RESULTS[str(criterion)] = (bool(ok), detail)
