"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
from contextlib import contextmanager

RESULTS: dict[int, tuple[str, bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record the outcome of the enclosed checks; failures still propagate."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException as exc:
        RESULTS[number] = (title, False, detail["text"] or f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    RESULTS[number] = (title, True, detail["text"])


def lines() -> list[str]:
    out = []
    for n in sorted(RESULTS):
        title, ok, text = RESULTS[n]
        out.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{text}]" if text else ""))
    return out
