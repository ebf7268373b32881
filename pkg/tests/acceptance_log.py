"""Collects one verdict line per acceptance criterion for the summary."""

_results: dict = {}


def record(number: int, passed: bool, detail: str, part: str = "") -> None:
    name = f"criterion {number:2d}" + (f" ({part})" if part else "")
    line = f"{name}: {'PASS' if passed else 'FAIL'}  {detail}"
    _results[(number, part)] = line
    print(line)


def lines() -> list:
    return [_results[k] for k in sorted(_results)]
