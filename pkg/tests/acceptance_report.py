"""Shared registry for acceptance results; printed by the conftest summary hook."""

# criterion number -> (passed, detail)
RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, checks: dict[str, bool], detail: str = "") -> bool:
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    text = detail + (f"  [failed: {', '.join(failed)}]" if failed else "")
    RESULTS[n] = (ok, text.strip())
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text.strip()}")
    return ok
