"""Shared record of acceptance outcomes, printed in the pytest terminal summary."""

RESULTS = {}


def format_line(number):
    ok, title, detail = RESULTS[number]
    return f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"


def record(number, title, ok, detail):
    RESULTS[number] = (bool(ok), title, detail)
    print(format_line(number))
    return ok
