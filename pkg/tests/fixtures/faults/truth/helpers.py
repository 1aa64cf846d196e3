"""Sequence helpers."""


def series(n, start=1):
    return [start + 2 * k for k in range(n)]
