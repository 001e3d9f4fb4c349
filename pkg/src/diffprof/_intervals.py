"""Half-open integer interval lists: merge, subtract, measure.

Intervals are (start, end) pairs with start < end. A normalized list is
sorted and pairwise disjoint with touching intervals joined.
"""

from __future__ import annotations

from typing import Iterable

Interval = tuple[int, int]


def merge(intervals: Iterable[Interval]) -> list[Interval]:
    out: list[Interval] = []
    for s, e in sorted(iv for iv in intervals if iv[1] > iv[0]):
        if out and s <= out[-1][1]:
            if e > out[-1][1]:
                out[-1] = (out[-1][0], e)
        else:
            out.append((s, e))
    return out


def subtract(base: list[Interval], mask: list[Interval]) -> list[Interval]:
    """``base`` minus ``mask``; both must be normalized."""
    if not mask or not base:
        return list(base)
    out: list[Interval] = []
    j = 0
    nm = len(mask)
    for s, e in base:
        cur = s
        while j < nm and mask[j][1] <= cur:
            j += 1
        k = j
        while k < nm and mask[k][0] < e:
            ms, me = mask[k]
            if ms > cur:
                out.append((cur, ms))
            cur = max(cur, me)
            if cur >= e:
                break
            k += 1
        if cur < e:
            out.append((cur, e))
    return out


def clip(intervals: list[Interval], lo: int, hi: int) -> list[Interval]:
    return [(max(s, lo), min(e, hi)) for s, e in intervals if e > lo and s < hi]


def total(intervals: Iterable[Interval]) -> int:
    return sum(e - s for s, e in intervals)
