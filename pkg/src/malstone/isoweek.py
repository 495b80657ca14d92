"""UTC calendar and ISO-8601 week arithmetic on integer day counts.

Days are counted from 1970-01-01 (day 0, a Thursday). Everything here works
both on Python ints and on numpy int64 arrays, which is what lets the codec
and the engines share one definition of "which week is this record in".
"""
from __future__ import annotations

import datetime as dt

import numpy as np

EPOCH = dt.datetime(1970, 1, 1)
SECONDS_PER_DAY = 86400


def days_from_civil(y, m, d):
    """Day number of the proleptic Gregorian date y-m-d.

    H. Hinnant's algorithm; floor division makes the era split correct for
    negative years without the C-style adjustment.
    """
    y = y - (m <= 2)
    era = y // 400
    yoe = y - era * 400
    mp = (m + 9) % 12
    doy = (153 * mp + 2) // 5 + d - 1
    doe = yoe * 365 + yoe // 4 - yoe // 100 + doy
    return era * 146097 + doe - 719468


def civil_from_days(z):
    """Inverse of :func:`days_from_civil`; returns ``(year, month, day)``."""
    z = z + 719468
    era = z // 146097
    doe = z - era * 146097
    yoe = (doe - doe // 1460 + doe // 36524 - doe // 146096) // 365
    y = yoe + era * 400
    doy = doe - (365 * yoe + yoe // 4 - yoe // 100)
    mp = (5 * doy + 2) // 153
    d = doy - (153 * mp + 2) // 5 + 1
    m = mp + 3 - 12 * (mp >= 10)
    y = y + (m <= 2)
    return y, m, d


def is_leap(y):
    return (y % 4 == 0) & ((y % 100 != 0) | (y % 400 == 0))


_DIM = np.array([0, 31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31], dtype=np.int64)


def days_in_month(y, m):
    if isinstance(m, (int, np.integer)):
        return int(_DIM[m]) + (1 if m == 2 and is_leap(y) else 0)
    return _DIM[m] + ((m == 2) & is_leap(y))


def week_index(days):
    """Monday-aligned week number since the week containing 1970-01-01.

    1969-12-29 (a Monday) is day -3, hence the shift. Week indices are
    strictly monotone in ISO (year, week) order.
    """
    return (days + 3) // 7


def iso_from_week_index(w):
    """ISO ``(year, week)`` of a Monday-aligned week index.

    An ISO week belongs to the year holding its Thursday; the Thursday of
    week ``w`` is day ``7 * w``.
    """
    thursday = 7 * w
    y, _, _ = civil_from_days(thursday)
    jan1 = days_from_civil(y, 1, 1)
    return y, (thursday - jan1) // 7 + 1


def iso_year_week(days):
    return iso_from_week_index(week_index(days))


def to_epoch(ts: dt.datetime) -> int:
    """Whole seconds since 1970-01-01 for a naive UTC datetime."""
    delta = ts - EPOCH
    return delta.days * SECONDS_PER_DAY + delta.seconds


def from_epoch(seconds: int) -> dt.datetime:
    return EPOCH + dt.timedelta(seconds=int(seconds))


def date_to_days(d: dt.date) -> int:
    return days_from_civil(d.year, d.month, d.day)
