"""
    berry_sim.formatting
    ~~~~~~~~~~~~~~~~~~~~

    Locale-aware number formatting for rendered reports.  The locale comes
    from ``[io] locale`` of the current application and defaults to
    ``en_US`` outside an application context.
"""

import math

from babel import Locale, numbers
from flask import current_app, has_app_context

DEFAULT_LOCALE = "en_US"


def get_locale() -> Locale:
    if has_app_context():
        state = current_app.extensions.get("berry_sim")
        if state is not None:
            return Locale.parse(state.run.io.locale)
    return Locale.parse(DEFAULT_LOCALE)


def format_decimal(number, format=None) -> str:
    """Return the given decimal number formatted for the configured locale.

    :param number: the number to format
    :param format: the format to use
    """
    if isinstance(number, float) and math.isnan(number):
        return "n/a"
    return numbers.format_decimal(number, format=format, locale=get_locale())


def format_percent(number, format=None) -> str:
    """Return a fraction formatted as a percentage, ``0.19`` -> ``19%``."""
    if isinstance(number, float) and math.isnan(number):
        return "n/a"
    return numbers.format_percent(number, format=format, locale=get_locale())


def format_scientific(number, format=None) -> str:
    return numbers.format_scientific(number, format=format, locale=get_locale())


def format_change(points, format="+#,##0.00;-#,##0.00") -> str:
    """Signed percentage-point change, ``-15.62`` -> ``-15.62%``."""
    if isinstance(points, float) and math.isnan(points):
        return "n/a"
    return format_decimal(points, format) + "%"
