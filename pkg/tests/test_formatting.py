from decimal import Decimal

import flask

from berry_sim import BerrySim, create_app
from berry_sim.config import config_from_mapping
from berry_sim.formatting import (
    format_change,
    format_decimal,
    format_percent,
    format_scientific,
    get_locale,
)


def test_basics():
    app = create_app()

    with app.app_context():
        assert str(get_locale()) == "en_US"
        assert format_decimal(1099) == "1,099"
        assert format_decimal(Decimal("1010.99")) == "1,010.99"
        assert format_decimal(53.1912, "0.00") == "53.19"
        assert format_percent(0.19) == "19%"
        assert format_percent(0.884, "0.0%") == "88.4%"
        assert format_scientific(10000) == "1E4"
        assert format_change(-15.6234) == "-15.62%"
        assert format_change(18.5) == "+18.50%"


def test_outside_app_context():
    assert str(get_locale()) == "en_US"
    assert format_decimal(0.5, "0.00") == "0.50"


def test_missing_values():
    assert format_decimal(float("nan")) == "n/a"
    assert format_percent(float("nan")) == "n/a"
    assert format_change(float("nan")) == "n/a"


def test_configured_locale():
    app = flask.Flask(__name__)
    BerrySim(app, config=config_from_mapping({"io": {"locale": "de_DE"}}))

    with app.app_context():
        assert str(get_locale()) == "de_DE"
        assert format_decimal(1010.99, "#,##0.00") == "1.010,99"
        assert format_change(-15.62) == "-15,62%"


def test_template_filters():
    app = create_app(flags={"io.locale": "en_US"})

    with app.app_context():
        rendered = flask.render_template_string(
            "{{ 0.884|percentformat('0.0%') }} {{ -15.62|changeformat }} "
            "{{ 53.19|decimalformat('0.0') }} {{ 0.00498|scientificformat('0.00E0') }}"
        )
    assert rendered == "88.4% -15.62% 53.2 4.98E-3"
