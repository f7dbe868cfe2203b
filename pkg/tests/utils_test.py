import logging
import sys

import numpy as np
import pytest

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._utils import (
    Stream,
    derive_rng,
    drop_none,
    first_error,
    format_count,
    iter_exception_group,
    nice_join,
    raise_if_errors,
    report_failure,
)


def test_derived_streams_are_independent_of_creation_order():
    later = derive_rng(3, Stream.AUGMENT, 5, 1).random(4)
    for key in range(5):
        derive_rng(3, Stream.AUGMENT, key, 0).random(100)
    np.testing.assert_array_equal(derive_rng(3, Stream.AUGMENT, 5, 1).random(4), later)
    assert not np.array_equal(derive_rng(3, Stream.BATCHES, 5, 1).random(4), later)
    assert not np.array_equal(derive_rng(4, Stream.AUGMENT, 5, 1).random(4), later)


@pytest.mark.parametrize(
    "seq,expected",
    [
        ([], ""),
        (["a"], "a"),
        (["a", "b"], "a or b"),
        ([1, 2, 3], "1, 2 or 3"),
    ],
)
def test_nice_join(seq, expected):
    assert nice_join(seq) == expected


def test_nice_join_conjunction():
    assert nice_join(["x", "y"], conjunction="and") == "x and y"


def test_format_count():
    assert format_count(999) == "999.00 "
    assert format_count(9_437_184 * 1024, suffix="MAC") == "9.66 GMAC"


def test_raise_if_errors():
    raise_if_errors("Invalid Thing", [])
    with pytest.raises(BaseExceptionGroup) as exc_info:
        raise_if_errors("Invalid Thing", [ValueError("a"), ValueError("b")])
    assert exc_info.value.message == "Invalid Thing"
    assert len(exc_info.value.exceptions) == 2


def test_exception_tree_lines():
    exc = BaseExceptionGroup(
        "outer", [BaseExceptionGroup("inner", [ValueError("x")]), KeyError("k")]
    )
    assert list(iter_exception_group(exc)) == [
        "outer (2 sub-exceptions):",
        " inner (1 sub-exception):",
        "  - ValueError('x')",
        " - KeyError('k')",
    ]
    assert str(first_error(exc)) == "x"


def test_report_failure(capsys, caplog):
    logger = logging.getLogger("gccpm_utils_test")
    exc = BaseExceptionGroup("Invalid Thing", [ValueError("sigma must be > 0,\n got 0")])
    with caplog.at_level(logging.ERROR, logger="gccpm_utils_test"):
        assert report_failure(logger, "train", exc) == 1
    assert [r.getMessage() for r in caplog.records] == [
        "Invalid Thing (1 sub-exception):",
        " - ValueError('sigma must be > 0,\\n got 0')",
    ]
    _, err = capsys.readouterr()
    assert err == "gccpm: error: train: sigma must be > 0, got 0\n"


def test_report_failure_quotes_key_errors(capsys):
    report_failure(logging.getLogger("gccpm_utils_test"), "eval", KeyError("schema_version"))
    assert capsys.readouterr().err == "gccpm: error: eval: KeyError('schema_version')\n"


def test_drop_none():
    assert drop_none({"a": 1, "b": None, "c": {"d": None}}) == {"a": 1, "c": {}}
    assert drop_none([None, 1]) == [None, 1]
