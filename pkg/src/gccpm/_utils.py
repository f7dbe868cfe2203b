"""utils.py
functions and utilities used internally.
"""

from __future__ import annotations
import sys
import base64
import logging
import zlib
from enum import IntEnum
from typing import Any, Iterator, Sequence

import numpy as np

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup


MODULE_LOGGER = logging.getLogger(__name__)


class Stream(IntEnum):
    """Purposes a random stream can be derived for.

    Every stream is keyed from one user facing seed, see :func:`derive_rng`.
    """

    MODEL_INIT = 1
    BATCHES = 2
    AUGMENT = 3
    SYNTH = 4
    ERF_PATCH = 5
    PROFILE_INPUT = 6


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``seed`` and a key path

    The same ``(seed, *keys)`` always yields the same stream, whatever order the
    streams are created in, so per-sample work can run in any schedule.

    :param seed: The user facing seed
    :param keys: Non-negative integers naming the purpose, e.g. ``Stream.AUGMENT, iteration, slot``
    :return: A seeded :class:`numpy.random.Generator`

    >>> a = derive_rng(7, Stream.SYNTH, 3).integers(0, 1000, 4)
    >>> b = derive_rng(7, Stream.SYNTH, 3).integers(0, 1000, 4)
    >>> bool((a == b).all())
    True
    >>> c = derive_rng(7, Stream.SYNTH, 4).integers(0, 1000, 4)
    >>> bool((a == c).all())
    False
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def format_count(num: float, factor: int = 1000, suffix: str = "") -> str:
    """Return a human readable string of a large count using SI unit prefixes

    :param num: A number to convert to decimal form
    :param factor: The SI factor, use 1000 for SI units
    :param suffix: The suffix to place after the SI prefix, for example ``MAC``
    :return: The input number formatted to two decimal places with the SI unit and suffix

    :Example:

    >>> format_count(4_640)
    '4.64 k'
    >>> format_count(9_445_888)
    '9.45 M'
    >>> format_count(2_411_200_512, suffix="MAC")
    '2.41 GMAC'
    >>> format_count(12)
    '12.00 '
    """
    for unit in ["", "k", "M", "G", "T", "P"]:
        if abs(num) < factor:
            return f"{num:3.2f} {unit}{suffix}"
        num /= factor
    return f"{num:3.2f} E{suffix}"


def compress_and_encode_string(original_str: str) -> str:
    """Compresses a string, encodes it in base-64, and returns an ASCII string representation of the compressed blob.

    :param original_str: The string to be compressed and encoded.
    :return: An ASCII string representation of the compressed and base-64 encoded blob.

    >>> blob = compress_and_encode_string("schema_version = 1")
    >>> zlib.decompress(base64.b64decode(blob)).decode()
    'schema_version = 1'
    """
    return base64.b64encode(zlib.compress(original_str.encode())).decode("ascii")


def nice_join(seq: Sequence[Any], sep: str = ", ", conjunction: str = "or") -> str:
    """Join lists nicely

    :param seq: A sequence of objects that have a __str__ method.
    :param sep: The separator for the join, defaults to ", "
    :param conjunction: A conjunction between the joined list and the last element, defaults to "or"
    :return: The nicely joined string

    >>> nice_join(["aspp", "pyramid_pooling", "u_shaped"])
    'aspp, pyramid_pooling or u_shaped'
    >>> nice_join(["none"])
    'none'
    """
    seq = [str(x) for x in seq]

    if len(seq) <= 1 or conjunction is None:
        return sep.join(seq)
    else:
        return f"{sep.join(seq[:-1])} {conjunction} {seq[-1]}"


def raise_if_errors(label: str, errors: list[Exception]) -> None:
    """Raise a :class:`BaseExceptionGroup` holding ``errors`` if there are any

    :param label: Message for the group, conventionally ``"Invalid <Thing>"``
    :param errors: Collected validation failures
    :raises BaseExceptionGroup: When ``errors`` is not empty

    >>> raise_if_errors("Invalid Thing", [])
    >>> raise_if_errors("Invalid Thing", [ValueError("sigma must be > 0, got 0")])  # doctest: +IGNORE_EXCEPTION_DETAIL
    Traceback (most recent call last):
        ...
    ExceptionGroup: Invalid Thing (1 sub-exception)
    """
    if errors:
        raise BaseExceptionGroup(label, errors)


def iter_exception_group(exc: BaseException, level: int = 0) -> Iterator[str]:
    r"""Traverses an exception tree, yielding formatted strings for each exception encountered

    :param exc: The exception group to traverse
    :param level: The current indentation level, defaults to 0
    :yield: Formatted (and indented) string representation of each exception encountered in the tree.

    >>> exc = BaseExceptionGroup(
    ...     "Invalid RunConfig",
    ...     [
    ...         BaseExceptionGroup("Invalid ModelConfig", [ValueError("abc")]),
    ...         KeyError("99"),
    ...     ],
    ... )
    >>> print("\n".join(iter_exception_group(exc)))
    Invalid RunConfig (2 sub-exceptions):
     Invalid ModelConfig (1 sub-exception):
      - ValueError('abc')
     - KeyError('99')
    """
    indent = " " * level
    if isinstance(exc, BaseExceptionGroup):
        yield f"{indent}{exc!s}:"
        for e in exc.exceptions:
            yield from iter_exception_group(e, level + 1)
    else:
        yield f"{indent}- {exc!r}"


def first_error(exc: BaseException) -> BaseException:
    """Return the first leaf of an exception tree

    >>> first_error(BaseExceptionGroup("outer", [BaseExceptionGroup("inner", [ValueError("x")])]))
    ValueError('x')
    >>> first_error(KeyError("k"))
    KeyError('k')
    """
    while isinstance(exc, BaseExceptionGroup):
        exc = exc.exceptions[0]
    return exc


def report_failure(logger: logging.Logger, command: str, exc: BaseException) -> int:
    """Log the full failure and emit a single parseable line on stderr

    :param logger: The entry point logger
    :param command: The sub-command that failed
    :param exc: The exception, possibly a group
    :return: Exit code to hand back to the CLI
    """
    for line in iter_exception_group(exc):
        logger.error(line)
    leaf = first_error(exc)
    message = str(leaf) if not isinstance(leaf, KeyError) else repr(leaf)
    message = " ".join(message.split())
    print(f"gccpm: error: {command}: {message}", file=sys.stderr)
    return 1


def drop_none(value: Any) -> Any:
    """Remove ``None`` entries from nested dicts, TOML having no null

    >>> drop_none({"a": None, "b": [{"c": None, "d": 1}]})
    {'b': [{'d': 1}]}
    """
    if isinstance(value, dict):
        return {k: drop_none(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [drop_none(v) for v in value]
    return value
