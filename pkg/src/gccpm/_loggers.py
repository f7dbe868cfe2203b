"""Logger construction for the command line and the training iteration log

Two kinds of logger are made here. The ``gccpm`` logger of a command writes
to the console and, with ``--log-file``, to a file. The iteration log of a
training run is a tab separated file with a header line. File output goes
through a bounded queue drained by a :class:`~logging.handlers.QueueListener`
thread.
"""

from __future__ import annotations
import logging
import argparse
from logging.handlers import QueueHandler, QueueListener
import queue
from pathlib import Path
from typing import Callable, Iterable
from gccpm.__about__ import __version__

#: Running file listeners by logger name
_LISTENERS: dict[str, QueueListener] = {}


def _write_header(log_file: str, header: str) -> None:
    """Start a new file with ``header``; an existing file is left alone."""
    try:
        with open(log_file, "x") as fh:
            fh.write(f"{header}\n")
    except FileExistsError:
        pass
    except OSError as e:
        logging.error(f"Unable to write header to {log_file}: {e}")


def _queue_to_file(
    name: str, log_file: str, formatter: logging.Formatter, mode: str, queue_bound: int
) -> QueueHandler:
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    log_queue: queue.Queue = queue.Queue(queue_bound)
    file_handler = logging.FileHandler(log_file, mode=mode, encoding="utf-8")
    file_handler.setFormatter(formatter)
    listener = QueueListener(log_queue, file_handler)
    listener.start()
    _LISTENERS[name] = listener
    return QueueHandler(log_queue)


def setup_logger(
    name: str,
    header: str | None = None,
    log_format: str = "%(message)s",
    log_file: str | None = None,
    log_console: bool = False,
    mode: str = "a",
    level: int = logging.DEBUG,
    propagate: bool = False,
    queue_bound: int = 100_000,
) -> logging.Logger:
    """Configure the logger ``name`` from scratch and return it

    Any handlers and file listener left by an earlier call for ``name`` are
    removed first, so several commands can run in one process without
    duplicated output.

    :param name: Logger name, ``gccpm`` for commands
    :param header: First line of a new ``log_file``, skipped when the file exists
    :param log_format: %-style format of every record
    :param log_file: File to append records to through a queue
    :param log_console: Also write records to stderr
    :param mode: Open mode of ``log_file``
    :param level: Lowest level that is emitted
    :param propagate: Hand records on to ancestor loggers too
    :param queue_bound: Records the file queue holds before ``log`` calls block
    :return: The configured logger; without a file or console it has a
        :class:`~logging.NullHandler`

    >>> logger = setup_logger('gccpm.example', log_console=True, level=logging.INFO)
    >>> logger.info('This is an info message')

    >>> import tempfile, os
    >>> with tempfile.TemporaryDirectory() as tmpdir:
    ...     path = os.path.join(tmpdir, "iterations.tsv")
    ...     logger = setup_logger('gccpm.example.file', log_file=path, header='iteration\\tloss')
    ...     logger.debug('1\\t0.5')
    ...     stop_logger('gccpm.example.file')
    ...     open(path).read()
    'iteration\\tloss\\n1\\t0.5\\n'
    """
    stop_logger(name)
    logger = logging.getLogger(name)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    formatter = logging.Formatter(log_format)

    handlers: list[logging.Handler] = []
    if log_file is not None:
        if header is not None:
            _write_header(log_file, header)
        handlers.append(_queue_to_file(name, log_file, formatter, mode, queue_bound))
    if log_console:
        console = logging.StreamHandler()
        console.setFormatter(formatter)
        handlers.append(console)
    for handler in handlers or [logging.NullHandler()]:
        logger.addHandler(handler)

    logger.setLevel(level)
    logger.propagate = propagate
    return logger


def stop_logger(name: str) -> None:
    """Flush and stop the file listener of ``name``, if it has one."""
    listener = _LISTENERS.pop(name, None)
    if listener is not None:
        listener.stop()
        for handler in listener.handlers:
            handler.close()


def print_args(
    args: argparse.Namespace,
    printer: Callable[[str], object],
    exclude: Iterable[str] = (),
) -> None:
    """Hand every parsed option to ``printer`` as ``name=value``, then the version

    :param args: Parsed command line
    :param printer: :func:`print` or a logger method such as :meth:`logging.Logger.info`
    :param exclude: Option names to leave out, e.g. the ``func`` callback

    >>> print_args(argparse.Namespace(seed=3, count=2, func=print), print, exclude=["func"])  # doctest: +ELLIPSIS
    count=2
    seed=3
    Version=...
    """
    skip = set(exclude)
    for key, value in sorted(vars(args).items()):
        if key not in skip and not key.startswith("_"):
            printer(f"{key}={value!r}")
    printer(f"Version={__version__}")
