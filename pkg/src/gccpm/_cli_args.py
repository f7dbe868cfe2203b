"""Argument specs shared by the gccpm entry points.

Each spec is a ``(flags..., kwargs)`` tuple handed to
:meth:`argparse.ArgumentParser.add_argument` by ``gccpm._cli_base``.
``BASE_ARGS`` configure the ``gccpm`` logger and are taken by every command.
``CONFIG_ARGS`` add the run configuration and the seed, taken by every command
that produces results.
"""

from gccpm._utils import nice_join

DEFAULT_LOG_FORMAT = "%(asctime)s %(name)s %(message)s"
DEFAULT_LOG_LEVEL = "info"
LOG_LEVELS = ("debug", "info", "warning", "error", "critical")

BASE_ARGS = (
    (
        "--log-level",
        dict(
            metavar="LOG-LEVEL",
            default=DEFAULT_LOG_LEVEL,
            choices=LOG_LEVELS,
            help=f"Lowest level logged, one of: {nice_join(LOG_LEVELS)} (default: {DEFAULT_LOG_LEVEL})",
        ),
    ),
    (
        "--log-format",
        dict(
            metavar="LOG-FORMAT",
            default=DEFAULT_LOG_FORMAT,
            help="Python logging format of every record (default: {!r})".format(
                DEFAULT_LOG_FORMAT.replace("%", "%%")
            ),
        ),
    ),
    (
        "--log-file",
        dict(
            metavar="LOG-FILE",
            default=None,
            help="Also append the log to this file, stderr is always written (default: None)",
        ),
    ),
)

CONFIG_ARGS = (
    (
        "--config",
        dict(
            metavar="TOML",
            default=None,
            help="Run configuration TOML, section defaults are used when omitted (default: None)",
        ),
    ),
    (
        "--seed",
        dict(
            metavar="SEED",
            type=int,
            default=None,
            help="Overrides the train and synth seeds of the configuration (default: None)",
        ),
    ),
) + BASE_ARGS


def out_dir_arg(default: str) -> tuple:
    return (
        "--out-dir",
        dict(
            metavar="DIR",
            default=default,
            help=f"Directory the outputs are written to (default: {default})",
        ),
    )
