"""

Running counters for one training run.

:class:`TrainingStatistics` keeps the number of iterations and samples seen
and the time spent on them, answers throughput questions about them and,
when given a file, writes one tab separated line per iteration.

:Example:

    >>> from gccpm._statistics import TrainingStatistics
    >>> stats = TrainingStatistics(None)
    >>> stats.add_iteration(1, 0.5, [0.3, 0.2], 4e-5, 2.0, batch_size=8)
    >>> print(stats.get_performance())
    it 1; loss 0.500000; 2.0000s/it; Avg: 2.0000s/it, 4.00 samples/s; lr 4e-05

"""

from __future__ import annotations
from collections import Counter
import logging
import attrs
from gccpm._loggers import setup_logger, stop_logger
from threading import RLock
from typing import Sequence

DEBUG_ITERATION_LOG_FIELDS = ("iteration", "loss", "stage_losses", "lr", "seconds")


@attrs.define
class TrainingStatistics:
    """
    Counters for a training run.

    :ivar log_file: The name of the per-iteration log file. If None, no file is output.
    :ivar counters: Cumulative iteration count, sample count and seconds.
    :ivar last: The loss, learning rate and duration of the latest iteration.
    """

    log_file: str | None
    counters: Counter = attrs.field(repr=False, factory=Counter)
    last: dict = attrs.field(repr=False, factory=dict)
    debug_logger: logging.Logger = attrs.field(init=False)
    _lock: RLock = attrs.field(repr=False, factory=RLock)

    def __attrs_post_init__(self):
        # a NullHandler logger when there is no log file
        self.debug_logger = setup_logger(
            name="gccpm_iteration_log",
            header="\t".join(DEBUG_ITERATION_LOG_FIELDS),
            log_file=self.log_file,
        )

    @property
    def average_iteration_time(self) -> float:
        """
        Mean seconds per iteration, 0 before the first one.

        >>> stats = TrainingStatistics(None)
        >>> stats.average_iteration_time
        0
        >>> stats.add_iteration(1, 1.0, [1.0], 1e-3, 1.0, batch_size=4)
        >>> stats.add_iteration(2, 0.9, [0.9], 1e-3, 3.0, batch_size=4)
        >>> stats.average_iteration_time
        2.0
        """
        with self._lock:
            if self.counters["iterations"] == 0:
                return 0
            return self.counters["seconds"] / self.counters["iterations"]

    @property
    def samples_per_second(self) -> float:
        with self._lock:
            if self.counters["seconds"] == 0:
                return 0
            return self.counters["samples"] / self.counters["seconds"]

    def add_iteration(
        self,
        iteration: int,
        loss: float,
        stage_losses: Sequence[float],
        lr: float,
        seconds: float,
        batch_size: int = 0,
    ) -> None:
        """
        Count one finished iteration and write it to the iteration log.

        :param iteration: One based iteration number
        :param loss: Total loss over all stages
        :param stage_losses: Loss of every stage
        :param lr: Learning rate used for the step
        :param seconds: Wall time of the iteration
        :param batch_size: Samples in the batch
        """
        with self._lock:
            self.counters["iterations"] += 1
            self.counters["samples"] += batch_size
            self.counters["seconds"] += seconds
            self.last = {"iteration": iteration, "loss": loss, "lr": lr, "seconds": seconds}
        self.debug_logger.debug(
            "\t".join(
                (
                    str(iteration),
                    f"{loss:.9g}",
                    ",".join(f"{s:.9g}" for s in stage_losses),
                    f"{lr:.9g}",
                    f"{seconds:.6f}",
                )
            )
        )

    def get_performance(self) -> str:
        """
        One line summary of the latest iteration and the averages so far.

        >>> TrainingStatistics(None).get_performance()
        'No iterations yet'
        """
        with self._lock:
            if self.counters["iterations"] == 0:
                return "No iterations yet"
            return (
                f"it {self.last['iteration']}; loss {self.last['loss']:.6f}; "
                f"{self.last['seconds']:.4f}s/it; "
                f"Avg: {self.average_iteration_time:.4f}s/it, "
                f"{self.samples_per_second:.2f} samples/s; "
                f"lr {self.last['lr']:.3g}"
            )

    def close(self) -> None:
        stop_logger("gccpm_iteration_log")
