"""Parameter, multiply-accumulate and wall-clock accounting per layer

Counting is static: parameters come from each layer's geometry and MACs from a
shape-only forward pass, so nothing is computed. One multiply-accumulate is
counted as one FLOP, and pooling, upsampling and activations count as zero.

Profiling runs real forward passes and attributes wall time to layers through
:func:`~gccpm.model.layers.layer_hooks`. Layers run one after another on the
calling thread, so each measured interval belongs to exactly one layer.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import attrs

from gccpm._utils import Stream, derive_rng, format_count
from gccpm.model.context import (
    ContextConfig,
    ContextKind,
    PyramidPoolingConfig,
    build_context_module,
)
from gccpm.model.layers import Layer, Module, OpKind, layer_hooks
from gccpm.tensor import Tensor, default_dtype, no_grad, placeholder, shape_only

MODULE_LOGGER = logging.getLogger(__name__)

#: Column order shared by the text table and the CSV
CSV_COLUMNS = ("layer_name", "op_kind", "params", "macs", "mean_time_s", "time_share")


@attrs.define(frozen=True)
class LayerStats:
    """Accounting for one layer

    :param layer_name: Qualified layer name
    :param op_kind: Category of the operation
    :param params: Scalar parameters, bias included
    :param macs: Multiply-accumulates at the analysed input shape
    :param mean_time_s: Mean forward wall time, 0 when not profiled
    :param time_share: Fraction of the summed mean times, 0 when not profiled
    """

    layer_name: str
    op_kind: OpKind
    params: int = 0
    macs: int = 0
    mean_time_s: float = 0.0
    time_share: float = 0.0

    def __attrs_post_init__(self):
        if self.params < 0 or self.macs < 0:
            raise ValueError(f"{self.layer_name}: params and macs must be >= 0")

    def row(self) -> list[str]:
        return [
            self.layer_name,
            self.op_kind.value,
            str(self.params),
            str(self.macs),
            f"{self.mean_time_s:.6e}",
            f"{self.time_share:.6f}",
        ]


@attrs.define(frozen=True)
class Complexity:
    """Per-layer counts and their totals

    :param layers: One entry per layer, in network order
    :param params_without_bias: Total parameters excluding biases
    """

    layers: tuple[LayerStats, ...]
    params_without_bias: int = 0

    @property
    def params(self) -> int:
        return sum(s.params for s in self.layers)

    @property
    def macs(self) -> int:
        return sum(s.macs for s in self.layers)


def count_params(model: Module) -> Complexity:
    """Parameters of every layer; convolutions hold ``Cout*(Cin/groups)*kh*kw`` plus ``Cout`` bias

    >>> from gccpm.model import Conv2d
    >>> from gccpm.tensor import ConvSpec
    >>> with shape_only():
    ...     conv = Conv2d("conv", ConvSpec.same(16, 32, 3), None)
    >>> c = count_params(conv)
    >>> c.params, c.params_without_bias
    (4640, 4608)
    """
    return Complexity(
        layers=tuple(
            LayerStats(layer.name, layer.op_kind, params=layer.param_count())
            for layer in model.layers()
        ),
        params_without_bias=model.param_count(with_bias=False),
    )


class _ShapeRecorder:
    def __init__(self):
        self.macs: Dict[str, int] = defaultdict(int)

    def before(self, layer: Layer, x: Tensor) -> None:
        pass

    def after(self, layer: Layer, x: Tensor, out: Tensor) -> None:
        self.macs[layer.name] += layer.macs(out.shape)


def count_macs(model: Module, input_shape: Sequence[int]) -> Complexity:
    """Multiply-accumulates of one forward pass on an ``input_shape`` batch

    A convolution costs its bias-free parameter count times its output
    positions (``N*H_out*W_out``).

    >>> from gccpm.model import Conv2d
    >>> from gccpm.tensor import ConvSpec
    >>> with shape_only():
    ...     conv = Conv2d("conv", ConvSpec.same(16, 32, 3), None)
    >>> count_macs(conv, (1, 16, 8, 8)).macs
    294912
    """
    recorder = _ShapeRecorder()
    with shape_only(), layer_hooks(recorder):
        model(placeholder(tuple(input_shape)))
    return Complexity(
        layers=tuple(
            LayerStats(
                layer.name,
                layer.op_kind,
                params=layer.param_count(),
                macs=recorder.macs.get(layer.name, 0),
            )
            for layer in model.layers()
        ),
        params_without_bias=model.param_count(with_bias=False),
    )


class _Timer:
    def __init__(self):
        self.started: Dict[str, float] = {}
        self.elapsed: Dict[str, float] = defaultdict(float)

    def before(self, layer: Layer, x: Tensor) -> None:
        self.started[layer.name] = time.perf_counter()

    def after(self, layer: Layer, x: Tensor, out: Tensor) -> None:
        self.elapsed[layer.name] += time.perf_counter() - self.started.pop(layer.name)


def profile(
    model: Module,
    input_shape: Sequence[int],
    warmup: int = 2,
    iters: int = 5,
    seed: int = 0,
) -> List[LayerStats]:
    """Mean forward wall time of every layer over ``iters`` timed passes

    The first ``warmup`` passes are discarded. Only forward arithmetic is
    timed: the input is built once and no gradients are recorded.

    :raises ValueError: If ``iters < 1`` or ``warmup < 0``
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    counted = {s.layer_name: s for s in count_macs(model, input_shape).layers}
    noise = derive_rng(seed, Stream.PROFILE_INPUT).standard_normal(tuple(input_shape))
    batch = Tensor(noise.astype(default_dtype()))
    timer = _Timer()
    with no_grad():
        for _ in range(warmup):
            model(batch)
        with layer_hooks(timer):
            for i in range(iters):
                model(batch)
                MODULE_LOGGER.debug("Timed pass %d of %d", i + 1, iters)
    means = {name: timer.elapsed.get(name, 0.0) / iters for name in counted}
    total = sum(means.values())
    n = len(means)
    return [
        attrs.evolve(
            stats,
            mean_time_s=means[name],
            time_share=(means[name] / total) if total > 0 else 1.0 / n,
        )
        for name, stats in counted.items()
    ]


@attrs.define(frozen=True)
class OpKindSummary:
    op_kind: OpKind
    layers: int
    params: int
    macs: int
    mean_time_s: float
    time_share: float


def group_by_op_kind(stats: Sequence[LayerStats]) -> Dict[OpKind, OpKindSummary]:
    """Aggregate layer statistics per :class:`~gccpm.model.layers.OpKind`, largest time share first."""
    groups: Dict[OpKind, list[LayerStats]] = defaultdict(list)
    for s in stats:
        groups[s.op_kind].append(s)
    summaries = [
        OpKindSummary(
            op_kind=kind,
            layers=len(members),
            params=sum(m.params for m in members),
            macs=sum(m.macs for m in members),
            mean_time_s=sum(m.mean_time_s for m in members),
            time_share=sum(m.time_share for m in members),
        )
        for kind, members in groups.items()
    ]
    summaries.sort(key=lambda s: (-s.time_share, -s.layers, s.op_kind.value))
    return {s.op_kind: s for s in summaries}


def _align(rows: Sequence[Sequence[str]], numeric_from: int) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [
            cell.rjust(w) if i >= numeric_from else cell.ljust(w)
            for i, (cell, w) in enumerate(zip(row, widths))
        ]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def format_stats_table(stats: Sequence[LayerStats], with_totals: bool = True) -> str:
    """Aligned text table using :data:`CSV_COLUMNS`."""
    rows = [list(CSV_COLUMNS)] + [s.row() for s in stats]
    if with_totals:
        rows.append(
            [
                "total",
                "",
                str(sum(s.params for s in stats)),
                str(sum(s.macs for s in stats)),
                f"{sum(s.mean_time_s for s in stats):.6e}",
                f"{sum(s.time_share for s in stats):.6f}",
            ]
        )
    return _align(rows, numeric_from=2)


def format_op_kind_table(groups: Dict[OpKind, OpKindSummary]) -> str:
    rows = [["op_kind", "layers", "params", "macs", "mean_time_s", "time_share"]]
    for g in groups.values():
        rows.append(
            [
                g.op_kind.value,
                str(g.layers),
                str(g.params),
                str(g.macs),
                f"{g.mean_time_s:.6e}",
                f"{g.time_share:.6f}",
            ]
        )
    return _align(rows, numeric_from=1)


def write_stats_csv(stats: Sequence[LayerStats], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(s.row() for s in stats)
    return path


#: Published parameter and MAC counts of the three context modules on
#: 128-channel 32×32 maps, with the accepted relative deviation of each
#: (``factor`` bounds use a ratio instead)
REFERENCE_COMPLEXITY = {
    ContextKind.aspp: {"params": 9.52e6, "macs": 9.75e9, "tolerance": 0.05},
    ContextKind.u_shaped: {"params": 6.44e6, "macs": 2.53e9, "tolerance": 0.10},
    ContextKind.pyramid_pooling: {"params": 0.2e6, "macs": 0.07e9, "factor": 2.0},
}
REFERENCE_CHANNELS = 128
REFERENCE_MAP_SIZE = 32
#: Context settings the published figures are compared against; pyramid
#: pooling branches keep the full 128 channels
REFERENCE_CONTEXT = ContextConfig(ppm=PyramidPoolingConfig(branch_channels=REFERENCE_CHANNELS))


def reference_context_modules(
    cfg: Optional[ContextConfig] = None,
) -> Dict[ContextKind, Module]:
    """The three context modules at the reference geometry (128→128 channels, 32×32)

    Modules are built shape-only; they can be counted but not run. Without
    ``cfg`` the :data:`REFERENCE_CONTEXT` settings are used.
    """
    cfg = cfg if cfg is not None else REFERENCE_CONTEXT
    with shape_only():
        return {
            kind: build_context_module(
                kind, cfg, REFERENCE_CHANNELS, REFERENCE_CHANNELS, REFERENCE_MAP_SIZE, name=kind.value
            )
            for kind in REFERENCE_COMPLEXITY
        }


def _within(measured: float, reference: dict, key: str) -> bool:
    expected = reference[key]
    if "factor" in reference:
        return expected / reference["factor"] <= measured <= expected * reference["factor"]
    return abs(measured - expected) <= reference["tolerance"] * expected


@attrs.define(frozen=True)
class ContextComplexityRow:
    kind: ContextKind
    params: int
    params_without_bias: int
    macs: int
    reference_params: float
    reference_macs: float
    params_ok: bool
    macs_ok: bool


@attrs.define(frozen=True)
class ContextComplexityReport:
    """Measured against published complexity of the context modules

    :param rows: One row per module, ordered aspp, u_shaped, pyramid_pooling
    """

    rows: tuple[ContextComplexityRow, ...]

    def by_kind(self, kind: Union[ContextKind, str]) -> ContextComplexityRow:
        kind = ContextKind(kind)
        return next(r for r in self.rows if r.kind is kind)

    @property
    def ordering_holds(self) -> bool:
        """aspp > u_shaped > pyramid_pooling in both parameters and MACs."""
        a, u, p = (self.by_kind(k) for k in ("aspp", "u_shaped", "pyramid_pooling"))
        return a.params > u.params > p.params and a.macs > u.macs > p.macs

    @property
    def all_within_reference(self) -> bool:
        return all(r.params_ok and r.macs_ok for r in self.rows)

    def format(self) -> str:
        rows = [
            [
                "module",
                "params",
                "params_no_bias",
                "ref_params",
                "macs",
                "ref_macs",
                "params_ok",
                "macs_ok",
            ]
        ]
        for r in self.rows:
            rows.append(
                [
                    r.kind.value,
                    format_count(r.params),
                    format_count(r.params_without_bias),
                    format_count(r.reference_params),
                    format_count(r.macs, suffix="MAC"),
                    format_count(r.reference_macs, suffix="MAC"),
                    "yes" if r.params_ok else "no",
                    "yes" if r.macs_ok else "no",
                ]
            )
        ordering = "holds" if self.ordering_holds else "VIOLATED"
        return (
            _align(rows, numeric_from=1)
            + f"\nordering aspp > u_shaped > pyramid_pooling: {ordering}"
        )


def context_complexity_report(cfg: Optional[ContextConfig] = None) -> ContextComplexityReport:
    """Count the reference context modules and compare them to the published figures."""
    modules = reference_context_modules(cfg)
    shape = (1, REFERENCE_CHANNELS, REFERENCE_MAP_SIZE, REFERENCE_MAP_SIZE)
    rows = []
    for kind in (ContextKind.aspp, ContextKind.u_shaped, ContextKind.pyramid_pooling):
        counted = count_macs(modules[kind], shape)
        ref = REFERENCE_COMPLEXITY[kind]
        rows.append(
            ContextComplexityRow(
                kind=kind,
                params=counted.params,
                params_without_bias=counted.params_without_bias,
                macs=counted.macs,
                reference_params=ref["params"],
                reference_macs=ref["macs"],
                params_ok=_within(counted.params, ref, "params"),
                macs_ok=_within(counted.macs, ref, "macs"),
            )
        )
    return ContextComplexityReport(tuple(rows))
