import csv

import numpy as np
import pytest

from conftest import TINY_INPUT, tiny_model_config
from gccpm.analyzer import (
    CSV_COLUMNS,
    REFERENCE_COMPLEXITY,
    context_complexity_report,
    count_macs,
    count_params,
    format_op_kind_table,
    format_stats_table,
    group_by_op_kind,
    profile,
    write_stats_csv,
)
from gccpm.model import (
    Conv2d,
    ContextConfig,
    ContextKind,
    OpKind,
    PyramidPoolingConfig,
    build_bottleneck_stack,
    build_model,
)
from gccpm.tensor import ConvSpec, Tensor, shape_only


def _random_spec(rng):
    groups = int(rng.choice([1, 2, 4]))
    kernel = int(rng.choice([1, 3, 5]))
    return ConvSpec(
        groups * int(rng.integers(1, 4)),
        groups * int(rng.integers(1, 4)),
        kernel,
        stride=int(rng.integers(1, 3)),
        dilation=int(rng.integers(1, 3)),
        groups=groups,
        padding=int(rng.integers(0, 3)),
        has_bias=bool(rng.integers(0, 2)),
    )


def _positions(size, kernel, stride, dilation, padding):
    """Window placements along one axis, counted one by one."""
    span = dilation * (kernel - 1) + 1
    count, start = 0, 0
    while start + span <= size + 2 * padding:
        count += 1
        start += stride
    return count


@pytest.mark.parametrize("seed", range(24))
def test_counts_match_a_direct_tally(seed):
    rng = np.random.default_rng(seed)
    spec = _random_spec(rng)
    size = int(rng.integers(9, 17))
    conv = Conv2d("conv", spec, rng)
    stored = sum(t.data.size for _, t in conv.named_parameters())
    out = conv(Tensor(rng.standard_normal((1, spec.in_channels, size, size)).astype(np.float32)))
    positions = _positions(size, spec.kernel[0], spec.stride[0], spec.dilation, spec.padding[0])
    assert out.shape[2:] == (positions, positions)

    counted = count_macs(conv, (1, spec.in_channels, size, size))
    kh, kw = spec.kernel
    taps = spec.out_channels * (spec.in_channels // spec.groups) * kh * kw
    assert counted.params == stored
    assert counted.macs == taps * positions * positions
    assert counted.params_without_bias == taps


@pytest.mark.parametrize("kind", ["none", "aspp", "pyramid_pooling", "u_shaped"])
def test_model_params_equal_stored_values(kind):
    model = build_model(tiny_model_config(kind, stages=2))
    stored = sum(t.data.size for t in model.parameters())
    complexity = count_params(model)
    assert complexity.params == stored == model.param_count()
    assert [s.layer_name for s in complexity.layers] == [layer.name for layer in model.layers()]


def test_macs_scale_with_batch_size():
    with shape_only():
        model = build_model(tiny_model_config("u_shaped"))
    one = count_macs(model, (1, 3, TINY_INPUT, TINY_INPUT)).macs
    assert count_macs(model, (3, 3, TINY_INPUT, TINY_INPUT)).macs == 3 * one


def test_context_modules_against_published_counts():
    report = context_complexity_report()
    assert report.ordering_holds
    assert report.all_within_reference
    aspp = report.by_kind("aspp")
    assert aspp.params_without_bias == 9437184
    assert aspp.macs == 9437184 * 32 * 32
    assert report.by_kind(ContextKind.pyramid_pooling).macs < report.by_kind("u_shaped").macs
    text = report.format()
    assert "ordering aspp > u_shaped > pyramid_pooling: holds" in text
    assert [r.kind for r in report.rows] == list(REFERENCE_COMPLEXITY)


def test_pyramid_pooling_uses_one_by_one_branches():
    assert PyramidPoolingConfig().branch_kernel == 1
    ppm = context_complexity_report().by_kind(ContextKind.pyramid_pooling)
    # four 128->128 branches at 2x2 .. 16x16, then a 640->128 fusion at 32x32
    assert ppm.params == 4 * (128 * 128 + 128) + 640 * 128 + 128
    assert ppm.macs == 128 * 128 * (4 + 16 + 64 + 256) + 640 * 128 * 32 * 32
    assert ppm.params_ok and ppm.macs_ok
    spatial = ContextConfig(ppm=PyramidPoolingConfig(branch_kernel=3))
    branch3x3 = context_complexity_report(spatial).by_kind(ContextKind.pyramid_pooling)
    assert branch3x3.params == 4 * (128 * 32 * 9 + 32) + 256 * 128 + 128


def test_bottleneck_profile_shares():
    stack = build_bottleneck_stack(16, 2, seed=1)
    stats = profile(stack, (1, 16, 8, 8), warmup=1, iters=2)
    assert [s.layer_name for s in stats] == [layer.name for layer in stack.layers()]
    assert sum(s.time_share for s in stats) == pytest.approx(1.0)
    assert all(s.mean_time_s >= 0 for s in stats)
    groups = group_by_op_kind(stats)
    assert set(groups) == {OpKind.conv1x1, OpKind.conv3x3}
    assert groups[OpKind.conv1x1].layers == 4
    assert sum(g.time_share for g in groups.values()) == pytest.approx(1.0)
    shares = [g.time_share for g in groups.values()]
    assert shares == sorted(shares, reverse=True)


@pytest.mark.parametrize("warmup,iters", [(0, 0), (-1, 1)])
def test_profile_arguments(warmup, iters):
    with pytest.raises(ValueError):
        profile(build_bottleneck_stack(8, 1), (1, 8, 4, 4), warmup=warmup, iters=iters)


def test_tables_and_csv(tmp_path):
    stats = profile(build_bottleneck_stack(8, 1), (1, 8, 4, 4), warmup=0, iters=1)
    table = format_stats_table(stats)
    lines = table.splitlines()
    assert lines[0].split() == list(CSV_COLUMNS)
    assert lines[-1].startswith("total")
    assert len(lines) == len(stats) + 2
    assert format_op_kind_table(group_by_op_kind(stats)).splitlines()[0].startswith("op_kind")
    path = write_stats_csv(stats, tmp_path / "out" / "layers.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == [s.layer_name for s in stats]
