import sys

import numpy as np
import pytest

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from conftest import TINY_INPUT, tiny_context, tiny_model_config
from gccpm.model import (
    BottleneckStack,
    CheckpointError,
    ContextConfig,
    ModelConfig,
    PyramidPoolingConfig,
    UShapedConfig,
    build_bottleneck_stack,
    build_model,
    images_to_batch,
    load_checkpoint,
    save_checkpoint,
)
from gccpm.model.checkpoint import blob_path, read_manifest
from gccpm.model.network import RefinementBlock
from gccpm.tensor import Tensor, no_grad, placeholder, shape_only

CONTEXT_KINDS = ["none", "aspp", "pyramid_pooling", "u_shaped"]


@pytest.mark.parametrize("kind", CONTEXT_KINDS)
@pytest.mark.parametrize("stages", [1, 5])
@pytest.mark.parametrize("output_stride,heatmap", [(8, 32), (4, 64)])
def test_heatmap_shapes_at_full_size(kind, stages, output_stride, heatmap):
    config = ModelConfig(
        output_stride=output_stride,
        num_refinement_stages=stages,
        context=ContextConfig(kind=kind),
    )
    with shape_only():
        model = build_model(config)
        outputs = model(placeholder((1, 3, 256, 256)))
    assert len(outputs) == stages + 1
    assert all(o.shape == (1, 16, heatmap, heatmap) for o in outputs)


@pytest.mark.parametrize("kind", CONTEXT_KINDS)
@pytest.mark.parametrize("placement", ["stage_input", "backbone_output"])
def test_tiny_forward_is_finite(kind, placement):
    config = tiny_model_config(kind, context=tiny_context(kind, placement))
    model = build_model(config, seed=1)
    image = np.random.default_rng(0).integers(0, 256, (TINY_INPUT, TINY_INPUT, 3), dtype=np.uint8)
    with no_grad():
        outputs = model(images_to_batch([image, image]))
    assert len(outputs) == 2
    for out in outputs:
        assert out.shape == (2, 16, 8, 8)
        assert out.is_finite()


def test_background_map_adds_a_channel():
    model = build_model(tiny_model_config(include_background_map=True))
    with shape_only():
        outputs = model(placeholder((1, 3, TINY_INPUT, TINY_INPUT)))
    assert outputs[-1].shape[1] == 17


def test_context_changes_parameters_not_shapes():
    plain = build_model(tiny_model_config("none"))
    context = build_model(tiny_model_config("u_shaped"))
    assert context.param_count() > plain.param_count()
    with shape_only():
        a = [o.shape for o in plain(placeholder((1, 3, TINY_INPUT, TINY_INPUT)))]
        b = [o.shape for o in context(placeholder((1, 3, TINY_INPUT, TINY_INPUT)))]
    assert a == b


def test_build_is_seeded():
    a = build_model(tiny_model_config(), seed=3)
    b = build_model(tiny_model_config(), seed=3)
    c = build_model(tiny_model_config(), seed=4)
    pa, pb, pc = (m.named_parameters() for m in (a, b, c))
    assert all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(pa, pb))
    assert not all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(pa, pc))


def test_stage_slices_cover_every_layer():
    model = build_model(tiny_model_config(stages=2))
    slices = model.stage_slices()
    assert list(slices) == ["backbone", "stage_0", "stage_1", "stage_2"]
    assert slices["stage_2"].stop == len(model.layers())


def test_wrong_input_size_is_rejected():
    model = build_model(tiny_model_config())
    with pytest.raises(ValueError, match="model expects"):
        with shape_only():
            model(placeholder((1, 3, 32, 32)))


@pytest.mark.parametrize(
    "kwargs,message",
    [
        (dict(output_stride=2), "output_stride"),
        (dict(heatmap_size=10), "heatmap_size"),
        (dict(num_refinement_stages=-1), "num_refinement_stages"),
        (
            dict(context=ContextConfig(kind="u_shaped", u_shaped=UShapedConfig(depth=6, channels=[8] * 7))),
            "u_shaped depth 6",
        ),
        (
            dict(context=ContextConfig(kind="pyramid_pooling", ppm=PyramidPoolingConfig(level_divisors=[3]))),
            "ppm level 3",
        ),
    ],
)
def test_invalid_model_config(kwargs, message):
    with pytest.raises(BaseExceptionGroup) as exc_info:
        ModelConfig(**kwargs)
    assert exc_info.value.message == "Invalid ModelConfig"
    assert message in str(exc_info.value.exceptions[0])


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_model_config("pyramid_pooling"), seed=2)
    manifest = save_checkpoint(model, tmp_path / "model.toml")
    assert blob_path(manifest).exists()
    restored = load_checkpoint(manifest)
    assert restored.config == model.config
    for (name, a), (other, b) in zip(model.named_parameters(), restored.named_parameters()):
        assert name == other
        assert np.array_equal(a.data, b.data)
    image = np.full((TINY_INPUT, TINY_INPUT, 3), 90, dtype=np.uint8)
    with no_grad():
        assert np.array_equal(
            model(images_to_batch([image]))[-1].data, restored(images_to_batch([image]))[-1].data
        )


def test_truncated_blob(tmp_path):
    manifest = save_checkpoint(build_model(tiny_model_config()), tmp_path / "m.toml")
    blob = blob_path(manifest)
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(manifest)


def test_checkpoint_of_another_model(tmp_path):
    manifest = save_checkpoint(build_model(tiny_model_config()), tmp_path / "m.toml")
    with pytest.raises(CheckpointError, match="parameters"):
        load_checkpoint(manifest, config=tiny_model_config("aspp"))


def test_checkpoint_format_version(tmp_path):
    manifest = save_checkpoint(build_model(tiny_model_config()), tmp_path / "m.toml")
    text = manifest.read_text().replace("format_version = 1", "format_version = 99")
    manifest.write_text(text)
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(manifest)


def test_manifest_embeds_the_config(tmp_path):
    config = tiny_model_config("u_shaped")
    manifest = save_checkpoint(build_model(config), tmp_path / "m.toml")
    assert ModelConfig.from_dict(read_manifest(manifest)["model"]) == config


def test_bottleneck_stack():
    stack = build_bottleneck_stack(64, 3)
    assert isinstance(stack, BottleneckStack)
    assert stack.param_count() == BottleneckStack.closed_form_params(64, 3)
    with shape_only():
        assert stack(placeholder((1, 64, 8, 8))).shape == (1, 64, 8, 8)


def test_refinement_block_sees_seven_by_seven(float64):
    block = RefinementBlock("block", 1, 1, rng=None)
    for layer in block.layers():
        layer.weight.data[...] = 1.0
    image = np.zeros((1, 1, 15, 15))
    image[0, 0, 7, 7] = 1.0
    with no_grad():
        out = block(Tensor(image)).data[0, 0]
    rows, cols = np.nonzero(out)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (4, 10, 4, 10)
    assert np.count_nonzero(out) == 49


@pytest.mark.parametrize("input_size", [64, 128, 256])
@pytest.mark.parametrize("output_stride", [4, 8, 16])
def test_heatmap_size_follows_input_and_stride(input_size, output_stride):
    config = ModelConfig(input_size=input_size, output_stride=output_stride, num_refinement_stages=1)
    with shape_only():
        outputs = build_model(config)(placeholder((1, 3, input_size, input_size)))
    side = input_size // output_stride
    assert [o.shape for o in outputs] == [(1, 16, side, side)] * 2


@pytest.mark.parametrize("kind", CONTEXT_KINDS)
def test_forward_is_deterministic(kind):
    config = tiny_model_config(kind)
    image = np.random.default_rng(6).integers(0, 256, (TINY_INPUT, TINY_INPUT, 3), dtype=np.uint8)
    other = np.random.default_rng(7).integers(0, 256, (TINY_INPUT, TINY_INPUT, 3), dtype=np.uint8)
    with no_grad():
        first = build_model(config, seed=9)(images_to_batch([image, other, image]))[-1].data
        second = build_model(config, seed=9)(images_to_batch([image, other, image]))[-1].data
    assert first.tobytes() == second.tobytes()
    np.testing.assert_allclose(first[0], first[2], rtol=0, atol=1e-6)
