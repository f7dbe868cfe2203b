import logging
import sys

import pytest
import rtoml

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._config import SCHEMA_VERSION, RunConfig, load_run_config
from gccpm._utils import compress_and_encode_string, iter_exception_group


def _messages(exc):
    return "\n".join(iter_exception_group(exc))


def test_defaults_agree_with_the_model():
    cfg = RunConfig.default()
    assert cfg.schema_version == SCHEMA_VERSION
    assert cfg.codec.heatmap_size == cfg.model.heatmap_size == 32
    assert cfg.augment.input_size == cfg.synth.image_size == cfg.model.input_size == 256


def test_geometry_follows_the_model_section():
    cfg = RunConfig.from_dict(
        {"schema_version": 1, "model": {"input_size": 128, "output_stride": 4}, "codec": {"sigma": 1.5}}
    )
    assert (cfg.codec.heatmap_size, cfg.codec.output_stride) == (32, 4)
    assert cfg.codec.sigma == 1.5
    assert cfg.augment.input_size == 128
    assert cfg.synth.image_size == 128


def test_file_round_trip(tmp_path):
    cfg = RunConfig.from_dict(
        {
            "schema_version": 1,
            "model": {
                "input_size": 128,
                "num_refinement_stages": 1,
                "context": {"kind": "pyramid_pooling", "placement": "backbone_output"},
            },
            "augment": {"rotation_deg": 30.0, "body_mask": {"enabled": True}},
            "train": {"max_iters": 10, "augmentation": "none"},
            "synth": {"figures": 2, "background": "noise"},
        }
    )
    path = cfg.to_file(tmp_path / "nested" / "run.toml")
    assert path.exists()
    assert RunConfig.from_file(path) == cfg
    document = rtoml.loads(path.read_text())
    assert document["model"]["context"]["kind"] == "pyramid_pooling"
    assert "iteration_log" not in document["train"]


def test_cross_section_checks():
    with pytest.raises(BaseExceptionGroup) as exc_info:
        RunConfig.from_dict(
            {"schema_version": 2, "codec": {"heatmap_size": 16}, "augment": {"input_size": 128}}
        )
    assert exc_info.value.message == "Invalid RunConfig"
    messages = [str(e) for e in exc_info.value.exceptions]
    assert messages == [
        "schema_version must be 1, got 2",
        "codec.heatmap_size (16) must equal model.heatmap_size (32)",
        "augment.input_size (128) must equal model.input_size (256)",
    ]


def test_unknown_keys_are_rejected():
    with pytest.raises(BaseExceptionGroup) as exc_info:
        RunConfig.from_dict({"schema_version": 1, "train": {"learning_rate": 0.1}})
    assert "learning_rate" in _messages(exc_info.value)


def test_model_errors_surface():
    with pytest.raises(BaseExceptionGroup) as exc_info:
        RunConfig.from_dict({"schema_version": 1, "model": {"num_refinement_stages": -1}})
    assert exc_info.value.message == "Invalid ModelConfig"
    assert "num_refinement_stages must be >= 0" in _messages(exc_info.value)


def test_with_seed():
    cfg = RunConfig.default()
    assert cfg.with_seed(None) is cfg
    seeded = cfg.with_seed(11)
    assert (seeded.train.seed, seeded.synth.seed) == (11, 11)
    assert seeded.model == cfg.model


def test_describe():
    cfg = RunConfig.from_dict({"schema_version": 1, "model": {"context": {"kind": "aspp"}}})
    lines = cfg.describe().splitlines()
    assert lines[0] == "Configuration description:"
    assert "6 stages." in lines[1]
    assert lines[2] == "Context module: aspp at stage_input."
    assert RunConfig.default().describe().splitlines()[2] == "Context module: none."


def test_load_run_config(tmp_path, caplog):
    assert load_run_config(None) == RunConfig.default()
    path = RunConfig.default().to_file(tmp_path / "run.toml")
    logger = logging.getLogger("gccpm_config_test")
    with caplog.at_level(logging.INFO, logger="gccpm_config_test"):
        cfg = load_run_config(path, seed=3, logger=logger)
    assert cfg == RunConfig.default().with_seed(3)
    assert len(caplog.records) == 1
    assert caplog.records[0].getMessage() == compress_and_encode_string(path.read_text())
