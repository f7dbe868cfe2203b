import sys

import numpy as np
import pytest
import rtoml

if sys.version_info < (3, 11):
    from exceptiongroup import BaseExceptionGroup

from gccpm._keypoints import NUM_KEYPOINTS
from gccpm.codec import Visibility
from gccpm.data import (
    AnnotationError,
    AnnotationRecord,
    SynthConfig,
    generate_dataset,
    load_annotations,
    load_annotations_csv,
    load_or_generate,
    read_dataset,
    save_annotations,
    write_dataset,
)
from gccpm.data.annotations import ANNOTATIONS_FILE


def _record(image="images/00000.png", **kwargs):
    values = dict(
        image=image,
        keypoints=[[float(i), float(2 * i)] for i in range(NUM_KEYPOINTS)],
        visibility=[2] * NUM_KEYPOINTS,
        head_size=30.0,
    )
    values.update(kwargs)
    return AnnotationRecord(**values)


def test_synthetic_samples_are_seeded(tiny_synth):
    a = generate_dataset(3, tiny_synth, 4)
    b = generate_dataset(3, tiny_synth, 2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.keypoints.points, y.keypoints.points)
    assert not np.array_equal(a[0].image, generate_dataset(4, tiny_synth, 1)[0].image)


@pytest.mark.parametrize("background", ["solid", "noise"])
@pytest.mark.parametrize("figures", [1, 3])
def test_synthetic_keypoints_stay_inside(background, figures):
    cfg = SynthConfig(image_size=96, background=background, figures=figures)
    margin = cfg.margin_frac * cfg.image_size
    for sample in generate_dataset(0, cfg, 10):
        assert sample.image.shape == (96, 96, 3)
        assert sample.image.dtype == np.uint8
        points = sample.keypoints.points
        assert points.shape == (NUM_KEYPOINTS, 2)
        assert (points >= margin).all()
        assert (points <= cfg.image_size - 1 - margin).all()
        assert (sample.keypoints.visibility == Visibility.visible).all()
        assert sample.keypoints.head_size > 0


def test_negative_count():
    with pytest.raises(ValueError, match="count"):
        generate_dataset(0, SynthConfig(), -1)


@pytest.mark.parametrize(
    "kwargs,message",
    [
        (dict(image_size=16), "image_size"),
        (dict(limb_thickness=[4, 2]), "limb_thickness"),
        (dict(figures=0), "figures"),
        (dict(margin_frac=0.5), "margin_frac"),
    ],
)
def test_invalid_synth_config(kwargs, message):
    with pytest.raises(BaseExceptionGroup) as exc_info:
        SynthConfig(**kwargs)
    assert message in str(exc_info.value.exceptions[0])


def test_dataset_round_trip(tmp_path, tiny_synth):
    samples = generate_dataset(1, tiny_synth, 3)
    document = write_dataset(tmp_path / "data", samples)
    assert document == tmp_path / "data" / ANNOTATIONS_FILE
    assert (tmp_path / "data" / "images" / "00002.png").exists()
    for directory in (tmp_path / "data", document):
        loaded = read_dataset(directory)
        assert len(loaded) == 3
        for original, restored in zip(samples, loaded):
            np.testing.assert_array_equal(original.image, restored.image)
            np.testing.assert_allclose(original.keypoints.points, restored.keypoints.points)
            assert restored.keypoints.head_size == pytest.approx(original.keypoints.head_size)


def test_load_or_generate(tmp_path, tiny_synth):
    generated = load_or_generate(None, tiny_synth, 2, NUM_KEYPOINTS)
    assert len(generated) == 2
    write_dataset(tmp_path, generated)
    assert len(load_or_generate(tmp_path, tiny_synth, 99, NUM_KEYPOINTS)) == 2


def test_records_name_every_problem(tmp_path):
    path = save_annotations(
        [_record(), _record(visibility=[3] * NUM_KEYPOINTS), _record(head_size=0.0)],
        tmp_path / "a.toml",
    )
    with pytest.raises(BaseExceptionGroup) as exc_info:
        load_annotations(path)
    errors = exc_info.value.exceptions
    assert all(isinstance(e, AnnotationError) for e in errors)
    assert [e.record for e in errors] == [1, 2]
    assert "visibility must be 0, 1 or 2" in str(errors[0])
    assert str(errors[1]).startswith("record 2: head_size")


def test_schema_mismatch(tmp_path):
    path = save_annotations([_record()], tmp_path / "a.toml")
    document = rtoml.loads(path.read_text())
    document["records"][0]["colour"] = "red"
    with open(path, "w") as fh:
        rtoml.dump(document, fh)
    with pytest.raises(BaseExceptionGroup) as exc_info:
        load_annotations(path)
    assert "does not match the schema" in str(exc_info.value.exceptions[0])


@pytest.mark.parametrize(
    "text,message",
    [
        ("schema_version = 2\nrecords = []\n", "schema_version 2"),
        ("schema_version = 1\nrecords = []\nextra = 1\n", "unknown top level keys: extra"),
        ("schema_version = [\n", "not valid TOML"),
    ],
)
def test_document_errors(tmp_path, text, message):
    path = tmp_path / "a.toml"
    path.write_text(text)
    with pytest.raises(AnnotationError, match=message):
        load_annotations(path)


def test_missing_document(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_annotations(tmp_path / "nothing.toml")


def test_csv_conversion(tmp_path):
    triples = ",".join(f"{i},{i + 1},2" for i in range(NUM_KEYPOINTS))
    path = tmp_path / "a.csv"
    path.write_text(f"image,head_size,...\nimg/a.png,25,{triples}\n\nimg/b.png,26,{triples}\n")
    records = load_annotations_csv(path)
    assert [r.image for r in records] == ["img/a.png", "img/b.png"]
    assert records[0].keypoints[3] == [3.0, 4.0]
    assert records[1].head_size == 26.0


def test_csv_errors_name_the_line(tmp_path):
    triples = ",".join(f"{i},{i},2" for i in range(NUM_KEYPOINTS))
    path = tmp_path / "a.csv"
    path.write_text(f"a.png,25,{triples}\nb.png,25,1,2\nc.png,x,{triples}\n")
    with pytest.raises(BaseExceptionGroup) as exc_info:
        load_annotations_csv(path)
    assert [e.record for e in exc_info.value.exceptions] == [2, 3]
