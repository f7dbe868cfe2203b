from pathlib import Path

import pytest

import gccpm._cli_base

TEST_DIR = Path(__file__).parent.resolve()
SEARCH_PATH = Path(TEST_DIR / "static")


def _generate_test_params(sub_dir, *args, search_path=SEARCH_PATH):
    """Yield ``(toml, expected_message_files, *args)`` for every TOML in ``sub_dir``

    A TOML named ``NNN_name.toml`` is paired with every ``NNN_name*.txt`` next
    to it; each of those holds text that must appear on stderr.
    """
    _dir = search_path
    tomls = sorted(_dir.rglob(f"*validation_test/{sub_dir}/*.toml"))
    for toml in tomls:
        stem = toml.stem
        toml = str(toml)
        errors = sorted(map(str, _dir.rglob(f"*validation_test/{sub_dir}/{stem}*.txt")))
        if not errors:
            raise ValueError(f"TOML file: {toml} has no corresponding expected messages")
        yield toml, errors, *args


def zero_exit(exit_code):
    return exit_code == 0


def non_zero_exit(exit_code):
    return exit_code != 0


# Failing TOMLs, found in `fail` directory, expect a non-zero return code
FAIL_TESTS = list(_generate_test_params("fail", non_zero_exit))
# Passing TOMLs, found in `pass` directory, expect a zero return code
PASS_TESTS = list(_generate_test_params("pass", zero_exit))


@pytest.mark.parametrize("toml,error_txts,exit_check", FAIL_TESTS + PASS_TESTS)
def test_validation(capsys, toml, error_txts, exit_check):
    """Run `gccpm validate` on a fixture as a user would"""
    with pytest.raises(SystemExit) as exc_info:
        gccpm._cli_base.main(["validate", toml, "--no-describe"])
    assert exit_check(exc_info.value.code)
    out, err = capsys.readouterr()
    for error_txt in error_txts:
        with open(error_txt, "rt") as fh:
            expected_message = fh.read()
        assert expected_message, f"{error_txt!r} is empty"
        assert expected_message in err


def test_failures_end_with_one_error_line(capsys):
    toml = SEARCH_PATH / "toml_validation_test" / "fail" / "003_codec_mismatch.toml"
    with pytest.raises(SystemExit) as exc_info:
        gccpm._cli_base.main(["validate", str(toml)])
    assert exc_info.value.code == 1
    _, err = capsys.readouterr()
    error_lines = [line for line in err.splitlines() if line.startswith("gccpm: error:")]
    assert error_lines == [
        "gccpm: error: validate: codec.heatmap_size (16) must equal model.heatmap_size (32)"
    ]


def test_description_is_logged(capsys):
    toml = SEARCH_PATH / "toml_validation_test" / "pass" / "002_small_run.toml"
    with pytest.raises(SystemExit) as exc_info:
        gccpm._cli_base.main(["validate", str(toml)])
    assert exc_info.value.code == 0
    _, err = capsys.readouterr()
    assert "Configuration description:" in err
    assert "Context module: u_shaped at stage_input." in err
    assert "500 iterations" in err


@pytest.mark.parametrize(
    "toml", sorted((TEST_DIR.parent / "docs" / "_static" / "example_tomls").glob("*.toml"))
)
def test_documented_examples_validate(capsys, toml):
    with pytest.raises(SystemExit) as exc_info:
        gccpm._cli_base.main(["validate", str(toml), "--no-describe"])
    assert exc_info.value.code == 0, capsys.readouterr().err
