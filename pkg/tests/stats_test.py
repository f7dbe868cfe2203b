import pytest

from gccpm._statistics import DEBUG_ITERATION_LOG_FIELDS, TrainingStatistics


@pytest.fixture
def stats():
    stats = TrainingStatistics(None)
    yield stats
    stats.close()


def test_no_iterations(stats):
    assert stats.get_performance() == "No iterations yet"
    assert stats.average_iteration_time == 0
    assert stats.samples_per_second == 0


def test_counters_and_averages(stats):
    stats.add_iteration(1, 1.0, [0.6, 0.4], 1e-3, 1.0, batch_size=4)
    stats.add_iteration(2, 0.5, [0.3, 0.2], 1e-4, 3.0, batch_size=4)
    assert stats.counters["iterations"] == 2
    assert stats.counters["samples"] == 8
    assert stats.average_iteration_time == pytest.approx(2.0)
    assert stats.samples_per_second == pytest.approx(2.0)
    assert stats.get_performance() == (
        "it 2; loss 0.500000; 3.0000s/it; Avg: 2.0000s/it, 2.00 samples/s; lr 0.0001"
    )


def test_iteration_log(tmp_path):
    path = tmp_path / "iterations.tsv"
    stats = TrainingStatistics(str(path))
    stats.add_iteration(1, 0.25, [0.125, 0.125], 4e-5, 0.5, batch_size=2)
    stats.add_iteration(2, 0.2, [0.1, 0.1], 4e-5, 0.5, batch_size=2)
    stats.close()
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == list(DEBUG_ITERATION_LOG_FIELDS)
    assert lines[1].split("\t") == ["1", "0.25", "0.125,0.125", "4e-05", "0.500000"]
    assert len(lines) == 3


def test_header_is_written_once(tmp_path):
    path = tmp_path / "iterations.tsv"
    for iteration in (1, 2):
        stats = TrainingStatistics(str(path))
        stats.add_iteration(iteration, 0.1, [0.1], 1e-3, 0.1)
        stats.close()
    lines = path.read_text().splitlines()
    assert lines[0].startswith("iteration")
    assert [line.split("\t")[0] for line in lines[1:]] == ["1", "2"]
