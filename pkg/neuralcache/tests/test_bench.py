import pytest

from neuralcache.bench import BenchConfig, run_suite
from neuralcache.errors import ConfigurationError


@pytest.fixture
def tiny_bench():
    return BenchConfig(target_psnr=80.0, base_dims=(8, 8, 8), rank_grids=[(1, 1, 1), (2, 1, 1)], repeats=2,
                       max_steps=2)


def test_stability_reports_coefficient_of_variation(tiny_bench):
    result = run_suite("stability", tiny_bench)
    assert [r["repeat"] for r in result.rows] == [0, 1]
    assert result.summary["mean_time_s"] > 0
    assert result.summary["cov"] >= 0
    assert all(r["budget_exhausted"] for r in result.rows)


def test_weak_scaling_grows_dims_with_ranks(tiny_bench):
    result = run_suite("weak-scaling", tiny_bench)
    assert [r["dims"] for r in result.rows] == ["8x8x8", "16x8x8"]
    assert [r["ranks"] for r in result.rows] == [1, 2]
    assert result.summary["mean_rank_steps"] == [2.0, 2.0]
    assert result.summary["steps_non_increasing"]


def test_strong_scaling_reports_speedups(tiny_bench):
    result = run_suite("strong-scaling", tiny_bench)
    assert [r["dims"] for r in result.rows] == ["8x8x8", "8x8x8"]
    assert result.rows[0]["speedup"] == pytest.approx(1.0)
    assert result.rows[0]["efficiency"] == pytest.approx(1.0)
    assert len(result.summary["speedups"]) == 2


def test_bench_validation():
    with pytest.raises(ConfigurationError):
        BenchConfig(repeats=1)
    with pytest.raises(ConfigurationError):
        BenchConfig(rank_grids=[])
    with pytest.raises(ConfigurationError):
        run_suite("throughput")
