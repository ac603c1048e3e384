"""
Тесты замеров сложности и пропускной способности
"""

import pytest
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.bench import SCALING_HEADER, THROUGHPUT_HEADER, bench_scaling, bench_throughput
from src.errors import ParameterError
from src.models import build_model
from src.validator import tiny_settings


class TestScaling:
    """Тесты сравнения скана и внимания"""

    def test_report(self):
        """Точка на каждую длину, отношения начиная со второй"""
        report = bench_scaling([8, 16, 32], d_model=4, repeats=3, d_state=2)
        assert [p.length for p in report.points] == [8, 16, 32]
        assert report.points[0].scan_ratio is None
        assert all(p.scan_ratio > 0 and p.attention_ratio > 0 for p in report.points[1:])
        assert math.isfinite(report.scan_exponent)
        assert all(len(row) == len(SCALING_HEADER) for row in report.rows())
        assert 'growth exponent' in report.summary()

    def test_single_length(self):
        """Одна длина: показатель роста не определён"""
        report = bench_scaling([4], d_model=2, repeats=3, d_state=2)
        assert math.isnan(report.scan_exponent)
        assert report.rows()[0][3] == ''

    def test_unsorted_lengths(self):
        """Длины не по возрастанию"""
        with pytest.raises(ParameterError):
            bench_scaling([16, 8], d_model=2)

    def test_too_few_repeats(self):
        """Меньше трёх повторов"""
        with pytest.raises(ParameterError):
            bench_scaling([8], d_model=2, repeats=2)


class TestThroughput:
    """Тесты пропускной способности"""

    def test_counts(self):
        """Учёт параметров согласован с моделью"""
        model = build_model('dual_branch', tiny_settings('dual_branch'))
        report = bench_throughput(model, (2, 1, 8, 8))
        assert report.kind == 'dual_branch'
        assert report.total == model.num_parameters()
        assert report.frozen == model.generalist.num_parameters()
        assert report.trainable + report.frozen == report.total
        assert report.samples_per_second > 0
        assert len(report.row()) == len(THROUGHPUT_HEADER)

    def test_bad_repeats(self):
        """repeats < 1"""
        model = build_model('dual_branch', tiny_settings('dual_branch'))
        with pytest.raises(ParameterError):
            bench_throughput(model, (1, 1, 8, 8), repeats=0)


@pytest.mark.slow
class TestComplexityClaim:
    """Рост времени при удвоении длины на L = 1024, 2048, 4096, d_model = 64"""

    def test_doubling_ratios(self):
        """Скан растёт не быстрее ×2.5 за удвоение, внимание - не медленнее ×3"""
        report = bench_scaling([1024, 2048, 4096], d_model=64, repeats=3)
        for point in report.points[1:]:
            assert point.scan_ratio <= 2.5, report.summary()
            assert point.attention_ratio >= 3.0, report.summary()
