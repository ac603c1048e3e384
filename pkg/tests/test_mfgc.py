"""
Тесты DCT-базиса и частотного гейтирования
"""

import pytest
import sys
from pathlib import Path

import numpy as np
from scipy.fft import dctn

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.errors import DimensionError, ParameterError
from src.mfgc import (FreqCoeffs, FreqIndexSet, GateMlp, MfgcBlock, basis_matrix, dct_basis,
                      dct_forward, freq_gate, freq_pool, idct, mfgc_forward)
from src.tensor import Tensor, grad_check, precision


class TestFreqIndexSet:
    """Тесты наборов частот"""

    def test_full_size(self):
        """Полный набор содержит D·H·W индексов"""
        assert FreqIndexSet.full((2, 3, 4)).size == 24

    def test_low_frequency(self):
        """Низкочастотный куб обрезается границами"""
        index_set = FreqIndexSet.low_frequency((1, 4, 4))
        assert index_set.size == 4
        assert all(k[0] == 0 for k in index_set.indices)

    def test_out_of_bounds(self):
        """Индекс вне границ"""
        with pytest.raises(ParameterError):
            FreqIndexSet(indices=((0, 0, 3),), bounds=(2, 2, 2))

    def test_duplicate(self):
        """Повторяющийся индекс"""
        with pytest.raises(ParameterError):
            FreqIndexSet(indices=((0, 0, 0), (0, 0, 0)), bounds=(2, 2, 2))


class TestDct:
    """Тесты преобразования"""

    def test_dc_basis_constant(self):
        """Базис (0, 0, 0) постоянен и равен 1/√(DHW)"""
        basis = dct_basis((2, 3, 4), (0, 0, 0)).data
        np.testing.assert_allclose(basis, 1.0 / np.sqrt(24), rtol=1e-6)

    def test_basis_outside_bounds(self):
        """Частота вне границ"""
        with pytest.raises(ParameterError):
            dct_basis((2, 2, 2), (2, 0, 0))

    def test_orthonormal(self):
        """B Bᵀ = I на полном наборе"""
        basis = basis_matrix(FreqIndexSet.full((3, 2, 4))).data.astype(np.float64)
        np.testing.assert_allclose(basis @ basis.T, np.eye(24), atol=1e-6)

    def test_matches_scipy(self):
        """Коэффициенты совпадают с ортонормированным DCT-II scipy"""
        x = np.random.default_rng(0).standard_normal((3, 4, 5))
        index_set = FreqIndexSet.full((3, 4, 5))
        with precision(np.float64):
            coeffs = dct_forward(Tensor(x[None]), index_set).values.data[0]
        expected = dctn(x, type=2, norm='ortho')
        np.testing.assert_allclose(coeffs, [expected[k] for k in index_set.indices], atol=1e-10)

    def test_roundtrip(self):
        """idct(dct(x)) == x на полном наборе"""
        with precision(np.float64):
            x = Tensor(np.random.default_rng(1).standard_normal((2, 2, 4, 4, 4)))
            back = idct(dct_forward(x, FreqIndexSet.full((4, 4, 4))))
        np.testing.assert_allclose(back.data, x.data, atol=1e-10)

    def test_partial_projection(self):
        """На неполном наборе idct - проекция (повторное применение не меняет результат)"""
        index_set = FreqIndexSet.low_frequency((4, 4, 4))
        with precision(np.float64):
            x = Tensor(np.random.default_rng(2).standard_normal((1, 4, 4, 4)))
            once = idct(dct_forward(x, index_set))
            twice = idct(dct_forward(once, index_set))
        np.testing.assert_allclose(twice.data, once.data, atol=1e-10)

    def test_bounds_mismatch(self):
        """Объём не совпадает с границами набора"""
        with pytest.raises(DimensionError):
            dct_forward(Tensor(np.zeros((1, 3, 3, 3))), FreqIndexSet.full((2, 2, 2)))


class TestGating:
    """Тесты пулинга и гейта"""

    def test_pool_statistics(self):
        """avg, max, min по частотам"""
        index_set = FreqIndexSet.full((1, 1, 2))
        values = Tensor(np.array([[1.0, 3.0], [-2.0, 0.0]]))
        stats = freq_pool(FreqCoeffs(values=values, index_set=index_set))
        np.testing.assert_allclose(stats.avg.data, [2.0, -1.0])
        np.testing.assert_allclose(stats.max.data, [3.0, 0.0])
        np.testing.assert_allclose(stats.min.data, [1.0, -2.0])

    def test_gate_range(self):
        """Гейт в (0, 1) для каждого канала"""
        gate = GateMlp(4, np.random.default_rng(3), reduction=2)
        index_set = FreqIndexSet.full((2, 2, 2))
        coeffs = dct_forward(Tensor(np.random.default_rng(4).standard_normal((4, 2, 2, 2))), index_set)
        mask = freq_gate(freq_pool(coeffs), gate).data
        assert mask.shape == (4,)
        assert np.all((mask > 0) & (mask < 1))

    def test_gate_channel_mismatch(self):
        """Число каналов гейта не совпадает со статистиками"""
        gate = GateMlp(3, np.random.default_rng(5))
        coeffs = dct_forward(Tensor(np.zeros((4, 2, 2, 2))), FreqIndexSet.full((2, 2, 2)))
        with pytest.raises(DimensionError):
            freq_gate(freq_pool(coeffs), gate)

    def test_invalid_gate_settings(self):
        """Неверное сжатие или активация"""
        with pytest.raises(ParameterError):
            GateMlp(4, np.random.default_rng(0), reduction=0)
        with pytest.raises(ParameterError):
            GateMlp(4, np.random.default_rng(0), activation='tanh')


class TestMfgcBlock:
    """Тесты блока MFGC"""

    def test_unit_gate_identity(self):
        """Гейт из единиц на полном наборе возвращает вход"""
        block = MfgcBlock(2, (2, 3, 2), np.random.default_rng(6))
        with precision(np.float64):
            x = Tensor(np.random.default_rng(7).standard_normal((2, 2, 3, 2)))
            out = mfgc_forward(x, block, gate_override=np.ones(2))
        np.testing.assert_allclose(out.data, x.data, atol=1e-10)

    def test_scalar_gate_scales(self):
        """Гейт канала одинаков на всех частотах: выход = m_c · x_c"""
        block = MfgcBlock(2, (2, 2, 2), np.random.default_rng(8))
        with precision(np.float64):
            x = Tensor(np.random.default_rng(9).standard_normal((2, 2, 2, 2)))
            out = mfgc_forward(x, block, gate_override=np.array([0.25, 0.5]))
        np.testing.assert_allclose(out.data[0], 0.25 * x.data[0], atol=1e-10)
        np.testing.assert_allclose(out.data[1], 0.5 * x.data[1], atol=1e-10)

    def test_batched_shape(self):
        """Пакетный вход [B, C, D, H, W]"""
        block = MfgcBlock(3, (2, 4, 4), np.random.default_rng(10), low_frequency=True)
        assert block(Tensor(np.ones((2, 3, 2, 4, 4)))).shape == (2, 3, 2, 4, 4)

    def test_gradient(self):
        """Градиент блока по входу"""
        with precision(np.float64):
            block = MfgcBlock(2, (2, 2, 2), np.random.default_rng(11), reduction=2)
            error = grad_check(lambda t: (mfgc_forward(t, block) ** 2).sum(),
                               np.random.default_rng(12).standard_normal((2, 2, 2, 2)), eps=1e-6)
        assert error < 1e-4
