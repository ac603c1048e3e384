"""
Тесты LoRA, кросс-ветвевого внимания и ViT-блока
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.errors import DimensionError, ParameterError
from src.fusion import (CbaConfig, CrossBranchAttention, LoraLinear, LoraPair, VitBlock,
                        cross_branch_attention, lora_forward, residual_fuse, scaled_dot_attention,
                        vit_block_forward)
from src.tensor import Tensor, grad_check, precision


class TestLora:
    """Тесты низкоранговой добавки"""

    def test_zero_up_is_identity(self):
        """Свежая пара LoRA не меняет выход (побитово)"""
        rng = np.random.default_rng(0)
        weight = Tensor(rng.standard_normal((6, 5)))
        x = Tensor(rng.standard_normal((3, 6)))
        pair = LoraPair(6, 5, 2, rng)
        assert lora_forward(x, weight, pair).data.tobytes() == (x @ weight).data.tobytes()

    def test_delta_weight(self):
        """Выход совпадает с x · (W + α/r · down · up)"""
        rng = np.random.default_rng(1)
        with precision(np.float64):
            weight = Tensor(rng.standard_normal((4, 3)))
            pair = LoraPair(4, 3, 2, rng, alpha=4.0)
            pair.up.data[...] = rng.standard_normal((2, 3))
            x = Tensor(rng.standard_normal((5, 4)))
            out = lora_forward(x, weight, pair).data
        assert pair.scale == 2.0
        np.testing.assert_allclose(out, x.data @ (weight.data + pair.delta_weight()), atol=1e-10)

    def test_rank_too_large(self):
        """Ранг больше min(d_in, d_out)"""
        with pytest.raises(ParameterError):
            LoraPair(4, 3, 4, np.random.default_rng(0))

    def test_only_lora_trainable_after_freeze(self):
        """После заморозки базового слоя обучаются только down и up"""
        layer = LoraLinear(4, 4, np.random.default_rng(2)).freeze()
        assert layer.num_parameters(trainable_only=True) == 0
        layer.attach_lora(2, np.random.default_rng(3))
        names = [n for n, p in layer.named_parameters() if p.requires_grad]
        assert names == ['lora.down', 'lora.up']

    def test_gradient_reaches_lora_only(self):
        """Градиент доходит до LoRA, но не до замороженного веса"""
        layer = LoraLinear(3, 2, np.random.default_rng(4)).freeze()
        layer.attach_lora(1, np.random.default_rng(5))
        layer(Tensor(np.ones((2, 3)))).sum().backward()
        assert layer.base.weight.grad is None
        assert layer.lora.up.grad is not None


class TestAttention:
    """Тесты внимания"""

    def test_weights_rows_sum_to_one(self):
        """Строки матрицы внимания - распределения"""
        rng = np.random.default_rng(6)
        q, k, v = (Tensor(rng.standard_normal((5, 8))) for _ in range(3))
        out, weights = scaled_dot_attention(q, k, v, heads=2)
        assert out.shape == (5, 8)
        assert weights.shape == (2, 5, 5)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, rtol=1e-5)

    def test_heads_must_divide(self):
        """Размерность не делится на число голов"""
        x = Tensor(np.ones((3, 5)))
        with pytest.raises(DimensionError):
            scaled_dot_attention(x, x, x, heads=2)

    def test_cba_shapes(self):
        """F_cba имеет размерность замороженной ветви"""
        rng = np.random.default_rng(7)
        cba = CrossBranchAttention(CbaConfig(d_mamba=6, d_sam=10, heads=2, d_k=3, d_v=4), rng)
        out, weights = cross_branch_attention(Tensor(rng.standard_normal((2, 7, 6))),
                                              Tensor(rng.standard_normal((2, 7, 10))), cba,
                                              return_weights=True)
        assert out.shape == (2, 7, 10)
        assert weights.shape == (2, 2, 7, 7)

    def test_cba_token_mismatch(self):
        """Разное число токенов у ветвей"""
        rng = np.random.default_rng(8)
        cba = CrossBranchAttention(CbaConfig(d_mamba=4, d_sam=4, heads=1, d_k=2, d_v=2), rng)
        with pytest.raises(DimensionError):
            cba(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 4))))

    def test_cba_constant_values(self):
        """Если все значения одинаковы, выход не зависит от запросов"""
        rng = np.random.default_rng(9)
        with precision(np.float64):
            cba = CrossBranchAttention(CbaConfig(d_mamba=3, d_sam=4, heads=1, d_k=2, d_v=2), rng)
            f_sam = Tensor(np.tile(rng.standard_normal(4), (5, 1)))
            a = cba(Tensor(rng.standard_normal((5, 3))), f_sam).data
            b = cba(Tensor(rng.standard_normal((5, 3))), f_sam).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_residual_fuse(self):
        """F_fused = F_sam + F_cba, формы должны совпадать"""
        out = residual_fuse(Tensor(np.ones((2, 3))), Tensor(np.full((2, 3), 2.0)))
        np.testing.assert_allclose(out.data, 3.0)
        with pytest.raises(DimensionError):
            residual_fuse(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_cba_gradient(self):
        """Градиент CBA по признакам специализированной ветви"""
        rng = np.random.default_rng(10)
        with precision(np.float64):
            cba = CrossBranchAttention(CbaConfig(d_mamba=3, d_sam=4, heads=2, d_k=2, d_v=2), rng)
            f_sam = Tensor(rng.standard_normal((3, 4)))
            error = grad_check(lambda t: (cross_branch_attention(t, f_sam, cba) * f_sam).sum(),
                               rng.standard_normal((3, 3)), eps=1e-6)
        assert error < 1e-4


class TestVitBlock:
    """Тесты ViT-блока"""

    @pytest.fixture
    def block(self):
        return VitBlock(8, 2, np.random.default_rng(11), mlp_ratio=2)

    def test_shape(self, block):
        """Форма токенов сохраняется, ведущие оси допустимы"""
        assert vit_block_forward(block, Tensor(np.ones((2, 3, 5, 8)))).shape == (2, 3, 5, 8)

    def test_zero_hooks_are_identity(self, block):
        """Нулевые добавки после MSA и MLP не меняют выход"""
        x = Tensor(np.random.default_rng(12).standard_normal((4, 8)))
        zero = lambda t: t * 0.0
        np.testing.assert_array_equal(block(x, zero, zero).data, block(x).data)

    def test_hook_sees_attention_output(self, block):
        """Хук после MSA получает x + MSA(norm(x))"""
        x = Tensor(np.random.default_rng(13).standard_normal((4, 8)))
        seen = []

        def capture(t):
            seen.append(t.data.copy())
            return t * 0.0

        block(x, after_attention=capture)
        np.testing.assert_allclose(seen[0], (x + block.attention(x)).data, atol=1e-6)

    def test_lora_attach_counts(self, block):
        """LoRA на q, k, v: по 2·dim·r параметров"""
        block.freeze()
        block.attach_lora(2, np.random.default_rng(14))
        assert block.num_parameters(trainable_only=True) == 3 * 2 * 8 * 2

    def test_wrong_width(self, block):
        """Неверная размерность токенов"""
        with pytest.raises(DimensionError):
            block(Tensor(np.ones((4, 6))))

    def test_gradient(self):
        """Градиент блока по токенам"""
        with precision(np.float64):
            block = VitBlock(8, 2, np.random.default_rng(15), mlp_ratio=2)
            error = grad_check(lambda t: (block(t) ** 2).mean(),
                               np.random.default_rng(16).standard_normal((4, 8)), eps=1e-6)
        assert error < 1e-4
