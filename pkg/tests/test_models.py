"""
Тесты моделей, контракта заморозки и учёта параметров
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import ModelSettings
from src.errors import DimensionError, ParameterError
from src.models import (AdapterModel, Decoder, DualBranchModel, FreezePolicy, PatchEmbed,
                        adapter_model_forward, assert_frozen, build_model, decode_2d, decode_3d,
                        dual_branch_forward, lora_bypassed, parameter_table, patchify)
from src.tensor import Tensor, no_grad
from src.validator import tiny_settings


@pytest.fixture
def dual():
    return build_model('dual_branch', tiny_settings('dual_branch'), seed=0)


@pytest.fixture
def adapter():
    return build_model('adapter_mfgc', tiny_settings('adapter_mfgc'), seed=0)


class TestPatches:
    """Тесты разбиения на патчи"""

    def test_patchify_layout(self):
        """Патч (i, j) содержит пиксели блока i, j"""
        images = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        tokens = patchify(Tensor(images), 2).data
        assert tokens.shape == (1, 4, 4)
        np.testing.assert_array_equal(tokens[0, 1], [2, 3, 6, 7])

    def test_patchify_indivisible(self):
        """Размер не делится на патч"""
        with pytest.raises(DimensionError):
            patchify(Tensor(np.ones((1, 1, 5, 4))), 2)

    def test_patch_embed_grid(self):
        """Сетка патчей должна совпадать с позиционными эмбеддингами"""
        embed = PatchEmbed(1, 8, 4, 2, np.random.default_rng(0))
        assert embed(Tensor(np.ones((2, 1, 8, 8)))).shape == (2, 4, 8)
        with pytest.raises(DimensionError):
            embed(Tensor(np.ones((2, 1, 12, 12))))


class TestDecoder:
    """Тесты декодера"""

    def test_decode_3d_upsamples_plane(self):
        """Каждая ступень удваивает H и W, глубина сохраняется"""
        decoder = Decoder(8, 4, 2, np.random.default_rng(0), min_channels=2)
        assert decode_3d(decoder, Tensor(np.ones((1, 8, 3, 2, 2)))).shape == (1, 4, 3, 8, 8)

    def test_decode_2d(self):
        """2D-карта декодируется как объём глубины 1"""
        decoder = Decoder(8, 3, 1, np.random.default_rng(0), min_channels=2)
        assert decode_2d(decoder, Tensor(np.ones((2, 8, 2, 2)))).shape == (2, 3, 4, 4)

    def test_wrong_channels(self):
        """Каналы признаков не совпадают с декодером"""
        decoder = Decoder(8, 3, 1, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            decode_3d(decoder, Tensor(np.ones((1, 6, 1, 2, 2))))

    def test_no_stages(self):
        """Нужна хотя бы одна ступень"""
        with pytest.raises(ParameterError):
            Decoder(8, 3, 0, np.random.default_rng(0))


class TestDualBranch:
    """Тесты двухветвевой модели"""

    def test_logit_shape(self, dual):
        """Срез [C, H, W] -> логиты [K, H, W]; пакет тоже"""
        with no_grad():
            assert dual_branch_forward(dual, Tensor(np.ones((1, 8, 8)))).shape == (4, 8, 8)
            assert dual(Tensor(np.ones((3, 1, 8, 8)))).shape == (3, 4, 8, 8)

    def test_generalist_frozen(self, dual):
        """Универсальная ветвь заморожена, остальное обучается"""
        report = assert_frozen(dual.policy, dual)
        assert report.all_passed
        assert report.frozen == dual.generalist.num_parameters()
        assert all(not n.startswith('generalist') for n, p in dual.named_parameters() if p.requires_grad)

    def test_indivisible_size(self, dual):
        """Размер среза не делится на патч"""
        with pytest.raises(DimensionError):
            dual(Tensor(np.ones((1, 1, 6, 8))))

    def test_neck(self):
        """Шейка переводит признаки в neck_dim"""
        settings = tiny_settings('dual_branch')
        settings.neck_dim = 8
        model = DualBranchModel(settings, np.random.default_rng(0))
        assert model.neck is not None
        assert model.decoder.in_dim == 8
        with no_grad():
            assert model(Tensor(np.ones((1, 8, 8)))).shape == (4, 8, 8)


class TestAdapterModel:
    """Тесты модели с адаптерами"""

    def test_logit_shape(self, adapter):
        """Объём [C, D, H, W] -> логиты [K, D, H, W]"""
        with no_grad():
            assert adapter_model_forward(adapter, Tensor(np.ones((1, 2, 8, 8)))).shape == (4, 2, 8, 8)

    @pytest.mark.parametrize('kind', ['adapter_conv', 'adapter_mfgc', 'adapter_lora'])
    def test_init_identity(self, kind):
        """При инициализации кодировщик совпадает с замороженным побитово"""
        model = build_model(kind, tiny_settings(kind), seed=1)
        volume = Tensor(np.random.default_rng(2).random((1, 1, 2, 8, 8)))
        with no_grad():
            adapted = model.encode(volume).data
            frozen = model.encode(volume, with_adapters=False).data
        assert adapted.tobytes() == frozen.tobytes()

    def test_depth_mismatch(self, adapter):
        """Глубина объёма не совпадает с глубиной адаптеров"""
        with pytest.raises(DimensionError):
            adapter(Tensor(np.ones((1, 1, 3, 8, 8))))

    def test_lora_only_in_lora_kind(self):
        """LoRA-параметры есть только у adapter_lora"""
        with_lora = build_model('adapter_lora', tiny_settings('adapter_lora'))
        without = build_model('adapter_conv', tiny_settings('adapter_conv'))
        assert any('.lora.' in name for name, _ in with_lora.named_parameters())
        assert not any('.lora.' in name for name, _ in without.named_parameters())

    def test_lora_bypass_restores(self):
        """lora_bypassed временно снимает LoRA и возвращает её"""
        model = build_model('adapter_lora', tiny_settings('adapter_lora'))
        q = model.generalist.blocks[0].q
        pair = q.lora
        with lora_bypassed(model):
            assert q.lora is None
        assert q.lora is pair

    def test_adapter_ratio_cap(self):
        """Слишком большой адаптер отклоняется"""
        settings = tiny_settings('adapter_conv')
        settings.max_adapter_ratio = 0.01
        with pytest.raises(ParameterError):
            AdapterModel(settings, np.random.default_rng(0))

    @pytest.mark.parametrize('kind', ['adapter_conv', 'adapter_mfgc'])
    def test_default_adapter_ratio(self, kind):
        """Адаптер по умолчанию (D_adapter=16) не больше 10% замороженного блока"""
        settings = ModelSettings.for_kind(kind, sam_blocks=1, volume_depth=2)
        assert settings.adapter_dim == 16
        assert settings.max_adapter_ratio == 0.10
        model = AdapterModel(settings, np.random.default_rng(0))
        assert model.adapter_fraction <= 0.10


class TestFreeze:
    """Тесты контроля заморозки"""

    def test_detects_change(self, adapter):
        """Изменение замороженного веса обнаруживается"""
        name = adapter.policy.frozen[0]
        dict(adapter.named_parameters())[name].data[...] += 1.0
        report = assert_frozen(adapter.policy, adapter)
        assert report.failed == [name]

    def test_detects_unfrozen(self, adapter):
        """Размороженный параметр считается нарушением"""
        name = adapter.policy.frozen[-1]
        dict(adapter.named_parameters())[name].requires_grad = True
        assert not assert_frozen(adapter.policy, adapter).all_passed

    def test_snapshot_hashes(self, dual):
        """Снимок хранит хэш для каждого замороженного параметра"""
        policy = FreezePolicy.snapshot(dual)
        assert set(policy.hashes) == set(policy.frozen)
        assert policy.hashes == dual.policy.hashes


class TestFactory:
    """Тесты фабрики и учёта параметров"""

    def test_unknown_kind(self):
        """Неизвестный вид модели"""
        with pytest.raises(ParameterError):
            build_model('unet')

    def test_seed_determinism(self):
        """Одинаковый seed - одинаковые веса"""
        a = build_model('adapter_conv', tiny_settings('adapter_conv'), seed=3)
        b = build_model('adapter_conv', tiny_settings('adapter_conv'), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_parameter_table(self, dual):
        """Таблица покрывает все параметры"""
        rows = parameter_table(dual)
        assert sum(r.count for r in rows) == dual.num_parameters()
        assert sum(r.count for r in rows if r.frozen) == dual.generalist.num_parameters()
