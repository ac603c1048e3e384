"""
Тесты для класса Validator
"""

import pytest
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import MODEL_KINDS
from src.validator import Validator, tiny_settings


class TestValidator:
    """Тесты проверок самотестирования"""

    def test_check_dct(self):
        """Базис DCT ортонормирован, обратное преобразование точное"""
        is_valid, errors = Validator.check_dct()
        assert is_valid is True
        assert len(errors) == 0

    def test_check_scan_equivalence(self):
        """Параллельный и последовательный сканы совпадают"""
        is_valid, errors = Validator.check_scan_equivalence(cases=8, seed=3)
        assert is_valid is True, errors

    def test_check_scan_equivalence_defaults(self):
        """1000 случайных моделей с L до 256, включая дифференцируемый скан"""
        is_valid, errors = Validator.check_scan_equivalence()
        assert is_valid is True, errors

    def test_check_gradients(self):
        """Аналитические градиенты совпадают с конечными разностями"""
        is_valid, errors = Validator.check_gradients()
        assert is_valid is True, errors

    def test_check_init_identity(self):
        """Адаптеры и LoRA при инициализации не меняют выход"""
        is_valid, errors = Validator.check_init_identity()
        assert is_valid is True, errors

    def test_check_freeze(self):
        """Обучение не трогает замороженные параметры"""
        is_valid, errors = Validator.check_freeze(steps=2)
        assert is_valid is True, errors

    def test_check_freeze_fifty_steps(self):
        """50 шагов обучения: замороженные веса бит в бит прежние"""
        is_valid, errors = Validator.check_freeze(steps=50)
        assert is_valid is True, errors

    def test_run_all(self):
        """Все проверки проходят и перечислены по порядку"""
        results = Validator.run_all(scan_cases=4, freeze_steps=2)
        assert [r.name for r in results] == [
            'dct_roundtrip', 'scan_equivalence', 'grad_checks', 'init_identity', 'freeze_contract'
        ]
        assert all(r.passed for r in results), [r.detail for r in results if not r.passed]

    @pytest.mark.parametrize('kind', MODEL_KINDS)
    def test_tiny_settings_valid(self, kind):
        """Минимальные настройки проходят проверку"""
        settings = tiny_settings(kind)
        assert settings.validate() == []
        assert (settings.lora_rank > 0) == (kind == 'adapter_lora')
