"""
Тесты командной строки
"""

import pytest
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import build_parser, dispatch, preprocess
from src.config import DataSettings, RunConfig
from src.data import LabeledVolume
from src.metrics import METRIC_HEADER

TINY_MODEL = """
[model]
kind = adapter_conv
sam_dim = 16
sam_blocks = 2
sam_heads = 2
patch = 4
image_size = 8
mlp_ratio = 2
mamba_dim = 8
d_state = 4
expand = 1
cba_heads = 2
cba_dk = 4
volume_depth = 2
adapter_dim = 4
adapter_d_state = 2
max_adapter_ratio = 10.0
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv('MAMBASAM_SEED', raising=False)
    monkeypatch.delenv('MAMBASAM_OUTPUT_DIR', raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    """Минимальный запуск: три фантома 16³, одна эпоха, патч 2×8×8"""
    text = (
        f"[run]\nseed = 0\noutput_dir = {tmp_path / 'runs'}\n"
        + TINY_MODEL
        + f"[data]\ndata_dir = {tmp_path / 'data'}\ncases = 3\nvolume_dims = 16, 16, 16\n"
          "patch_size = 2, 8, 8\npatches_per_case = 1\nslices_per_case = 1\n"
          "[train]\nepochs = 1\nbatch_size = 1\nwarmup_steps = 0\n"
          "[bench]\nlengths = 8, 16\nd_model = 4\nrepeats = 3\n"
    )
    path = tmp_path / 'run.cfg'
    path.write_text(text, encoding='utf-8')
    return path


class TestDispatch:
    """Тесты разбора подкоманд"""

    def test_missing_data(self, tiny_config, tmp_path, capsys):
        """Пустой каталог данных - код 1"""
        assert dispatch(['train', '--config', str(tiny_config), '--data', str(tmp_path / 'nowhere')]) == 1
        assert 'Ошибка' in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        """Неизвестная подкоманда - код 2"""
        assert dispatch(['launch']) == 2
        assert 'launch' in capsys.readouterr().err

    def test_no_arguments(self):
        """Без подкоманды - код 2"""
        assert dispatch([]) == 2

    def test_missing_config(self, tmp_path, capsys):
        """Отсутствующий файл конфигурации - код 1 и сообщение"""
        assert dispatch(['train', '--config', str(tmp_path / 'missing.cfg')]) == 1
        assert 'config not found' in capsys.readouterr().err

    def test_eval_requires_checkpoint(self):
        """eval без --checkpoint - ошибка разбора"""
        assert dispatch(['eval']) == 2

    def test_parser_commands(self):
        """Все подкоманды разбираются"""
        args = build_parser().parse_args(['selftest', '--scan-cases', '5'])
        assert args.command == 'selftest' and args.scan_cases == 5

    def test_selftest_defaults(self):
        """По умолчанию 1000 случаев скана и 50 шагов проверки заморозки"""
        args = build_parser().parse_args(['selftest'])
        assert args.scan_cases == 1000
        assert args.freeze_steps == 50


class TestCommands:
    """Тесты подкоманд на минимальной конфигурации"""

    def test_phantom_train_eval(self, tiny_config, tmp_path, capsys):
        """Генерация набора, обучение одной эпохи и оценка контрольной точки"""
        assert dispatch(['phantom', '--config', str(tiny_config)]) == 0
        for split in ('train', 'val', 'test'):
            assert len(list((tmp_path / 'data' / split).glob('case_*.msv'))) == 1

        assert dispatch(['train', '--config', str(tiny_config)]) == 0
        runs = tmp_path / 'runs'
        checkpoint = runs / 'adapter_conv_seed0.ckpt'
        assert checkpoint.is_file()
        for suffix in ('config.json', 'history.csv', 'parameters.csv'):
            assert (runs / f"adapter_conv_seed0_{suffix}").is_file()

        rerun = tmp_path / 'rerun'
        assert dispatch(['train', '--config', str(tiny_config), '--out', str(rerun)]) == 0
        assert (rerun / 'adapter_conv_seed0.ckpt').read_bytes() == checkpoint.read_bytes()

        assert dispatch(['eval', '--config', str(tiny_config), '--checkpoint', str(checkpoint)]) == 0
        lines = (runs / 'adapter_conv_seed0_metrics.csv').read_text(encoding='utf-8').splitlines()
        assert lines[0] == ','.join(METRIC_HEADER)
        assert lines[-1].split(',')[1] == 'mean'
        assert 'Dice' in capsys.readouterr().out

    def test_train_patch_mismatch(self, tiny_config, tmp_path, capsys):
        """Патч не совпадает со входом модели - ошибка конфигурации"""
        bad = tmp_path / 'bad.cfg'
        bad.write_text(tiny_config.read_text(encoding='utf-8').replace('image_size = 8', 'image_size = 16'),
                       encoding='utf-8')
        assert dispatch(['train', '--config', str(bad)]) == 1
        assert 'Ошибка конфигурации' in capsys.readouterr().err

    def test_bench(self, tiny_config, tmp_path):
        """Замер масштабирования и пропускной способности"""
        out = tmp_path / 'bench' / 'scaling.csv'
        assert dispatch(['bench', '--config', str(tiny_config), '--out', str(out), '--throughput']) == 0
        assert out.read_text(encoding='utf-8').splitlines()[0].startswith('length,')
        assert (out.parent / 'bench_throughput.csv').is_file()

    def test_selftest(self, capsys):
        """Самопроверка печатает PASS по каждой проверке"""
        assert dispatch(['selftest', '--scan-cases', '4', '--freeze-steps', '2']) == 0
        out = capsys.readouterr().out
        assert out.count('PASS') == 5


class TestPreprocess:
    """Тесты предобработки объёмов перед выборкой патчей"""

    @staticmethod
    def padded_volume():
        image = np.zeros((16, 16, 16))
        image[4:12, 4:12, 4:12] = np.linspace(0.2, 1.0, 512).reshape(8, 8, 8)
        labels = np.zeros((16, 16, 16), dtype=np.uint8)
        labels[6:10, 6:10, 6:10] = 3
        return LabeledVolume(image=image, labels=labels)

    def test_crop_and_normalize(self):
        """Нулевые поля обрезаются с отступом, изображение приводится к [0, 1]"""
        cfg = RunConfig(data=DataSettings(patch_size=(2, 8, 8), crop_margin=2))
        lv = preprocess(cfg, self.padded_volume())
        assert lv.dims == (12, 12, 12)
        assert lv.labels.shape == (12, 12, 12)
        assert (lv.labels == 3).sum() == 64
        assert lv.image.min() >= 0.0 and lv.image.max() <= 1.0

    def test_crop_smaller_than_patch_skipped(self):
        """Если обрезанный объём меньше патча, объём остаётся целым"""
        cfg = RunConfig(data=DataSettings(patch_size=(16, 16, 16)))
        assert preprocess(cfg, self.padded_volume()).dims == (16, 16, 16)

    def test_crop_disabled(self):
        """crop_foreground = false"""
        cfg = RunConfig(data=DataSettings(patch_size=(2, 8, 8), crop_foreground=False))
        assert preprocess(cfg, self.padded_volume()).dims == (16, 16, 16)
