"""
Командная строка: phantom, train, eval, bench, selftest
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from .bench import SCALING_HEADER, THROUGHPUT_HEADER, bench_scaling, bench_throughput
from .checkpoint import load_checkpoint
from .config import MODEL_KINDS, RunConfig, load_config
from .data import (LabeledVolume, PhantomSpec, crop_foreground, extract_patches, extract_slices,
                   generate_phantom, normalize_percentile, read_directory, split_cases, write_volume)
from .errors import ConfigError, MambaSamError
from .metrics import METRIC_HEADER
from .models import build_model, parameter_table
from .training import TrainConfig, TrainingHistory, evaluate, fit, steps_per_epoch
from .utils import (SPLIT_NAMES, case_filename, checkpoint_filename, ensure_output_directory,
                    save_json, write_csv)
from .validator import Validator

logger = logging.getLogger(__name__)

COMMANDS = ('phantom', 'train', 'eval', 'bench', 'selftest')

PARAMETER_HEADER = ('name', 'shape', 'count', 'frozen')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='mambasam',
        description='Гибридная сегментация Mamba + замороженный ViT на синтетических фантомах',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Примеры:
  python mambasam.py phantom --config run.cfg
  python mambasam.py train --config run.cfg --kind adapter_mfgc
  python mambasam.py eval --config run.cfg --checkpoint output/runs/adapter_mfgc_seed0.ckpt
  python mambasam.py bench --throughput
  python mambasam.py selftest
        """
    )
    sub = parser.add_subparsers(dest='command', metavar='{' + ','.join(COMMANDS) + '}')

    def with_config(p):
        p.add_argument('--config', '-c', type=str, default=None, help='INI-файл конфигурации')
        p.add_argument('--kind', '-k', type=str, choices=MODEL_KINDS, default=None,
                       help='Вид модели (перекрывает конфигурацию)')
        return p

    phantom = with_config(sub.add_parser('phantom', help='Сгенерировать набор фантомов'))
    phantom.add_argument('--out', '-o', type=str, default=None, help='Каталог набора данных')
    phantom.add_argument('--cases', '-n', type=int, default=None, help='Число случаев')

    train = with_config(sub.add_parser('train', help='Обучить модель'))
    train.add_argument('--data', '-d', type=str, default=None, help='Каталог набора данных')
    train.add_argument('--out', '-o', type=str, default=None, help='Каталог результатов')

    ev = with_config(sub.add_parser('eval', help='Оценить контрольную точку'))
    ev.add_argument('--checkpoint', type=str, required=True, help='Файл контрольной точки')
    ev.add_argument('--data', '-d', type=str, default=None, help='Каталог с тестовыми объёмами')
    ev.add_argument('--out', '-o', type=str, default=None, help='CSV с метриками')

    bench = with_config(sub.add_parser('bench', help='Замер масштабирования скана и attention'))
    bench.add_argument('--out', '-o', type=str, default=None, help='CSV с замерами')
    bench.add_argument('--throughput', action='store_true',
                       help='Дополнительно замерить пропускную способность модели')

    selftest = sub.add_parser('selftest', help='Самопроверка сборки')
    selftest.add_argument('--scan-cases', type=int, default=1000, help='Число случайных моделей скана')
    selftest.add_argument('--freeze-steps', type=int, default=50, help='Шагов обучения в проверке заморозки')
    selftest.add_argument('--seed', type=int, default=0)
    return parser


# ---- подготовка данных --------------------------------------------------

def check_patch_shape(cfg: RunConfig) -> None:
    """
    Raises:
        ConfigError: Размер патча не совпадает со входом модели
    """
    depth, height, width = cfg.data.patch_size
    m = cfg.model
    if height != m.image_size or width != m.image_size:
        raise ConfigError(
            f"data.patch_size {cfg.data.patch_size} не совпадает с model.image_size {m.image_size}"
        )
    if m.kind != 'dual_branch' and depth != m.volume_depth:
        raise ConfigError(
            f"data.patch_size глубины {depth} не совпадает с model.volume_depth {m.volume_depth}"
        )


def preprocess(cfg: RunConfig, lv: LabeledVolume) -> LabeledVolume:
    """
    Обрезка по ненулевому содержимому и нормализация по перцентилям

    Обрезка пропускается, если объём стал бы меньше патча.
    """
    if cfg.data.crop_foreground:
        cropped = crop_foreground(lv, margin=cfg.data.crop_margin)
        if all(c >= p for c, p in zip(cropped.dims, cfg.data.patch_size)):
            lv = cropped
        else:
            logger.debug(f"Foreground crop {cropped.dims} smaller than patch {cfg.data.patch_size}, skipped")
    return LabeledVolume(image=normalize_percentile(lv.image), labels=lv.labels, spacing=lv.spacing)


def training_samples(cfg: RunConfig, cases: Sequence[LabeledVolume], seed: int) -> List[LabeledVolume]:
    """Патчи (или срезы для dual_branch) с разметкой для обучения"""
    samples = []
    for i, lv in enumerate(cases):
        lv = preprocess(cfg, lv)
        if cfg.model.kind == 'dual_branch':
            samples.extend(extract_slices(lv, cfg.data.patch_size[1:], cfg.data.slices_per_case,
                                          cfg.data.require_label, seed + i))
        else:
            samples.extend(extract_patches(lv, cfg.data.patch_size, cfg.data.patches_per_case,
                                           cfg.data.require_label, seed + i))
    return samples


def evaluation_samples(cfg: RunConfig, cases: Sequence[LabeledVolume], seed: int) -> List[LabeledVolume]:
    """По одному патчу размера входа модели из каждого случая"""
    return [
        extract_patches(preprocess(cfg, lv), cfg.data.patch_size, 1, True, seed + i)[0]
        for i, lv in enumerate(cases)
    ]


# ---- команды ------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> int:
    out_dir = args.out or cfg.data.data_dir
    n_cases = args.cases if args.cases is not None else cfg.data.cases
    spec = PhantomSpec(dims=cfg.data.volume_dims, spacing=cfg.data.spacing, noise=cfg.data.noise)
    parts = split_cases(n_cases, cfg.data.split, cfg.seed)

    for name, indices in zip(SPLIT_NAMES, parts):
        target = ensure_output_directory(str(Path(out_dir) / name))
        for index in indices:
            lv = generate_phantom(spec, cfg.seed * 100003 + index)
            write_volume(str(Path(target) / case_filename(index)), lv)
        print(f"  {name}: {len(indices)} случаев -> {target}")
    logger.info(f"Phantom dataset written: {n_cases} cases in {out_dir}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    check_patch_shape(cfg)
    data_dir = Path(args.data or cfg.data.data_dir)
    out_dir = ensure_output_directory(args.out or cfg.output_dir)

    train_cases = read_directory(str(data_dir / 'train'))
    val_cases = read_directory(str(data_dir / 'val'))
    train_set = training_samples(cfg, train_cases, cfg.seed)
    val_set = evaluation_samples(cfg, val_cases, cfg.seed + 7919)
    print(f"Обучающих образцов: {len(train_set)}, валидационных: {len(val_set)}")

    total = cfg.train.epochs * steps_per_epoch(len(train_set), cfg.train.batch_size)
    train_cfg = TrainConfig(
        base_lr=cfg.train.base_lr,
        warmup_steps=min(cfg.train.warmup_steps, total - 1),
        total_steps=total,
        clip_norm=cfg.train.clip_norm,
        batch_size=cfg.train.batch_size,
        weight_decay=cfg.train.weight_decay,
        seed=cfg.seed,
    )

    model = build_model(cfg.model.kind, cfg.model, cfg.seed)
    ckpt_path = str(Path(out_dir) / checkpoint_filename(cfg.model.kind, cfg.seed))
    history: TrainingHistory = fit(model, train_set, val_set, train_cfg, cfg.train.epochs,
                                   checkpoint_path=ckpt_path, augment=cfg.data.augment)

    stem = f"{cfg.model.kind}_seed{cfg.seed}"
    save_json(cfg.to_dict(), str(Path(out_dir) / f"{stem}_config.json"))
    write_csv(str(Path(out_dir) / f"{stem}_history.csv"), TrainingHistory.HEADER, history.rows())
    write_csv(str(Path(out_dir) / f"{stem}_parameters.csv"), PARAMETER_HEADER,
              [(r.name, 'x'.join(map(str, r.shape)), r.count, int(r.frozen))
               for r in parameter_table(model)])

    print(f"Лучшая эпоха: {history.best_epoch}, Dice на валидации: {history.best_dice:.4f}")
    print(f"Контрольная точка: {ckpt_path}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    check_patch_shape(cfg)
    data_dir = args.data or str(Path(cfg.data.data_dir) / 'test')
    model = build_model(cfg.model.kind, cfg.model, cfg.seed)
    load_checkpoint(args.checkpoint, model)

    cases = evaluation_samples(cfg, read_directory(data_dir), cfg.seed + 104729)
    report = evaluate(model, cases)
    out_path = args.out or str(Path(cfg.output_dir) / f"{cfg.model.kind}_seed{cfg.seed}_metrics.csv")
    write_csv(out_path, METRIC_HEADER, report.rows())
    print(report.summary())
    print(f"Метрики: {out_path}")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    report = bench_scaling(cfg.bench.lengths, cfg.bench.d_model, cfg.bench.repeats, seed=cfg.seed)
    out_path = args.out or str(Path(cfg.output_dir) / 'bench_scaling.csv')
    write_csv(out_path, SCALING_HEADER, report.rows())
    print(report.summary())
    print(f"Замеры: {out_path}")

    if args.throughput:
        m = cfg.model
        if m.kind == 'dual_branch':
            shape = (cfg.train.batch_size, m.in_channels, m.image_size, m.image_size)
        else:
            shape = (cfg.train.batch_size, m.in_channels, m.volume_depth, m.image_size, m.image_size)
        model = build_model(m.kind, m, cfg.seed)
        result = bench_throughput(model, shape, cfg.bench.repeats, cfg.seed)
        path = str(Path(out_path).with_name('bench_throughput.csv'))
        write_csv(path, THROUGHPUT_HEADER, [result.row()])
        print(f"{result.kind}: {result.samples_per_second:.2f} образцов/с, "
              f"обучаемых {result.trainable} из {result.total} ({result.ratio:.2%})")
    return 0


def cmd_selftest(args) -> int:
    results = Validator.run_all(scan_cases=args.scan_cases, seed=args.seed, freeze_steps=args.freeze_steps)
    for r in results:
        status = 'PASS' if r.passed else 'FAIL'
        print(f"{status} {r.name}" + (f": {r.detail}" if r.detail else ''))
    return 0 if all(r.passed for r in results) else 1


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Разбирает аргументы и выполняет подкоманду

    Returns:
        int: 0 - успех, 1 - ошибка выполнения или конфигурации,
             2 - неизвестная подкоманда
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] not in COMMANDS and argv[0] not in ('-h', '--help'):
        if argv:
            print(f"Неизвестная подкоманда: {argv[0]}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.command == 'selftest':
            return cmd_selftest(args)
        cfg = load_config(args.config, args.kind)
        handlers = {'phantom': cmd_phantom, 'train': cmd_train, 'eval': cmd_eval, 'bench': cmd_bench}
        return handlers[args.command](args, cfg)
    except ConfigError as e:
        print(f"Ошибка конфигурации: {e}", file=sys.stderr)
        return 1
    except MambaSamError as e:
        print(f"Ошибка: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"Command {args.command} failed: {e}", exc_info=True)
        print(f"Ошибка: {e}", file=sys.stderr)
        return 1


def main() -> None:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv('LOG_LEVEL', 'INFO'),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    sys.exit(dispatch())
