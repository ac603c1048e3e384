"""
Вспомогательные функции: каталоги вывода, имена файлов, CSV и JSON
"""

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

# Подкаталоги набора данных по частям разбиения
SPLIT_NAMES = ('train', 'val', 'test')


def ensure_output_directory(base_path: str = 'output/runs') -> str:
    """
    Создаёт директорию для вывода если не существует

    Args:
        base_path: Базовый путь

    Returns:
        str: Абсолютный путь к директории
    """
    path = Path(base_path)
    path.mkdir(parents=True, exist_ok=True)
    return str(path.absolute())


def case_filename(index: int) -> str:
    """Имя файла объёма: case_007.msv"""
    return f"case_{index:03d}.msv"


def checkpoint_filename(kind: str, seed: int) -> str:
    return f"{kind}_seed{seed}.ckpt"


def write_csv(file_path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """
    Пишет CSV с фиксированной строкой заголовка

    Args:
        file_path: Путь для сохранения
        header: Названия столбцов
        rows: Строки значений
    """
    Path(file_path).parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def save_json(data: dict, file_path: str) -> None:
    """
    Сохраняет словарь в JSON файл

    Args:
        data: Данные
        file_path: Путь для сохранения
    """
    # Создаём директорию если не существует
    Path(file_path).parent.mkdir(parents=True, exist_ok=True)

    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
