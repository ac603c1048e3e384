#!/usr/bin/env python3
"""
Точка входа командной строки: phantom, train, eval, bench, selftest
"""

import sys
from pathlib import Path

# Добавляем путь к src для импорта
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import main


if __name__ == '__main__':
    main()
