"""
Исключения библиотеки MambaSAM
"""


class MambaSamError(Exception):
    """Базовое исключение библиотеки"""


class DimensionError(MambaSamError, ValueError):
    """Несовместимые формы или размеры тензоров"""


class ParameterError(MambaSamError, ValueError):
    """Недопустимое значение параметра"""


class FormatError(MambaSamError, ValueError):
    """Повреждённый или неподдерживаемый бинарный файл"""


class ConfigError(MambaSamError, ValueError):
    """Ошибка конфигурации запуска"""


class SamplingError(MambaSamError, ValueError):
    """Исчерпан лимит попыток случайной выборки"""


class NumericError(MambaSamError, ArithmeticError):
    """NaN, бесконечность или иная численная авария"""


class SingularityError(NumericError):
    """Вырожденная матрица при дискретизации"""
