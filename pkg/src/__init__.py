"""
MambaSam - гибридная сегментация объёмов: селективные SSM-сканы,
трёхплоскостные Mamba-адаптеры и слияние с замороженным ViT
"""

from .config import RunConfig, load_config
from .data import LabeledVolume, generate_phantom
from .metrics import MetricReport
from .models import AdapterModel, DualBranchModel, build_model
from .training import TrainConfig, evaluate, fit
from .validator import Validator

__all__ = [
    'RunConfig', 'load_config', 'LabeledVolume', 'generate_phantom', 'MetricReport',
    'AdapterModel', 'DualBranchModel', 'build_model', 'TrainConfig', 'evaluate', 'fit',
    'Validator',
]
__version__ = '1.0.0'
