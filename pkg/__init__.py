# Continuous-time Deconvolutional Regressive Neural Networks
__version__ = "1.0.0"

from .models import cdrnn, nnkernel, spec, trainer
from .evaluation import effects, ensemble, significance
from .utils import data_loader, errors, synth

__all__ = [
    'cdrnn',
    'nnkernel',
    'spec',
    'trainer',
    'effects',
    'ensemble',
    'significance',
    'data_loader',
    'errors',
    'synth'
]
