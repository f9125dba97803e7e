"""Multi-style neural style transfer with dual-adversarial training.

Two architectures share this package: a conditional GAN with separate
content and style discriminators trained on synthesized triplets, and a
lighter unidirectional GAN whose content/style encoders double as the
discriminators. Everything is sized to run on a single CPU core.
"""

__version__ = "0.1.0"

from rgan.losses import AdversarialWeights, PairLabel
from rgan.training import (
    DataHandles,
    TrainConfig,
    TrainingDivergence,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

__all__ = [
    "AdversarialWeights",
    "DataHandles",
    "PairLabel",
    "TrainConfig",
    "TrainingDivergence",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
    "__version__",
]
