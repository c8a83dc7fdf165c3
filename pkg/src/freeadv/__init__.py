"""Free adversarial training on a small numpy autodiff engine.

Modules: ``tensor`` (tape autodiff), ``models``, ``attacks``, ``training``,
``data``, ``harness`` (evaluation, loss surfaces, runner) and ``cli``.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, attack_with_restarts, cw_loss, fgsm, pgd_attack
from .data import Dataset, batches, load_cifar_binary, load_idx, synth_blobs
from .ledger import CostLedger
from .models import Model, ModelSpec, ParamSet, build_model, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, replay_schedule, train, train_free, train_kpgd, train_natural

__all__ = [
    "__version__",
    "AttackConfig", "attack_with_restarts", "cw_loss", "fgsm", "pgd_attack",
    "Dataset", "batches", "load_cifar_binary", "load_idx", "synth_blobs",
    "CostLedger",
    "Model", "ModelSpec", "ParamSet", "build_model", "init_params", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "replay_schedule", "train", "train_free", "train_kpgd", "train_natural",
]
