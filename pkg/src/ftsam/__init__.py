"""Fine-tuning with adaptive sharpness-aware minimization against backdoored models."""

from .defense import RunRecord, TrainPlan, finetune, sweep_rho, train_backdoored
from .metrics import EvalReport, der, evaluate
from .model import Model, ModelSpec, ParamSet, build, load_checkpoint, reference_spec, save_checkpoint
from .optim import SamConfig, SgdConfig, sam_perturbation, sam_step, sgd_step

__version__ = "0.1.0"
