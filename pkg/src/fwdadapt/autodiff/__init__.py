"""First-order machinery: tape gradients and source pretraining.

Only pretraining and the diagnostics oracle import this package; the
adaptation engine (zoo, drls, sfaa, stream) must run without it.
"""

from fwdadapt.autodiff.tape import Tape, UnsupportedOpError, Var
from fwdadapt.autodiff.train import TrainingError, grad, model_grad, sgd_train

__all__ = ["Tape", "Var", "UnsupportedOpError", "TrainingError", "grad", "model_grad", "sgd_train"]
