"""In-context sparse recovery: LISTA-family solvers and a Transformer that runs LISTA-VM."""

from .classical import (LassoProblem, SolverTrace, fista_solve, ista_solve, lasso_objective,
                        soft_threshold, spectral_norm_sq)
from .errors import ConfigError, DomainError, NumericError, ParseError, TrainingError
from .instances import InstanceConfig, SparseInstance, sample_batch, sample_instance
from .learned import (ListaCpParams, ListaParams, ListaVmParams, TrainConfig, grad_unrolled,
                      lista_cp_forward, lista_forward, lista_vm_forward, lista_vm_ss_forward,
                      meta_train)
from .transformer import (TransformerWeights, build_constructed_weights, embed_instance,
                          extract_beta, forward, masked_attention, mlp_apply)

__all__ = [
    "ConfigError", "DomainError", "InstanceConfig", "LassoProblem", "ListaCpParams", "ListaParams",
    "ListaVmParams", "NumericError", "ParseError", "SolverTrace", "SparseInstance", "TrainConfig",
    "TrainingError", "TransformerWeights", "build_constructed_weights", "embed_instance",
    "extract_beta", "fista_solve", "forward", "grad_unrolled", "ista_solve", "lasso_objective",
    "lista_cp_forward", "lista_forward", "lista_vm_forward", "lista_vm_ss_forward",
    "masked_attention", "meta_train", "mlp_apply", "sample_batch", "sample_instance",
    "soft_threshold", "spectral_norm_sq",
]
__version__ = "0.1.0"
