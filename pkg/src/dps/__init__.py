"""Deep P-spline networks: penalised B-spline neurons, ECM tuning, GCV selection."""

from .basis import DifferenceOp, KnotVector, difference_op, eval_basis, eval_basis_derivative, eval_basis_matrix, make_uniform_knots
from .data import Dataset, DataError, load_csv, save_csv
from .ecm import EcmOptions, EcmState, ecm_tune, first_layer_ols, last_layer_fit, posterior_moments, update_lambda, update_sigma2, update_xi2
from .model import DpsModel, NetworkSpec, deserialize, forward, init_model, serialize, spline_features
from .train import TrainOptions, fit, gradients, penalized_loss

__all__ = [
    "DataError", "Dataset", "DifferenceOp", "DpsModel", "EcmOptions", "EcmState", "KnotVector", "NetworkSpec", "TrainOptions",
    "deserialize", "difference_op", "ecm_tune", "eval_basis", "eval_basis_derivative", "eval_basis_matrix", "first_layer_ols",
    "fit", "forward", "gradients", "init_model", "last_layer_fit", "load_csv", "make_uniform_knots", "penalized_loss",
    "posterior_moments", "save_csv", "serialize", "spline_features", "update_lambda", "update_sigma2", "update_xi2",
]
