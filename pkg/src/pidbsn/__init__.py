"""Physics-informed deep B-spline networks for parameterized PDE families."""

from .coeff_net import AdamState, MlpParams, MlpSpec, adam_step, backward, forward, init_params
from .dbsn import DbsnModel, PinningPlan, TrainConfig, total_loss_and_grad, train
from .physics import PdeFamily, PinRule, make_family
from .spline_core import BasisSpec, basis_matrix, eval_basis, eval_basis_derivative, make_clamped_knots
from .tensor_field import GridDataset, SplineField, eval_field, eval_field_partial, eval_on_grid, ls_fit

__version__ = "0.1.0"
