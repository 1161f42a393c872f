"""Joint IVIM parameter estimation and motion correction for 2D DWI stacks."""

from .baselines import (AffineTransform, Correction, RegistrationSettings, correct_sequential,
                        correct_to_b0, iterative_fit_register, register_affine, register_deformable)
from .case import DwiCase, crop_or_pad, normalize_case
from .caseio import load_case, load_maps, save_case, save_maps, save_result
from .classical import FitResult, fit_map, fit_voxels, sls_init, trf_refine
from .config import RunConfig, load_config
from .errors import (ConfigError, DegenerateInputError, GridSearchError, InvalidArgumentError,
                     NonFiniteLossError, ShapeMismatchError)
from .evaluation import (CohortRecord, CorrelationReport, correlate_ga, dice, grid_search,
                         mask_alignment_score, param_rmse)
from .joint import CaseResult, OptConfig, PlateauScheduler, compute_gradients, optimize_case
from .losses import LossConfig, composite_loss, ncc_loss, smooth_loss, wser_loss
from .model import (DEFAULT_BOUNDS, BValueSchedule, IvimMaps, IvimParams, ParamBounds,
                    bound_inverse, bound_transform, ivim_signal, reconstruct_series)
from .phantom import GroundTruth, PhantomSpec, make_phantom, simulate
from .warp import compose, integrate_svf, warp_image

__version__ = "0.1.0"
