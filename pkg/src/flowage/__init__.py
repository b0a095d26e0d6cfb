"""Bidirectional conditional normalizing flow over velocity-field subspaces.

One invertible model covers both directions of the morphology/age
relationship: the forward pass predicts age from a deformation encoding,
the exact inverse samples deformations conditioned on age.
"""

from .errors import NumericalError, ValidationError
from .geometry import DeformationField, VelocityField, Volume, compose, identity_deformation, jacobian_det_map, svf_exp, warp
from .subspace import SubspaceModel, fit, project, reconstruct
from .flow import FlowConfig, FlowModel, LatentCode, build_flow, coupling_forward, coupling_inverse, flow_forward, flow_inverse
from .training import TrainConfig, TrainRecord, nll_loss, grad, train
from .aging import (
    AgingModel,
    EvalReport,
    MLRBaseline,
    conditional_template,
    evaluate,
    fit_mlr,
    predict_age,
    predict_mlr,
    sample_conditional,
)
from .synth import GeneratorRecord, SynthConfig, synth_cohort

__version__ = "0.1.0"

__all__ = [
    "AgingModel",
    "DeformationField",
    "EvalReport",
    "FlowConfig",
    "FlowModel",
    "GeneratorRecord",
    "LatentCode",
    "MLRBaseline",
    "NumericalError",
    "SubspaceModel",
    "SynthConfig",
    "TrainConfig",
    "TrainRecord",
    "ValidationError",
    "VelocityField",
    "Volume",
    "build_flow",
    "compose",
    "conditional_template",
    "coupling_forward",
    "coupling_inverse",
    "evaluate",
    "fit",
    "fit_mlr",
    "flow_forward",
    "flow_inverse",
    "grad",
    "identity_deformation",
    "jacobian_det_map",
    "nll_loss",
    "predict_age",
    "predict_mlr",
    "project",
    "reconstruct",
    "sample_conditional",
    "svf_exp",
    "synth_cohort",
    "train",
    "warp",
]
