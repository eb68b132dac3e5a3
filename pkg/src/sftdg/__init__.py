"""Self-feedback training for domain generalization on desk-scale problems."""

from .diffmath import AdamState, ParamSet, Tape, adam_step, backward, forward
from .domains import TOY_CLASSES, ClassSpec, DGProblem, DomainDataset, generate_toy, minibatch
from .landscape import consistency_score, evaluate_surface, gram_schmidt_axes
from .projection import LabelSpaceConstraint, ProjectionResult, oracle_project, project
from .sft import RunRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"
