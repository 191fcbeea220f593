"""Attrition-bias correction for binary panels with refreshment samples."""
from .data import (MISSING, CaseRecord, Cohort, PanelDataset, StudyDesign, Variant, counts, load_dataset,
                   load_design, make_dataset, save_dataset)
from .errors import AttrlabError
from .likelihood import ParameterVector, bernoulli_loglik, joint_loglik, latent_full_conditional, loglik_gradient
from .mi import CompletedDataset, MIResult, emit_imputations, fit_logistic_ml, rubin_combine
from .model import (ConditionalModel, ModelSpec, Term, cell_count, default_an_spec, independent_constraints,
                    parse_spec, validate_identified)
from .sampler import McmcConfig, PosteriorDraws, run_mwg

__version__ = "0.1.0"
