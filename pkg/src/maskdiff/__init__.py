"""Masked diffusion samplers driven by exact posterior oracles over formal languages."""

from .adversarial import build_interval_language, exact_interval_ser, interval_to_hmm
from .analysis import count_dependencies, count_separators, generative_perplexity, sequence_error_rate
from .diffusion import (
    ar_sample,
    build_schedule,
    forward_mask,
    l2r_mdm_sample,
    mdm_sample,
    mdm_sample_batch,
    remdm_sample,
    reverse_step,
)
from .formal_lang import MASK, gen_hmm, gen_ngram, log_prob2, sample_sequence
from .oracle import MaskedSequence, posterior_marginals
from .rng import make_rng

__version__ = "0.1.0"
