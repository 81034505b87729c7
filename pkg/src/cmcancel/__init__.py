"""Common-mode aided alien-noise cancellation for DMT receivers."""

from .dsp import TimeBlock, WindowGeometry, convolve_cyclic, convolve_linear, dft_real, idft_real
from .misalign import PipelineError, find_t_opt, post_training_adjust, xi_analytic, xi_monte_carlo
from .pertone import analytic_H_pertone, estimate_beta, lemma_forward, lemma_inverse, ptlb
from .scene import AutocorrSequence, NoiseModel, Scene, simulate

__all__ = [
    "AutocorrSequence", "NoiseModel", "PipelineError", "Scene", "TimeBlock", "WindowGeometry",
    "analytic_H_pertone", "convolve_cyclic", "convolve_linear", "dft_real", "estimate_beta", "find_t_opt",
    "idft_real", "lemma_forward", "lemma_inverse", "post_training_adjust", "ptlb", "simulate",
    "xi_analytic", "xi_monte_carlo",
]
