"""Spiking language model built from ternary rate-coded neurons."""

from .approximators import (
    ApproximatorBank,
    SpikingFunctionApproximator,
    approx_eval,
    fit_bank,
    fit_default_banks,
    silu_approx,
    snn_rmsnorm,
)
from .attention import snn_matmul, snn_softmax, spike_coincidence
from .conversion import EquivalenceReport, audit_equivalence, convert
from .model import LanguageModel, ModelConfig, forward, generate, train_ann
from .neuron import EiIfParams, EiIfState, RateEncoder, SpikeTrain, decode_rate, ei_if_step, encode_rate, run_ei_if
from .plasticity import PlasticityConfig, finetune, stdp_delta, stdp_finetune_step
from .quantization import QuantSpec, Quantizer, qsynapsis_forward, quantize, ste_grad
from .synapsis import Synapsis, SynapsisLayer, spike_accumulate, synapsis_forward
from .tensor import Rng, matmul

__all__ = [
    "ApproximatorBank",
    "EiIfParams",
    "EiIfState",
    "EquivalenceReport",
    "LanguageModel",
    "ModelConfig",
    "PlasticityConfig",
    "QuantSpec",
    "Quantizer",
    "RateEncoder",
    "Rng",
    "SpikeTrain",
    "SpikingFunctionApproximator",
    "Synapsis",
    "SynapsisLayer",
    "approx_eval",
    "audit_equivalence",
    "convert",
    "decode_rate",
    "ei_if_step",
    "encode_rate",
    "finetune",
    "fit_bank",
    "fit_default_banks",
    "forward",
    "generate",
    "matmul",
    "qsynapsis_forward",
    "quantize",
    "run_ei_if",
    "silu_approx",
    "snn_matmul",
    "snn_rmsnorm",
    "snn_softmax",
    "spike_accumulate",
    "spike_coincidence",
    "ste_grad",
    "stdp_delta",
    "stdp_finetune_step",
    "synapsis_forward",
    "train_ann",
]
