"""Toolkit for a compact EEG motor-imagery CNN.

Covers training with 8-bit quantization awareness and integer-only inference."""

__version__ = "0.1.0"

from .model import BCI_IV2A, PHYSIONET_MMMI, ModelConfig, Network, build, forward, layer_plan
from .numerics import QuantTensor, dequantize, quantize
from .resources import compare, estimate

__all__ = ["__version__", "ModelConfig", "Network", "build", "forward", "layer_plan", "BCI_IV2A",
           "PHYSIONET_MMMI", "QuantTensor", "quantize", "dequantize", "estimate", "compare"]
