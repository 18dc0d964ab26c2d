"""Bit-exact fixed-point emulation of quantized CNN inference."""
from .fixedpoint import FixedScalar, QuantParams, clamp, dequantize, quantize, rescale

__all__ = ["FixedScalar", "QuantParams", "clamp", "dequantize", "quantize", "rescale"]
__version__ = "0.1.0"
