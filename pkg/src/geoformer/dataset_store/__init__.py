"""Dataset container, context assembly and synthetic cities."""

from .container import ContainerError, read_container, read_manifest, write_container
from .context import ContextBuilder, assemble_context, compute_norm_stats, mask_channel
from .synth import SynthParams, resample_bilinear, synth_cities, synth_city
from .types import CHANNELS, OPTICAL, PX, SAR, SPLITS, CityStack, ContextTensor, NormStats, Sample

__all__ = [
    "CHANNELS", "OPTICAL", "SAR", "PX", "SPLITS",
    "CityStack", "ContextTensor", "NormStats", "Sample",
    "ContainerError", "read_container", "read_manifest", "write_container",
    "ContextBuilder", "assemble_context", "compute_norm_stats", "mask_channel",
    "SynthParams", "resample_bilinear", "synth_cities", "synth_city",
]
