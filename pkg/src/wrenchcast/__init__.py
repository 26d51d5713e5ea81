"""Short-term probabilistic wrench forecasting from proprioceptive history."""

from .spectral import (
    FilterSpec,
    Series,
    decompose,
    energy_spectrum,
    fpf_high,
    fpf_low,
    highpass_response,
    lowpass_response,
)
from .data import (
    Episode,
    NormStats,
    SynthConfig,
    WindowSample,
    make_windows,
    preprocess_episode,
    savitzky_golay_causal,
    split_episodes,
    synth_episode,
)
from .model import DecompForecaster, ForecastDistribution, ModelConfig

__all__ = [
    "FilterSpec",
    "Series",
    "decompose",
    "energy_spectrum",
    "fpf_high",
    "fpf_low",
    "highpass_response",
    "lowpass_response",
    "Episode",
    "NormStats",
    "SynthConfig",
    "WindowSample",
    "make_windows",
    "preprocess_episode",
    "savitzky_golay_causal",
    "split_episodes",
    "synth_episode",
    "DecompForecaster",
    "ForecastDistribution",
    "ModelConfig",
]

__version__ = "0.1.0"
