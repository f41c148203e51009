"""Spectrogram to model-input conversion."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError
from .sigproc import Spectrogram

DEFAULT_MAX_FREQ = 1000.0


def spectrogram_stack(samples: Sequence) -> np.ndarray:
    """Stack magnitudes of spectrograms (or objects holding one) into (n, F, T)."""
    mats = []
    for s in samples:
        s = getattr(s, "spectrogram", s)
        mats.append(np.asarray(getattr(s, "magnitudes", s), dtype=float))
    if not mats:
        raise ShapeError("no spectrograms to stack")
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ShapeError(f"spectrograms differ in shape: {sorted(shapes)}")
    return np.stack(mats)


def n_rows_below(freq_axis, max_freq: float) -> int:
    return int(np.searchsorted(np.asarray(freq_axis), max_freq, side="right"))


def model_input(samples, max_freq: float = DEFAULT_MAX_FREQ, log: bool = True,
                freq_axis=None) -> np.ndarray:
    """Crop to bins at or below ``max_freq`` and optionally log-compress.

    The echo band sits far below 1 kHz after dechirping, so higher rows only
    carry filter leakage.
    """
    if isinstance(samples, np.ndarray):
        X = np.asarray(samples, dtype=float)
        if X.ndim == 2:
            X = X[None]
    else:
        first = getattr(samples[0], "spectrogram", samples[0])
        if freq_axis is None and isinstance(first, Spectrogram):
            freq_axis = first.freq_axis
        X = spectrogram_stack(samples)
    if freq_axis is not None:
        X = X[:, :n_rows_below(freq_axis, max_freq)]
    return np.log1p(X) if log else X
