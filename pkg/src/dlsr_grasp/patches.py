"""Patch vector layout shared by sampling and feature extraction."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import N_CHANNELS, PATCH_SIZE


def flatten_windows(windows):
    """``(..., 6, 6, 8)`` windows to channel-major ``(..., 288)`` vectors."""
    w = np.asarray(windows)
    lead = w.shape[:-3]
    return np.moveaxis(w, -1, -3).reshape(*lead, -1)


def unflatten(vectors, size=PATCH_SIZE):
    """Inverse of :func:`flatten_windows`."""
    v = np.asarray(vectors)
    lead = v.shape[:-1]
    return np.moveaxis(v.reshape(*lead, N_CHANNELS, size, size), -3, -1)


def all_patches(data, mask, size=PATCH_SIZE):
    """Every stride-1 patch of an ``(h, w, 8)`` image, row-major by top-left.

    Returns ``(patches, masks)`` of shape ``((h-5)*(w-5), 288)``, or with a
    leading batch axis when ``data`` is ``(B, h, w, 8)``.
    """
    data = np.asarray(data)
    mask = np.asarray(mask)
    axes = (-3, -2)
    pw = sliding_window_view(data, (size, size), axis=axes)   # (..., R, C, 8, 6, 6)
    pm = sliding_window_view(mask, (size, size), axis=axes)
    lead = data.shape[:-3]
    R, C = pw.shape[len(lead)], pw.shape[len(lead) + 1]
    return (pw.reshape(*lead, R * C, -1), pm.reshape(*lead, R * C, -1))
