"""Pooling of token states and image preprocessing ahead of an embedder."""

import numpy as np

from ..errors import DegenerateInputError, NonFiniteError, ValidationError

# per-channel statistics the image embedder was trained with
IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711])


def pool_and_normalize(token_states):
    """
    Average final-layer token states and L2 normalize the result.

    Parameters
    ----------
    token_states : array
        Shape (m_tokens, D), m_tokens >= 1.

    Returns
    -------
    vector : array
        Shape (D,), unit L2 norm.
    """
    states = np.asarray(token_states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ValidationError(f"expected (m_tokens, D) states, got shape {states.shape}")
    if not np.isfinite(states).all():
        raise NonFiniteError("non-finite token state")
    pooled = states.mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm == 0:
        raise DegenerateInputError("pooled token state is the zero vector")
    return pooled / norm


def _crop_or_pad(pixels, axis, target):
    size = pixels.shape[axis]
    if size > target:
        start = (size - target) // 2
        return np.take(pixels, np.arange(start, start + target), axis=axis)
    if size < target:
        total = target - size
        # the odd pixel goes on the bottom / right
        pad = [(0, 0)] * pixels.ndim
        pad[axis] = (total // 2, total - total // 2)
        return np.pad(pixels, pad, mode="constant", constant_values=0)
    return pixels


def preprocess_image(pixels, target):
    """
    Center-crop or zero-pad an RGB image to ``target`` x ``target`` and
    normalize it the way the image embedder expects.

    Each axis is handled on its own: it is cropped when longer than
    ``target`` and padded with black when shorter.

    Parameters
    ----------
    pixels : array
        Shape (H, W, 3), values in [0, 255].
    target : int
        Output side length.

    Returns
    -------
    array
        Shape (target, target, 3).
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {pixels.shape}")
    if pixels.shape[0] < 1 or pixels.shape[1] < 1 or target < 1:
        raise ValidationError("image and target sizes must be positive")
    out = _crop_or_pad(pixels, 0, target)
    out = _crop_or_pad(out, 1, target)
    return (out / 255.0 - IMAGE_MEAN) / IMAGE_STD
