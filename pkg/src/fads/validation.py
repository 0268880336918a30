"""Input validation helpers shared by the estimators and the CLI."""
import numpy as np


def check_images(X, n_channels=None, min_samples=1):
    """Normalize ``X`` to a list of finite float32 ``[C, H, W]`` arrays.

    Accepts a 3-D array ``(n, H, W)`` (single channel), a 4-D array
    ``(n, C, H, W)`` or a sequence of 2-D/3-D images of possibly
    different sizes.
    """
    if isinstance(X, np.ndarray) and X.ndim in (3, 4) and X.dtype != object:
        images = list(X[:, None] if X.ndim == 3 else X)
    else:
        images = list(X)
    out = []
    for k, img in enumerate(images):
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or 0 in arr.shape:
            raise ValueError(f"image {k} must be 2-D or [C, H, W], got shape {np.shape(img)}")
        if n_channels is not None and arr.shape[0] != n_channels:
            raise ValueError(f"image {k} has {arr.shape[0]} channels, expected {n_channels}")
        if not np.isfinite(arr).all():
            raise ValueError(f"image {k} contains NaN or Inf")
        out.append(np.ascontiguousarray(arr))
    if len(out) < min_samples:
        raise ValueError(f"need at least {min_samples} image(s), got {len(out)}")
    return out


def check_choice(name, value, options):
    if value not in options:
        raise ValueError(f"{name} must be one of {tuple(options)}, got {value!r}")
    return value


def check_unit_interval(name, value):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
