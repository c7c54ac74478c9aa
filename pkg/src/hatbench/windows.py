"""Window partitioning of channels-last feature maps."""
from __future__ import annotations

from .errors import ConfigError, DimensionError
from .tensor import Tensor


def check_window(H: int, k: int) -> int:
    if k < 1 or H % k:
        raise ConfigError(f"window size k={k} must divide H={H}", "k_divides_H")
    return H // k


def window_partition(x: Tensor, k: int) -> Tensor:
    """(B, H, H, d) -> (B * n_windows, k*k, d), windows and tokens in raster order."""
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise DimensionError(f"window_partition expects (B,H,H,d), got {x.shape}")
    B, H, _, d = x.shape
    n = check_window(H, k)
    return (x.reshape(B, n, k, n, k, d)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(B * n * n, k * k, d))


def window_merge(xw: Tensor, H: int, k: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    n = check_window(H, k)
    if xw.ndim != 3 or xw.shape[1] != k * k or xw.shape[0] % (n * n):
        raise DimensionError(f"window_merge got {xw.shape} for H={H}, k={k}")
    B = xw.shape[0] // (n * n)
    d = xw.shape[2]
    return (xw.reshape(B, n, n, k, k, d)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(B, H, H, d))
