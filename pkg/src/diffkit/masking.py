"""Freezing known coordinates during generation (inpainting)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError
from .schedules import NoiseSchedule, _col


@dataclass
class SampleMask:
    """``mask`` marks frozen coordinates (1) and ``known`` holds their values.

    Both broadcast against a batch of samples of shape ``(n, dim)``.
    ``mode`` is ``clean`` (write the known values as they are) or ``noised``
    (write ``alpha_t * known + sigma_t * noise``).
    """

    mask: np.ndarray
    known: np.ndarray
    mode: str = "clean"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=float)
        self.known = np.asarray(self.known, dtype=float)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ArgumentError("mask entries must be 0 or 1")
        if self.mode not in ("clean", "noised"):
            raise ArgumentError(f"unknown mask mode {self.mode!r}")
        try:
            shape = np.broadcast_shapes(self.mask.shape, self.known.shape)
        except ValueError:
            raise DimensionError("mask and known values do not broadcast") from None
        if not np.all(np.isfinite(np.broadcast_to(self.known, shape)[np.broadcast_to(self.mask, shape) == 1])):
            raise ArgumentError("known values must be finite where the mask is set")

    @property
    def bool_mask(self) -> np.ndarray:
        return self.mask.astype(bool)


def apply_mask(x, mask: SampleMask | None, sched: NoiseSchedule | None = None, t=None,
               rng: np.random.Generator | None = None, final: bool = False) -> np.ndarray:
    """Overwrite the frozen coordinates of ``x``.

    ``final`` forces clean replacement, used once the sample is complete.
    """
    x = np.asarray(x, dtype=float)
    if mask is None:
        return x
    m = np.broadcast_to(mask.bool_mask, x.shape)
    if mask.mode == "clean" or final:
        return np.where(m, np.broadcast_to(mask.known, x.shape), x)
    if sched is None or t is None:
        raise ArgumentError("noised masking needs a schedule and time")
    rng = rng or np.random.default_rng()
    alpha, sigma = sched.alpha_sigma(t)
    known = np.broadcast_to(mask.known, x.shape)
    noisy = _col(alpha, x) * known + _col(sigma, x) * rng.standard_normal(x.shape)
    return np.where(m, noisy, x)
