"""Water optics: scene/water separation masks and effective attenuation.

A single shared density sigma describes everything the rays meet. A smooth
logistic gate splits it into object and water parts so the per-channel
attenuation beta applies only where the medium is water:

    m_o = logistic(a * (sigma - b)),  m_w = 1 - m_o
    sigma_lambda = sigma + m_w * beta        (per channel)
    sigma_bar    = m_o * sigma               (object-only density)

beta and the backscatter color live behind a softplus so they stay positive
while the raw optimization variables remain unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc

BETA_INIT = (0.2, 0.05, 0.03)
BACKSCATTER_INIT = (0.002, 0.005, 0.008)


def _expand(x):
    # (...,) -> (..., 1) so per-sample scalars broadcast against RGB triples.
    shape = x.shape if isinstance(x, gc.Node) else np.shape(x)
    return gc.reshape(x, tuple(shape) + (1,))


def masks(sigma, a: float = 3.0, b: float = 3.0):
    """Object/water gate values (m_o, m_w) for a density field sample.

    m_o + m_w = 1 holds exactly because m_w is computed as the complement.
    """
    if a <= 0 or b <= 0:
        raise ValueError(f"gate constants must be positive, got a={a} b={b}")
    m_o = gc.sigmoid(gc.mul(gc.sub(sigma, b), a))
    m_w = gc.sub(1.0, m_o)
    return m_o, m_w


def refined_sigma(sigma, a: float = 3.0, b: float = 3.0):
    """Object-only density sigma_bar = m_o * sigma."""
    m_o, _ = masks(sigma, a, b)
    return gc.mul(m_o, sigma)


@dataclass
class WaterParams:
    """Per-channel water optics plus the gate constants.

    beta and backscatter are (3,) values, possibly Nodes when the params came
    through a recording context.
    """

    beta: object
    backscatter: object
    a: float = 3.0
    b: float = 3.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"gate constants must be positive, got a={self.a} b={self.b}")
        for label, v in (("beta", self.beta), ("backscatter", self.backscatter)):
            arr = gc.value_of(v)
            if arr.shape != (3,):
                raise ValueError(f"{label} must have shape (3,), got {arr.shape}")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError(f"{label} must be finite and non-negative")

    @staticmethod
    def register(store: gc.ParamStore, beta=BETA_INIT, backscatter=BACKSCATTER_INIT) -> None:
        """Add raw water parameters so softplus(raw) equals the requested init."""
        store.add("water/beta_raw", np.log(np.expm1(np.asarray(beta, dtype=np.float64))))
        store.add(
            "water/backscatter_raw",
            np.log(np.expm1(np.asarray(backscatter, dtype=np.float64))),
        )

    @classmethod
    def from_context(cls, ctx: gc.EvalContext, a: float = 3.0, b: float = 3.0) -> "WaterParams":
        return cls(
            beta=gc.softplus(ctx.param("water/beta_raw")),
            backscatter=gc.softplus(ctx.param("water/backscatter_raw")),
            a=a,
            b=b,
        )


def sigma_lambda(sigma, water: WaterParams):
    """Per-channel effective density sigma + m_w * beta, shaped (..., 3)."""
    _, m_w = masks(sigma, water.a, water.b)
    return gc.add(_expand(sigma), gc.mul(_expand(m_w), water.beta))
