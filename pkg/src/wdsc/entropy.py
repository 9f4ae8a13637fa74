"""Learned probability models for latents and their integer CDF tables.

``FactorizedDensity`` is a per-channel monotone cumulative function built
from four positive-weight affine stages with ``x + tanh(a) * tanh(x)``
nonlinearities and a final sigmoid.  ``GaussianConditional`` models a latent
element as a zero-mean Gaussian with a per-element scale.  Both expose a
noise-convolved likelihood for quantized/perturbed latents, and the
factorized model additionally exposes the plain density used for the
continuous common-information latent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import Tensor
from .transforms import inv_softplus

LIKELIHOOD_FLOOR = 1e-9
DEFAULT_PRECISION = 16
DEFAULT_TAIL_MASS = 1e-9
SCALE_TABLE_MIN = 0.11
SCALE_TABLE_MAX = 256.0
SCALE_TABLE_LEVELS = 64


class FactorizedDensity:
    """Univariate non-parametric density, one independent model per channel."""

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0, dtype=np.float32):
        self.channels = channels
        self.filters = tuple(filters)
        self.init_scale = init_scale
        dims = (1,) + self.filters + (1,)
        # distinct hidden units so they do not receive identical gradients;
        # the chain is linear at init, so the last matrix is rescaled to make
        # the cdf exactly sigmoid(x / init_scale)
        mats = []
        for k in range(len(dims) - 1):
            f_out, f_in = dims[k + 1], dims[k]
            m = (np.arange(f_out)[:, None] + np.arange(f_in)[None, :] + 1.0) / (f_in * f_out)
            mats.append(m)
        total = mats[0]
        for m in mats[1:]:
            total = m @ total
        mats[-1] = mats[-1] / (total.item() * init_scale)

        self.matrices = [Tensor(np.broadcast_to(inv_softplus(m), (channels,) + m.shape).astype(dtype), requires_grad=True) for m in mats]
        self.biases = [Tensor(np.zeros((channels, dims[k + 1], 1), dtype=dtype), requires_grad=True) for k in range(len(dims) - 1)]
        self.factors = [Tensor(np.zeros((channels, dims[k + 1], 1), dtype=dtype), requires_grad=True) for k in range(len(dims) - 2)]

    def astype(self, dtype) -> "FactorizedDensity":
        """Copy with parameters cast to ``dtype`` (e.g. float64 for audits)."""
        out = FactorizedDensity.__new__(FactorizedDensity)
        out.channels, out.filters, out.init_scale = self.channels, self.filters, self.init_scale
        out.matrices, out.biases, out.factors = (
            [Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for p in group] for group in (self.matrices, self.biases, self.factors)
        )
        return out

    def named_parameters(self):
        for i, m in enumerate(self.matrices):
            yield f"matrix{i}", m
        for i, b in enumerate(self.biases):
            yield f"bias{i}", b
        for i, a in enumerate(self.factors):
            yield f"factor{i}", a

    # -- core chain ----------------------------------------------------------

    def _chain(self, x: Tensor, with_derivative: bool = False):
        """Logits of the cdf for ``x`` shaped ``(C, 1, n)``; optionally d(logits)/dx."""
        h = x
        dh = None
        for k, (m, b) in enumerate(zip(self.matrices, self.biases)):
            w = T.softplus(m)
            h = T.matmul(w, h) + b
            if with_derivative:
                dh = w if dh is None else T.matmul(w, dh)
            if k < len(self.factors):
                a = T.tanh(self.factors[k])
                th = T.tanh(h)
                if with_derivative:
                    dh = dh * (1.0 + a * (1.0 - th * th))
                h = h + a * th
        return h, dh

    def _to_channels(self, v: Tensor) -> tuple[Tensor, tuple, tuple]:
        # (B, C, H, W) or (C, H, W) -> (C, 1, n)
        shape = v.shape
        if v.ndim == 3:
            v = T.reshape(v, (1,) + shape)
        b, c, h, w = v.shape
        if c != self.channels:
            raise ValueError(f"density has {self.channels} channels, input has {c}")
        flat = T.reshape(T.transpose(v, (1, 0, 2, 3)), (c, 1, b * h * w))
        return flat, shape, (c, b, h, w)

    @staticmethod
    def _from_channels(p: Tensor, shape, tshape) -> Tensor:
        c, b, h, w = tshape
        out = T.transpose(T.reshape(p, (c, b, h, w)), (1, 0, 2, 3))
        return T.reshape(out, shape)

    # -- public -----------------------------------------------------------------

    def cdf(self, v: Tensor) -> Tensor:
        flat, shape, tshape = self._to_channels(v)
        logits, _ = self._chain(flat)
        return self._from_channels(T.sigmoid(logits), shape, tshape)

    def noisy_likelihood(self, v: Tensor) -> Tensor:
        """``c(v + 1/2) - c(v - 1/2)``, kept strictly positive.

        The 1e-9 likelihood floor is applied by ``bits_estimate`` so that
        integer-bin probabilities still telescope to at most one.
        """
        flat, shape, tshape = self._to_channels(v)
        upper, _ = self._chain(flat + 0.5)
        lower, _ = self._chain(flat - 0.5)
        # evaluate in the tail where the sigmoid is not saturated
        sign = -np.sign(upper.data + lower.data)
        sign[sign == 0] = 1.0
        sign = Tensor(sign.astype(flat.dtype))
        p = T.tabs(T.sigmoid(upper * sign) - T.sigmoid(lower * sign))
        p = T.clamp(p, np.finfo(p.dtype).tiny, None)
        return self._from_channels(p, shape, tshape)

    def density(self, w: Tensor) -> Tensor:
        """Derivative of the cdf at ``w`` (no uniform-noise convolution), strictly positive."""
        flat, shape, tshape = self._to_channels(w)
        logits, dlogits = self._chain(flat, with_derivative=True)
        s = T.sigmoid(logits)
        p = s * (1.0 - s) * dlogits
        p = T.clamp(p, np.finfo(p.dtype).tiny, None)
        return self._from_channels(p, shape, tshape)

    # -- numpy evaluation for table construction --------------------------------

    def cdf_numpy(self, x: np.ndarray) -> np.ndarray:
        """cdf values for ``x`` shaped ``(C, n)`` in float64."""
        h = np.asarray(x, dtype=np.float64)[:, None, :]
        for k, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = np.logaddexp(0.0, m.data.astype(np.float64)) @ h + b.data
            if k < len(self.factors):
                h = h + np.tanh(self.factors[k].data.astype(np.float64)) * np.tanh(h)
        return special.expit(h[:, 0, :])

    def quantiles(self, tail_mass: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel points where the cdf equals ``tail_mass/2`` and ``1 - tail_mass/2``."""
        lo_target, hi_target = tail_mass / 2, 1.0 - tail_mass / 2
        res = []
        for target in (lo_target, hi_target):
            a = np.full(self.channels, -1.0)
            b = np.full(self.channels, 1.0)
            while np.any(self.cdf_numpy(a[:, None])[:, 0] > target):
                a = np.where(self.cdf_numpy(a[:, None])[:, 0] > target, a * 2, a)
            while np.any(self.cdf_numpy(b[:, None])[:, 0] < target):
                b = np.where(self.cdf_numpy(b[:, None])[:, 0] < target, b * 2, b)
            for _ in range(60):
                mid = 0.5 * (a + b)
                below = self.cdf_numpy(mid[:, None])[:, 0] < target
                a = np.where(below, mid, a)
                b = np.where(below, b, mid)
            res.append(0.5 * (a + b))
        return res[0], res[1]

    def build_tables(self, precision: int = DEFAULT_PRECISION, tail_mass: float = DEFAULT_TAIL_MASS) -> list["CdfTable"]:
        """One integer CDF table per channel."""
        check_table_args(precision, tail_mass)
        lo, hi = self.quantiles(tail_mass)
        v_min = np.floor(lo).astype(np.int64)
        v_max = np.maximum(np.ceil(hi).astype(np.int64), v_min)
        grid = np.arange(v_min.min(), v_max.max() + 2, dtype=np.float64) - 0.5
        cdf_all = self.cdf_numpy(np.broadcast_to(grid, (self.channels, grid.size)))
        tables = []
        for c in range(self.channels):
            start = int(v_min[c] - v_min.min())
            cdf = cdf_all[c, start : start + int(v_max[c] - v_min[c]) + 2]
            pmf = np.concatenate([[cdf[0]], np.diff(cdf), [1.0 - cdf[-1]]])
            tables.append(CdfTable(int(v_min[c]) - 1, pmf_to_cdf(pmf, precision)))
        return tables


class GaussianConditional:
    """Zero-mean Gaussian per element with scale lower-bounded by ``scale_floor``."""

    def __init__(self, scale_floor: float = SCALE_TABLE_MIN, scale_table: np.ndarray | None = None):
        if scale_floor <= 0:
            raise ValueError("scale floor must be positive")
        self.scale_floor = scale_floor
        if scale_table is None:
            scale_table = np.exp(np.linspace(np.log(SCALE_TABLE_MIN), np.log(SCALE_TABLE_MAX), SCALE_TABLE_LEVELS))
        self.scale_table = np.asarray(scale_table, dtype=np.float64)

    def lower_bound(self, sigma: Tensor) -> Tensor:
        return T.clamp(sigma, self.scale_floor, None)

    def noisy_likelihood(self, sigma: Tensor, v: Tensor) -> Tensor:
        return gaussian_noisy_likelihood(self.lower_bound(sigma), v)

    def log_density(self, sigma: Tensor, v: Tensor) -> Tensor:
        """Natural-log Gaussian density of continuous ``v`` (no noise convolution)."""
        s = self.lower_bound(sigma)
        z = v / s
        return -0.5 * z * z - T.log(s) - 0.5 * np.log(2.0 * np.pi)

    def scale_indexes(self, sigma: np.ndarray) -> np.ndarray:
        """Index of the smallest table scale not below each (floored) sigma."""
        s = np.maximum(np.asarray(sigma, dtype=np.float64), self.scale_floor)
        idx = np.searchsorted(self.scale_table, s, side="left")
        return np.minimum(idx, len(self.scale_table) - 1).astype(np.int64)

    def build_tables(self, precision: int = DEFAULT_PRECISION, tail_mass: float = DEFAULT_TAIL_MASS) -> list["CdfTable"]:
        check_table_args(precision, tail_mass)
        tables = []
        z = -special.ndtri(tail_mass / 2)
        for s in self.scale_table:
            m = int(np.ceil(s * z))
            edges = np.arange(-m, m + 2, dtype=np.float64) - 0.5
            cdf = special.ndtr(edges / s)
            pmf = np.concatenate([[cdf[0]], np.diff(cdf), [special.ndtr(-edges[-1] / s)]])
            tables.append(CdfTable(-m - 1, pmf_to_cdf(pmf, precision)))
        return tables


def gaussian_noisy_likelihood(sigma: Tensor, v: Tensor) -> Tensor:
    """``Phi((v + 1/2)/sigma) - Phi((v - 1/2)/sigma)``, floored at 1e-9.

    Uses ``|v|`` so both terms sit in the lower tail where Phi is accurate.
    """
    a = T.tabs(v)
    upper = T.normal_cdf((0.5 - a) / sigma)
    lower = T.normal_cdf((-0.5 - a) / sigma)
    return T.clamp(upper - lower, LIKELIHOOD_FLOOR, None)


def bits_estimate(probabilities: Tensor) -> Tensor:
    """Total information content ``sum(-log2 p)`` in bits, with p floored at 1e-9."""
    p = T.clamp(probabilities, LIKELIHOOD_FLOOR, None)
    return T.tsum(T.log(p)) * (-1.0 / np.log(2.0))


# ---------------------------------------------------------------------------
# integer tables


@dataclass(frozen=True)
class CdfTable:
    """Integer cumulative table.

    Symbol ``s`` maps to bin ``s - offset``.  Bin 0 and the last bin are escape
    bins for values below/above the modelled range.
    """

    offset: int
    cdf: np.ndarray

    @property
    def num_bins(self) -> int:
        return len(self.cdf) - 1

    @property
    def v_min(self) -> int:
        return self.offset + 1

    @property
    def v_max(self) -> int:
        return self.offset + self.num_bins - 2

    @property
    def precision(self) -> int:
        return int(self.cdf[-1]).bit_length() - 1

    def probabilities(self) -> np.ndarray:
        return np.diff(self.cdf) / float(self.cdf[-1])


def check_table_args(precision: int, tail_mass: float) -> None:
    if not 8 <= precision <= 16:
        raise ValueError(f"precision must be in [8, 16], got {precision}")
    if not 0 < tail_mass <= 1e-6:
        raise ValueError(f"tail_mass must be in (0, 1e-6], got {tail_mass}")


def pmf_to_cdf(pmf: np.ndarray, precision: int) -> np.ndarray:
    """Quantize a pmf to integer counts summing to ``2**precision``, each >= 1.

    Returns the cumulative table ``[0, c0, c0+c1, ..., 2**precision]``.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    total = 1 << precision
    n = len(pmf)
    if n > total:
        raise ValueError(f"{n} bins do not fit in a {precision}-bit table")
    if np.any(pmf < 0) or pmf.sum() <= 0:
        raise ValueError("pmf must be non-negative with positive mass")
    pmf = pmf / pmf.sum()
    counts = np.maximum(1, np.rint(pmf * total)).astype(np.int64)
    # greedy repair of the total: each unit goes where it costs the least code length
    diff = total - int(counts.sum())
    while diff > 0:
        gain = pmf * np.log((counts + 1) / counts)
        k = int(np.argmax(gain))
        counts[k] += 1
        diff -= 1
    while diff < 0:
        cost = np.where(counts > 1, pmf * np.log(counts / np.maximum(counts - 1, 1)), np.inf)
        k = int(np.argmin(cost))
        counts[k] -= 1
        diff += 1
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


def build_cdf_table(model, precision: int = DEFAULT_PRECISION, tail_mass: float = DEFAULT_TAIL_MASS) -> list[CdfTable]:
    """Integer tables for a factorized (per channel) or Gaussian (per scale level) model."""
    return model.build_tables(precision, tail_mass)
