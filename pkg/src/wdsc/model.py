"""Side-information autoencoder: training graph, encoder/decoder pair, checkpoints.

The encoder sees only ``x``.  The decoder extracts a common-information
latent ``w = f(y)`` from the side image and reconstructs
``x_hat = g_sx(concat(v_hat, w))``.  During training a second branch
reconstructs ``y`` from ``concat(g_ay(y), w)`` so that ``w`` is pushed towards
what the two images share.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import codec
from . import tensor as T
from .entropy import (
    DEFAULT_PRECISION,
    DEFAULT_TAIL_MASS,
    CdfTable,
    FactorizedDensity,
    GaussianConditional,
    bits_estimate,
    gaussian_noisy_likelihood,
)
from .metrics import msssim_tensor
from .tensor import Tensor
from .transforms import (
    analysis_stack,
    hyper_analysis_stack,
    hyper_synthesis_stack,
    hyper_synthesize,
    synthesis_stack,
)

FACTORIZED = "factorized"
HYPERPRIOR = "hyperprior"
VARIANTS = (FACTORIZED, HYPERPRIOR)
CHECKPOINT_FORMAT = 1
_LN2 = np.log(2.0)


@dataclass
class LossTerms:
    """Distortions and rates of one training step.

    Rates are in bits per pixel of ``x``.  ``R_w`` is a differential
    (continuous) term and may be negative; it is never transmitted.
    """

    D_x: Tensor
    D_y: Tensor
    R_x: Tensor
    R_y: Tensor
    R_w: Tensor
    R_zx: Optional[Tensor] = None
    R_zy: Optional[Tensor] = None

    def values(self) -> dict[str, float]:
        out = {}
        for name in ("D_x", "D_y", "R_x", "R_y", "R_w", "R_zx", "R_zy"):
            t = getattr(self, name)
            if t is not None:
                out[name] = float(t.data)
        return out


@dataclass
class TrainOutput:
    x_hat: Tensor
    y_hat: Optional[Tensor]
    w: Tensor
    v_tilde: Tensor
    v_y: Optional[Tensor]
    terms: LossTerms
    z_tilde: Optional[Tensor] = None
    z_y: Optional[Tensor] = None


def loss(terms: LossTerms, lmbda: float, alpha: float, beta: float) -> Tensor:
    """``(R_x + lmbda*D_x) + alpha*(R_y + lmbda*D_y) + beta*R_w``.

    Hyperprior rates join their group: ``R_zx`` with x, ``R_zy`` with y.
    """
    if lmbda <= 0:
        raise ValueError("lambda must be positive")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    x_group = terms.R_x + lmbda * terms.D_x
    y_group = terms.R_y + lmbda * terms.D_y
    if terms.R_zx is not None:
        x_group = x_group + terms.R_zx
    if terms.R_zy is not None:
        y_group = y_group + terms.R_zy
    total = x_group
    if alpha:
        total = total + alpha * y_group
    if beta:
        total = total + beta * terms.R_w
    return total


def _as_batch(img, dtype) -> Tensor:
    t = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=dtype))
    if t.ndim == 3:
        t = T.reshape(t, (1,) + t.shape)
    return t


class WynerModel:
    """All transforms and entropy models of the side-information codec."""

    def __init__(
        self,
        n: int = 192,
        n_w: Optional[int] = None,
        variant: str = FACTORIZED,
        metric: str = "mse",
        seed: int = 0,
        dtype=np.float32,
        lambda_id: int = 0,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if metric not in ("mse", "msssim"):
            raise ValueError(f"unknown metric {metric!r}")
        self.n = n
        self.n_w = n if n_w is None else n_w
        self.variant = variant
        self.metric = metric
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.lambda_id = lambda_id
        rng = np.random.default_rng(seed)
        kw = dict(rng=rng, dtype=dtype)
        self.g_ax = analysis_stack(n, **kw)
        self.g_sx = synthesis_stack(n + self.n_w, n, **kw)
        self.g_ay = analysis_stack(n, **kw)
        self.g_sy = synthesis_stack(n + self.n_w, n, **kw)
        self.f = analysis_stack(n, out_channels=self.n_w, **kw)
        self.density_w = FactorizedDensity(self.n_w, dtype=dtype)
        if variant == FACTORIZED:
            self.density_vx = FactorizedDensity(n, dtype=dtype)
            self.density_vy = FactorizedDensity(n, dtype=dtype)
        else:
            self.h_ax = hyper_analysis_stack(n, **kw)
            self.h_sx = hyper_synthesis_stack(n, **kw)
            self.h_ay = hyper_analysis_stack(n, **kw)
            self.h_sy = hyper_synthesis_stack(n, **kw)
            self.density_zx = FactorizedDensity(n, dtype=dtype)
            self.density_zy = FactorizedDensity(n, dtype=dtype)
            self.gaussian = GaussianConditional()
        self.tables: dict[str, list[CdfTable]] = {}
        self.train_info: dict = {}

    # -- parameters ---------------------------------------------------------------

    def _components(self):
        names = ["g_ax", "g_sx", "g_ay", "g_sy", "f", "density_w"]
        if self.variant == FACTORIZED:
            names += ["density_vx", "density_vy"]
        else:
            names += ["h_ax", "h_sx", "h_ay", "h_sy", "density_zx", "density_zy"]
        return [(name, getattr(self, name)) for name in names]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for cname, comp in self._components():
            for pname, p in comp.named_parameters():
                yield f"{cname}.{pname}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def config(self) -> dict:
        return {
            "n": self.n,
            "n_w": self.n_w,
            "variant": self.variant,
            "metric": self.metric,
            "seed": self.seed,
            "dtype": self.dtype.name,
            "lambda_id": self.lambda_id,
        }

    # -- training graph -----------------------------------------------------------

    def distortion(self, x: Tensor, x_hat: Tensor) -> Tensor:
        if self.metric == "mse":
            d = x_hat - x
            return T.mean(d * d)
        return 1.0 - msssim_tensor(x_hat, x)

    def forward_train(self, x, y, rng: Optional[np.random.Generator] = None, side_branch: bool = True, noise: bool = True) -> TrainOutput:
        """One pass of the training graph.

        ``noise=False`` replaces the additive uniform noise by rounding (the
        deployed quantizer) for validation.  ``side_branch=False`` skips the
        ``y`` reconstruction entirely; its terms are then zero.
        """
        x = _as_batch(x, self.dtype)
        y = _as_batch(y, self.dtype)
        if x.shape != y.shape:
            raise ValueError(f"x and y shapes differ: {x.shape} vs {y.shape}")
        if noise and rng is None:
            raise ValueError("training noise needs an rng")
        b, _, h, w_ = x.shape
        pixels = float(b * h * w_)
        zero = Tensor(np.zeros((), dtype=self.dtype))

        def perturb(t: Tensor) -> Tensor:
            if noise:
                return T.add_uniform_noise(t, rng)
            return T.add(t, Tensor((codec.quantize(t.data) - t.data).astype(self.dtype)))

        v = self.g_ax(x)
        v_tilde = perturb(v)
        w = self.f(y)
        x_hat = self.g_sx(T.concat([v_tilde, w], axis=1))
        R_w = bits_estimate(self.density_w.density(w)) / pixels

        z_tilde = z_y = None
        R_zx = R_zy = None
        if self.variant == FACTORIZED:
            R_x = bits_estimate(self.density_vx.noisy_likelihood(v_tilde)) / pixels
        else:
            z = self.h_ax(T.tabs(v))
            z_tilde = perturb(z)
            sigma = hyper_synthesize(z_tilde, self.h_sx)
            R_x = bits_estimate(self.gaussian.noisy_likelihood(sigma, v_tilde)) / pixels
            R_zx = bits_estimate(self.density_zx.noisy_likelihood(z_tilde)) / pixels

        y_hat = v_y = None
        R_y, D_y = zero, zero
        if side_branch:
            v_y = self.g_ay(y)
            y_hat = self.g_sy(T.concat([v_y, w], axis=1))
            D_y = self.distortion(y, y_hat)
            if self.variant == FACTORIZED:
                R_y = bits_estimate(self.density_vy.noisy_likelihood(v_y)) / pixels
            else:
                z_y = self.h_ay(T.tabs(v_y))
                sigma_y = hyper_synthesize(z_y, self.h_sy)
                R_y = bits_estimate(self.gaussian.noisy_likelihood(sigma_y, v_y)) / pixels
                R_zy = bits_estimate(self.density_zy.noisy_likelihood(z_y)) / pixels
        elif self.variant == HYPERPRIOR:
            R_zy = zero

        terms = LossTerms(self.distortion(x, x_hat), D_y, R_x, R_y, R_w, R_zx, R_zy)
        return TrainOutput(x_hat, y_hat, w, v_tilde, v_y, terms, z_tilde, z_y)

    # -- deployed codec -----------------------------------------------------------

    def update_tables(self, precision: int = DEFAULT_PRECISION, tail_mass: float = DEFAULT_TAIL_MASS):
        """Freeze integer CDF tables from the current entropy-model parameters."""
        if self.variant == FACTORIZED:
            self.tables = {"vx": self.density_vx.build_tables(precision, tail_mass)}
        else:
            self.tables = {
                "zx": self.density_zx.build_tables(precision, tail_mass),
                "gauss": self.gaussian.build_tables(precision, tail_mass),
            }

    def _require_tables(self):
        if not self.tables:
            raise RuntimeError("entropy tables not built; call update_tables() or load a checkpoint")

    def common_information(self, y) -> Tensor:
        with T.no_grad():
            return self.f(_as_batch(y, self.dtype))

    def encode_latents(self, x) -> np.ndarray:
        """Quantized main latent ``v_hat`` for image ``x``, shape ``(1, N, h, w)``."""
        with T.no_grad():
            return codec.quantize(self.g_ax(_as_batch(x, self.dtype)).data)

    def compress(self, x) -> bytes:
        self._require_tables()
        xb = _as_batch(x, self.dtype)
        if xb.shape[0] != 1:
            raise ValueError("compress handles one image at a time")
        _, _, h, w = xb.shape
        with T.no_grad():
            v = self.g_ax(xb)
        v_hat = codec.quantize(v.data)
        header = codec.Header(
            variant=codec.VARIANT_FACTORIZED if self.variant == FACTORIZED else codec.VARIANT_HYPERPRIOR,
            lambda_id=self.lambda_id,
            image_h=h,
            image_w=w,
            channels=self.n,
            checkpoint_id=self.checkpoint_id(),
        )
        if self.variant == FACTORIZED:
            payload = codec.encode(_channel_major(v_hat), self.tables["vx"])
            return codec.pack(header, [payload])
        with T.no_grad():
            z = self.h_ax(T.tabs(v))
        z_hat = codec.quantize(z.data)
        z_payload = codec.encode(_channel_major(z_hat), self.tables["zx"])
        index = self._gaussian_index(z_hat)
        v_payload = codec.encode(_channel_major(v_hat), self.tables["gauss"], table_index=index)
        return codec.pack(header, [v_payload, z_payload])

    def _gaussian_index(self, z_hat: np.ndarray) -> np.ndarray:
        with T.no_grad():
            sigma = hyper_synthesize(Tensor(z_hat.astype(self.dtype)), self.h_sx)
        return _channel_major(self.gaussian.scale_indexes(sigma.data))

    def decode_latents(self, data: bytes) -> np.ndarray:
        """Parse and entropy-decode a bitstream back to ``v_hat`` ``(1, N, h, w)``."""
        self._require_tables()
        bs = codec.unpack(data)
        hd = bs.header
        if hd.checkpoint_id != self.checkpoint_id():
            raise codec.BitstreamError("bitstream was produced with a different checkpoint")
        expected = codec.VARIANT_FACTORIZED if self.variant == FACTORIZED else codec.VARIANT_HYPERPRIOR
        if hd.variant != expected or hd.channels != self.n:
            raise codec.BitstreamError("bitstream variant/channels do not match the model")
        if hd.image_h % 16 or hd.image_w % 16:
            raise codec.BitstreamError("image size in header not divisible by 16")
        lh, lw = hd.image_h // 16, hd.image_w // 16
        count = self.n * lh * lw
        if self.variant == FACTORIZED:
            flat = codec.decode(bs.payloads[0], self.tables["vx"], count)
        else:
            zh, zw = lh // 4, lw // 4
            z_flat = codec.decode(bs.payloads[1], self.tables["zx"], self.n * zh * zw)
            z_hat = _from_channel_major(z_flat, self.n, zh, zw)
            index = self._gaussian_index(z_hat)
            flat = codec.decode(bs.payloads[0], self.tables["gauss"], count, table_index=index)
        return _from_channel_major(flat, self.n, lh, lw)

    def decompress(self, data: bytes, y, mode: str = "full") -> np.ndarray:
        """Reconstruct ``x`` from the bitstream and side image ``y``.

        ``mode="common"`` zeroes the decoded latent and ``mode="private"``
        zeroes ``w`` before synthesis, showing what each part contributes.
        """
        if mode not in ("full", "common", "private"):
            raise ValueError(f"unknown mode {mode!r}")
        v_hat = self.decode_latents(data)
        yb = _as_batch(y, self.dtype)
        hd = codec.unpack(data).header
        if yb.shape[2:] != (hd.image_h, hd.image_w):
            raise ValueError(f"side image {yb.shape[2:]} does not match coded size {(hd.image_h, hd.image_w)}")
        with T.no_grad():
            w = self.f(yb).data
            v = v_hat.astype(self.dtype)
            if mode == "common":
                v = np.zeros_like(v)
            elif mode == "private":
                w = np.zeros_like(w)
            x_hat = self.g_sx(Tensor(np.concatenate([v, w], axis=1))).data
        return np.clip(x_hat[0], 0.0, 1.0)

    # -- identity -----------------------------------------------------------------

    def checkpoint_id(self) -> int:
        """64-bit digest of configuration, weights and frozen tables."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config(), sort_keys=True).encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes())
        for group in sorted(self.tables):
            h.update(group.encode())
            for t in self.tables[group]:
                h.update(np.int64(t.offset).tobytes())
                h.update(t.cdf.astype("<i8").tobytes())
        return int.from_bytes(h.digest()[:8], "little")


def _channel_major(a: np.ndarray) -> np.ndarray:
    # (1, C, h, w) -> flat, channel by channel
    return np.asarray(a)[0].reshape(-1)


def _from_channel_major(flat: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    return flat.reshape(1, c, h, w)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: WynerModel, path) -> None:
    """Write weights, config and frozen tables to an ``.npz`` container.

    Arrays are stored little-endian; tables are stored per group as
    concatenated cdfs with offsets and lengths.
    """
    meta = dict(model.config(), format=CHECKPOINT_FORMAT, checkpoint_id=f"{model.checkpoint_id():016x}", train=model.train_info)
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data.astype(p.data.dtype.newbyteorder("<"))
    for group, tables in model.tables.items():
        arrays[f"table/{group}/offsets"] = np.array([t.offset for t in tables], dtype="<i8")
        arrays[f"table/{group}/lengths"] = np.array([len(t.cdf) for t in tables], dtype="<i8")
        arrays[f"table/{group}/cdfs"] = np.concatenate([t.cdf for t in tables]).astype("<i8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> WynerModel:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
        model = WynerModel(
            n=meta["n"],
            n_w=meta["n_w"],
            variant=meta["variant"],
            metric=meta["metric"],
            seed=meta["seed"],
            dtype=np.dtype(meta["dtype"]),
            lambda_id=meta["lambda_id"],
        )
        model.train_info = meta.get("train", {})
        for name, p in model.named_parameters():
            arr = z[f"param/{name}"]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(model.dtype)
        groups = {k.split("/")[1] for k in z.files if k.startswith("table/")}
        for group in sorted(groups):
            offsets = z[f"table/{group}/offsets"]
            lengths = z[f"table/{group}/lengths"]
            cdfs = z[f"table/{group}/cdfs"]
            bounds = np.concatenate([[0], np.cumsum(lengths)])
            model.tables[group] = [CdfTable(int(o), cdfs[bounds[i] : bounds[i + 1]].astype(np.int64)) for i, o in enumerate(offsets)]
    if f"{model.checkpoint_id():016x}" != meta["checkpoint_id"]:
        raise ValueError("checkpoint contents do not match their recorded id")
    return model


# ---------------------------------------------------------------------------
# audit path


def kl_expansion(model: WynerModel, out: TrainOutput, x, y, lmbda: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    """Variational objective recomputed term by term from raw arrays.

    Shares no likelihood code with the training graph: cdf differences are
    taken from a float64 numpy evaluation, the common-information density is
    obtained by complex-step differentiation of the cdf, and each log term is
    converted to bits per pixel here.  The decoder likelihoods are the
    Gaussian-style ``-log p(x | w, v) = lmbda * D`` (in bits), so that with
    alpha = beta = 1 this is the negative expected log-joint of the model,
    up to the constant entropy of the uniform posterior.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if x.ndim == 3:
        x, y = x[None], y[None]
    pixels = x.shape[0] * x.shape[2] * x.shape[3]

    def nlog2(p):
        return -np.sum(np.log(np.maximum(p, 1e-9))) / _LN2 / pixels

    def per_channel(a):
        a = np.asarray(a, dtype=np.float64)
        return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)

    def noisy_p(density, a):
        flat = per_channel(a)
        return np.abs(density.cdf_numpy(flat + 0.5) - density.cdf_numpy(flat - 0.5))

    def gauss_noisy_p(sigma, a):
        from scipy.special import ndtr

        s = np.maximum(np.asarray(sigma, dtype=np.float64), model.gaussian.scale_floor)
        a = np.abs(np.asarray(a, dtype=np.float64))
        return ndtr((0.5 - a) / s) - ndtr((-0.5 - a) / s)

    def mse(a, b):
        return float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))

    d_x = mse(out.x_hat.data, x) if model.metric == "mse" else float(out.terms.D_x.data)
    nll_x = lmbda * d_x
    nll_w = nlog2(_complex_step_density(model.density_w, per_channel(out.w.data)))

    if model.variant == FACTORIZED:
        nll_vx = nlog2(noisy_p(model.density_vx, out.v_tilde.data))
        nll_zx = 0.0
    else:
        sigma = _softplus64(model.h_sx, out.z_tilde.data)
        nll_vx = nlog2(gauss_noisy_p(sigma, out.v_tilde.data))
        nll_zx = nlog2(noisy_p(model.density_zx, out.z_tilde.data))

    nll_y = nll_vy = nll_zy = 0.0
    if out.y_hat is not None:
        d_y = mse(out.y_hat.data, y) if model.metric == "mse" else float(out.terms.D_y.data)
        nll_y = lmbda * d_y
        if model.variant == FACTORIZED:
            nll_vy = nlog2(noisy_p(model.density_vy, out.v_y.data))
        else:
            sigma_y = _softplus64(model.h_sy, out.z_y.data)
            nll_vy = nlog2(gauss_noisy_p(sigma_y, out.v_y.data))
            nll_zy = nlog2(noisy_p(model.density_zy, out.z_y.data))

    return (nll_x + nll_vx + nll_zx) + alpha * (nll_y + nll_vy + nll_zy) + beta * nll_w


def _softplus64(stack, z: np.ndarray) -> np.ndarray:
    with T.no_grad():
        raw = stack(Tensor(np.asarray(z))).data.astype(np.float64)
    return np.logaddexp(0.0, raw) + 1e-6


def _complex_step_density(density: FactorizedDensity, x: np.ndarray, step: float = 1e-20) -> np.ndarray:
    h = (np.asarray(x, dtype=np.float64) + 1j * step)[:, None, :]
    for k, (m, b) in enumerate(zip(density.matrices, density.biases)):
        h = np.logaddexp(0.0, m.data.astype(np.float64)) @ h + b.data.astype(np.float64)
        if k < len(density.factors):
            h = h + np.tanh(density.factors[k].data.astype(np.float64)) * np.tanh(h)
    cdf = 1.0 / (1.0 + np.exp(-h[:, 0, :]))
    return np.imag(cdf) / step
