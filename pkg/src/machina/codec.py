"""Scale-hyperprior auto-encoder with a differentiable rate estimate.

Parameter layout (all names are prefixed by their group):

* ``encoder``: three stride-2 5x5 convolutions with GDN in between (H/8).
* ``decoder``: the mirrored transposed convolutions with inverse GDN.
* ``hyper_encoder``: |y| -> 3x3 conv -> two stride-2 5x5 convs (ReLU).
* ``hyper_decoder``: two stride-2 transposed convs -> 3x3 conv -> scale map.
* ``entropy_model``: per-channel monotone CDF networks for the hyper-latent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import Tensor

SCALE_BOUND = 0.11
LIKELIHOOD_FLOOR = 1e-9
GDN_BETA_BOUND = 1e-6
LAMBDA_TABLE = {1: 0.003, 2: 0.01, 3: 0.03, 4: 0.1}
FACTORIZED_FILTERS = (1, 3, 3, 1)
ENTROPY_INIT_SCALE = 3.0


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class ModelError(ValueError):
    """The learned probability model is not a valid distribution."""


@dataclass(frozen=True)
class CodecConfig:
    n_latent_channels: int = 32
    n_hyper_channels: int = 16
    q: int = 1
    n_filters: int = 32

    def __post_init__(self):
        if min(self.n_latent_channels, self.n_hyper_channels, self.n_filters) <= 0:
            raise ValueError("channel counts must be positive")
        if self.q not in LAMBDA_TABLE:
            raise ValueError(f"quality q must be one of {sorted(LAMBDA_TABLE)}, got {self.q}")

    @property
    def lambda_mse(self) -> float:
        return LAMBDA_TABLE[self.q]

    @classmethod
    def from_params(cls, params: ParameterSet, q: int = 1) -> "CodecConfig":
        n_filters, _, _, _ = params["encoder.conv0.weight"].shape
        latent = params["encoder.conv2.weight"].shape[0]
        hyper = params["hyper_encoder.conv2.weight"].shape[0]
        return cls(n_latent_channels=latent, n_hyper_channels=hyper, q=q, n_filters=n_filters)


@dataclass
class LatentPair:
    y: Tensor
    y_hat: Tensor
    h: Tensor
    h_hat: Tensor
    sigma: Tensor


@dataclass(frozen=True)
class RateReport:
    bits_latent_est: float
    bits_hyper_est: float
    num_pixels: int

    @property
    def bpp_est(self) -> float:
        return (self.bits_latent_est + self.bits_hyper_est) / self.num_pixels


# ------------------------------------------------------------------- params


def _conv_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_conv(params: ParameterSet, rng, group: str, name: str, cin: int, cout: int, k: int,
              transpose: bool = False) -> None:
    if transpose:
        shape, fan_in = (cin, cout, k, k), cout * k * k
    else:
        shape, fan_in = (cout, cin, k, k), cin * k * k
    params.add(f"{group}.{name}.weight", _conv_init(rng, shape, fan_in), group)
    params.add(f"{group}.{name}.bias", _conv_init(rng, (cout,), fan_in), group)


def _add_gdn(params: ParameterSet, group: str, name: str, ch: int) -> None:
    params.add(f"{group}.{name}.beta", np.full(ch, T.inverse_softplus(1.0 - GDN_BETA_BOUND)), group)
    gamma = np.full((ch, ch), 1e-3)
    np.fill_diagonal(gamma, 0.1)
    params.add(f"{group}.{name}.gamma", T.inverse_softplus(gamma), group)


def init_codec_params(config: CodecConfig = CodecConfig(), seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    n, m, c = config.n_filters, config.n_latent_channels, config.n_hyper_channels
    p = ParameterSet()
    _add_conv(p, rng, "encoder", "conv0", 3, n, 5)
    _add_gdn(p, "encoder", "gdn0", n)
    _add_conv(p, rng, "encoder", "conv1", n, n, 5)
    _add_gdn(p, "encoder", "gdn1", n)
    _add_conv(p, rng, "encoder", "conv2", n, m, 5)

    _add_conv(p, rng, "decoder", "deconv0", m, n, 5, transpose=True)
    _add_gdn(p, "decoder", "igdn0", n)
    _add_conv(p, rng, "decoder", "deconv1", n, n, 5, transpose=True)
    _add_gdn(p, "decoder", "igdn1", n)
    _add_conv(p, rng, "decoder", "deconv2", n, 3, 5, transpose=True)

    # start out as if pixels were centred on mid-gray; trains noticeably faster than raw [0, 1] values
    p["encoder.conv0.bias"].data -= 0.5 * p["encoder.conv0.weight"].data.sum(axis=(1, 2, 3))
    p["decoder.deconv2.bias"].data += 0.5

    _add_conv(p, rng, "hyper_encoder", "conv0", m, m, 3)
    _add_conv(p, rng, "hyper_encoder", "conv1", m, m, 5)
    _add_conv(p, rng, "hyper_encoder", "conv2", m, c, 5)

    _add_conv(p, rng, "hyper_decoder", "deconv0", c, m, 5, transpose=True)
    _add_conv(p, rng, "hyper_decoder", "deconv1", m, m, 5, transpose=True)
    _add_conv(p, rng, "hyper_decoder", "conv2", m, m, 3)

    filters = FACTORIZED_FILTERS
    init_scale = ENTROPY_INIT_SCALE ** (1.0 / (len(filters) - 1))
    for i in range(len(filters) - 1):
        fin, fout = filters[i], filters[i + 1]
        init = math.log(math.expm1(1.0 / init_scale / fout))
        p.add(f"entropy_model.matrix{i}", np.full((c, fout, fin), init), "entropy_model")
        p.add(f"entropy_model.bias{i}", rng.uniform(-0.5, 0.5, size=(c, fout, 1)), "entropy_model")
        if i < len(filters) - 2:
            p.add(f"entropy_model.factor{i}", np.zeros((c, fout, 1)), "entropy_model")
    return p


# --------------------------------------------------------------- transforms


def _conv(x: Tensor, params: ParameterSet, prefix: str, stride: int, padding: int) -> Tensor:
    return T.conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], stride, padding)


def _deconv(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return T.conv2d_transpose(x, params[prefix + ".weight"], params[prefix + ".bias"], 2, 2, 1)


def gdn_params(params: ParameterSet, prefix: str) -> tuple[Tensor, Tensor]:
    """Effective (beta, gamma) from their softplus parameterization."""
    beta = T.add_scalar(T.softplus(params[prefix + ".beta"]), GDN_BETA_BOUND)
    gamma = T.softplus(params[prefix + ".gamma"])
    return beta, gamma


def _gdn(x: Tensor, params: ParameterSet, prefix: str, inverse: bool = False) -> Tensor:
    beta, gamma = gdn_params(params, prefix)
    return T.gdn(x, beta, gamma, inverse=inverse)


def check_image_dims(height: int, width: int) -> None:
    if height % 16 or width % 16:
        raise T.ShapeError(
            f"image size {height}x{width} is not divisible by 16; pad to "
            f"{-(-height // 16) * 16}x{-(-width // 16) * 16} first")


def encode_analysis(x: Tensor, params: ParameterSet) -> Tensor:
    """Image batch [N,3,H,W] -> latent y [N,M,H/8,W/8]."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"expected an [N,3,H,W] image batch, got {x.shape}")
    check_image_dims(x.shape[2], x.shape[3])
    y = _conv(x, params, "encoder.conv0", 2, 2)
    y = _gdn(y, params, "encoder.gdn0")
    y = _conv(y, params, "encoder.conv1", 2, 2)
    y = _gdn(y, params, "encoder.gdn1")
    return _conv(y, params, "encoder.conv2", 2, 2)


def decode_synthesis(y_hat: Tensor, params: ParameterSet, clamp: bool = False) -> Tensor:
    """Latent [N,M,h,w] -> reconstruction [N,3,8h,8w]; ``clamp`` for evaluation."""
    m = params["decoder.deconv0.weight"].shape[0]
    if y_hat.ndim != 4 or y_hat.shape[1] != m:
        raise T.ShapeError(f"decoder expects {m} latent channels on axis 1, got shape {y_hat.shape}")
    x = _deconv(y_hat, params, "decoder.deconv0")
    x = _gdn(x, params, "decoder.igdn0", inverse=True)
    x = _deconv(x, params, "decoder.deconv1")
    x = _gdn(x, params, "decoder.igdn1", inverse=True)
    x = _deconv(x, params, "decoder.deconv2")
    if clamp:
        return T.constant(np.clip(x.data, 0.0, 1.0))
    return x


def hyper_analysis(y: Tensor, params: ParameterSet) -> Tensor:
    h = T.relu(_conv(T.absolute(y), params, "hyper_encoder.conv0", 1, 1))
    h = T.relu(_conv(h, params, "hyper_encoder.conv1", 2, 2))
    return _conv(h, params, "hyper_encoder.conv2", 2, 2)


def hyper_synthesis(h_hat: Tensor, params: ParameterSet, latent_hw: tuple[int, int]) -> Tensor:
    """Hyper-latent -> per-element scale, cropped to the latent's spatial size."""
    s = T.relu(_deconv(h_hat, params, "hyper_decoder.deconv0"))
    s = T.relu(_deconv(s, params, "hyper_decoder.deconv1"))
    s = _conv(s, params, "hyper_decoder.conv2", 1, 1)
    hh, ww = latent_hw
    if s.shape[2] != hh or s.shape[3] != ww:
        s = T.index(s, (slice(None), slice(None), slice(0, hh), slice(0, ww)))
    return T.add_scalar(T.softplus(s), SCALE_BOUND)


def quantize(t: Tensor, mode: Mode | str, rng: np.random.Generator | int | None = None) -> Tensor:
    """Rounding (EVAL) or the additive uniform-noise proxy (TRAIN).

    TRAIN passes gradients straight through; EVAL output is a constant.
    """
    mode = Mode(mode)
    if mode is Mode.EVAL:
        return T.constant(round_half_away(t.data))
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    noise = rng.uniform(-0.5, 0.5, size=t.shape)
    return T.add(t, T.constant(noise))


def round_half_away(a: np.ndarray) -> np.ndarray:
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


def hyper_forward(y: Tensor, params: ParameterSet, mode: Mode | str = Mode.EVAL,
                  rng: np.random.Generator | int | None = None) -> tuple[Tensor, Tensor, Tensor]:
    h = hyper_analysis(y, params)
    h_hat = quantize(h, mode, rng)
    sigma = hyper_synthesis(h_hat, params, (y.shape[2], y.shape[3]))
    return h, h_hat, sigma


def forward(x: Tensor, params: ParameterSet, mode: Mode | str = Mode.TRAIN,
            rng: np.random.Generator | int | None = None) -> tuple[Tensor, LatentPair]:
    """Full codec pass. Returns the (unclamped) reconstruction and latents."""
    mode = Mode(mode)
    if mode is Mode.TRAIN and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    y = encode_analysis(x, params)
    h, h_hat, sigma = hyper_forward(y, params, mode, rng)
    y_hat = quantize(y, mode, rng)
    x_hat = decode_synthesis(y_hat, params)
    return x_hat, LatentPair(y=y, y_hat=y_hat, h=h, h_hat=h_hat, sigma=sigma)


# ---------------------------------------------------------------- rate model


def factorized_logits(v: Tensor, params: ParameterSet) -> Tensor:
    """Logit of the learned per-channel CDF at values ``v`` shaped [C,1,M]."""
    x = v
    n_stages = len(FACTORIZED_FILTERS) - 1
    for i in range(n_stages):
        x = T.channel_matmul(T.softplus(params[f"entropy_model.matrix{i}"]), x)
        x = T.add(x, params[f"entropy_model.bias{i}"])
        if i < n_stages - 1:
            gate = T.tanh(params[f"entropy_model.factor{i}"])
            x = T.add(x, T.mul(T.tanh(x), gate))
    return x


def factorized_cdf(v: Tensor, params: ParameterSet) -> Tensor:
    return T.sigmoid(factorized_logits(v, params))


def _channels_first(h: Tensor) -> Tensor:
    n, c, hh, ww = h.shape
    return T.reshape(T.permute(h, (1, 0, 2, 3)), (c, 1, n * hh * ww))


def _from_channels_first(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    n, c, hh, ww = shape
    return T.permute(T.reshape(t, (c, n, hh, ww)), (1, 0, 2, 3))


def factorized_likelihood(h_hat: Tensor, params: ParameterSet) -> Tensor:
    """Per-element probability of the (integer or noisy) hyper-latent."""
    c = params["entropy_model.matrix0"].shape[0]
    if h_hat.shape[1] != c:
        raise T.ShapeError(f"entropy model has {c} channels, hyper-latent axis 1 has {h_hat.shape[1]}")
    v = _channels_first(h_hat)
    lower = factorized_logits(T.add_scalar(v, -0.5), params)
    upper = factorized_logits(T.add_scalar(v, 0.5), params)
    if (upper.data < lower.data).any():
        bad = np.argwhere(upper.data < lower.data)[0]
        raise ModelError(f"learned CDF decreases at channel {int(bad[0])}")
    sign = T.constant(-np.sign(lower.data + upper.data))
    lik = T.absolute(T.sub(T.sigmoid(T.mul(upper, sign)), T.sigmoid(T.mul(lower, sign))))
    return _from_channels_first(lik, h_hat.shape)


def gaussian_likelihood(y_hat: Tensor, sigma: Tensor) -> Tensor:
    return T.gaussian_likelihood(y_hat, sigma)


def bits(likelihood: Tensor) -> Tensor:
    """Total information content in bits, floored likelihoods."""
    floored = T.lower_bound(likelihood, LIKELIHOOD_FLOOR)
    return T.scale(T.tensor_sum(T.log(floored)), -1.0 / math.log(2.0))


def rate_terms(latents: LatentPair, params: ParameterSet) -> tuple[Tensor, Tensor]:
    """Differentiable (latent bits, hyper bits) for a batch."""
    if (latents.sigma.data < SCALE_BOUND).any():
        raise T.ContractError(f"sigma below the {SCALE_BOUND} bound")
    lat = gaussian_likelihood(latents.y_hat, latents.sigma)
    hyp = factorized_likelihood(latents.h_hat, params)
    for name, lk in (("latent", lat), ("hyper", hyp)):
        if not np.isfinite(lk.data).all():
            bad = np.argwhere(~np.isfinite(lk.data))[0]
            raise T.NumericError(f"non-finite {name} likelihood at element {tuple(int(i) for i in bad)}")
    return bits(lat), bits(hyp)


def rate_estimate(latents: LatentPair, params: ParameterSet, num_pixels: int) -> RateReport:
    lat_bits, hyp_bits = rate_terms(latents, params)
    return RateReport(lat_bits.item(), hyp_bits.item(), num_pixels)


def bpp_tensor(latents: LatentPair, params: ParameterSet, num_pixels: int) -> Tensor:
    lat_bits, hyp_bits = rate_terms(latents, params)
    return T.scale(T.add(lat_bits, hyp_bits), 1.0 / num_pixels)
