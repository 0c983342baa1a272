"""DMM-MAR and DMM-MNAR: sequential VAE with flow-style learned priors.

Both variants share the latent-state encoder, the decoder and the
latent-state prior.  They differ only in what the missing-cause encoder and
missing-cause prior are conditioned on:

* MAR:  the observed values at the same step (zero-filled, plus the mask);
* MNAR: the full previous step, i.e. observed values with the model's own
  imputation of the missing ones (gradient stopped), zero before t=1.

Each prior is a stack of per-coordinate networks mapping a latent coordinate
and its conditioning to a noise value; the log density is the standard-normal
log density of that noise plus the log absolute derivative of the noise
w.r.t. the coordinate (change of variables with a triangular Jacobian).
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError, ShapeError, ValidationError
from .numcore import (
    MlpParams,
    MlpStack,
    Tensor,
    concat,
    conv1d,
    gaussian_logpdf,
    init_linear,
    leaky_relu,
    mlp_forward,
    no_grad,
    parameter,
)
from .rng import KEY_INIT, stream

VARIANTS = ("MAR", "MNAR")
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
MIN_ABS_JACOBIAN = 1e-12
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class ModelConfig:
    n_obs: int
    n: int = 3
    n_c: int | None = None
    T: int = 5
    variant: str = "MAR"
    beta: float = 1e-3
    gamma: float = 1e-3
    enc_hidden: int | None = None
    kernel: int = 3
    decoder_hidden: tuple[int, ...] = ()
    prior_hidden: tuple[int, ...] = (128, 128, 128)
    slope: float = 0.2

    def __post_init__(self):
        # conv channels default to the observed width, the decoder to a
        # single dense layer
        if self.n_c is None:
            self.n_c = self.n_obs
        if self.enc_hidden is None:
            self.enc_hidden = self.n_obs
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ValidationError("loss weights must be nonnegative")
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        self.prior_hidden = tuple(int(h) for h in self.prior_hidden)

    @property
    def c_cond_dim(self) -> int:
        """Width of the missing-cause prior conditioning."""
        return 2 * self.n_obs if self.variant == "MAR" else self.n_obs

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["decoder_hidden"] = list(self.decoder_hidden)
        d["prior_hidden"] = list(self.prior_hidden)
        return d


@dataclass
class ConvEncoder:
    """Two 1-D convolutions over time followed by a per-step dense head
    producing (mean, log-variance)."""

    convs: list[tuple[Tensor, Tensor]]
    head: MlpParams
    padding: str = "same"
    slope: float = 0.2

    @classmethod
    def init(cls, rng, c_in: int, hidden: int, out_dim: int, kernel: int, padding: str, slope: float):
        convs = []
        for c0, c1 in ((c_in, hidden), (hidden, hidden)):
            bound = 1.0 / np.sqrt(kernel * c0)
            w = parameter(rng.uniform(-bound, bound, size=(kernel, c0, c1)))
            b = parameter(rng.uniform(-bound, bound, size=(c1,)))
            convs.append((w, b))
        head = MlpParams([init_linear(rng, hidden, 2 * out_dim)], slope)
        return cls(convs, head, padding, slope)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.convs for p in layer] + self.head.parameters()

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = x
        for w, b in self.convs:
            h = leaky_relu(conv1d(h, w, b, self.padding), self.slope)
        out = mlp_forward(self.head, h)
        d = out.shape[-1] // 2
        return out[..., :d], out[..., d:]


@dataclass
class GaussianSeq:
    mu: Tensor
    logvar: Tensor

    def sample(self, noise: np.ndarray) -> Tensor:
        return self.mu + (self.logvar * 0.5).exp() * noise

    def log_prob(self, sample: Tensor, noise: np.ndarray) -> Tensor:
        """Per-sequence log q(sample); ``noise`` is the standardised draw."""
        per = -0.5 * noise**2 - HALF_LOG_2PI - self.logvar * 0.5
        return per.sum(axis=(1, 2))


@dataclass
class LossBreakdown:
    recon: float
    kl_z: float
    kl_c: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class DmmParams:
    config: ModelConfig
    phi_z: ConvEncoder
    phi_c: ConvEncoder
    decoder: MlpParams
    r_nets: MlpStack
    s_nets: MlpStack

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def beta(self) -> float:
        return self.config.beta

    @property
    def gamma(self) -> float:
        return self.config.gamma

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "phi_z": self.phi_z.parameters(),
            "phi_c": self.phi_c.parameters(),
            "decoder": self.decoder.parameters(),
            "r_nets": self.r_nets.parameters(),
            "s_nets": self.s_nets.parameters(),
        }

    def parameters(self) -> list[Tensor]:
        return [p for group in self.groups().values() for p in group]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for k, (w, b) in enumerate(self.phi_z.convs):
            named[f"phi_z.conv{k}.w"], named[f"phi_z.conv{k}.b"] = w, b
        for k, (w, b) in enumerate(self.phi_z.head.layers):
            named[f"phi_z.head{k}.w"], named[f"phi_z.head{k}.b"] = w, b
        for k, (w, b) in enumerate(self.phi_c.convs):
            named[f"phi_c.conv{k}.w"], named[f"phi_c.conv{k}.b"] = w, b
        for k, (w, b) in enumerate(self.phi_c.head.layers):
            named[f"phi_c.head{k}.w"], named[f"phi_c.head{k}.b"] = w, b
        for k, (w, b) in enumerate(self.decoder.layers):
            named[f"decoder.layer{k}.w"], named[f"decoder.layer{k}.b"] = w, b
        for k, (w, b) in enumerate(self.r_nets.layers):
            named[f"r_nets.layer{k}.w"], named[f"r_nets.layer{k}.b"] = w, b
        for k, (w, b) in enumerate(self.s_nets.layers):
            named[f"s_nets.layer{k}.w"], named[f"s_nets.layer{k}.b"] = w, b
        return named

    def copy(self) -> "DmmParams":
        clone = init_params(self.config, seed=0)
        for name, p in clone.named_parameters().items():
            p.data[...] = self.named_parameters()[name].data
        return clone

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.data[...] = state[k]


def init_params(config: ModelConfig, seed: int = 0) -> DmmParams:
    # one stream per group, so shared groups match across variants
    def rng(group: int) -> np.random.Generator:
        return stream(seed, KEY_INIT, group)

    c_in = 2 * config.n_obs
    phi_z = ConvEncoder.init(rng(0), c_in, config.enc_hidden, config.n, config.kernel, "same", config.slope)
    if config.variant == "MAR":
        phi_c = ConvEncoder.init(rng(1), c_in, config.enc_hidden, config.n_c, config.kernel, "same", config.slope)
    else:
        phi_c = ConvEncoder.init(rng(1), config.n_obs, config.enc_hidden, config.n_c, config.kernel, "causal", config.slope)
    dec_widths = [config.n + config.n_c, *config.decoder_hidden, config.n_obs]
    decoder = MlpParams.init(rng(2), dec_widths, config.slope)
    r_nets = MlpStack.init(rng(3), config.n, [config.n + 1, *config.prior_hidden, 1], config.slope)
    s_nets = MlpStack.init(rng(4), config.n_c, [config.c_cond_dim + 1, *config.prior_hidden, 1], config.slope)
    return DmmParams(config, phi_z, phi_c, decoder, r_nets, s_nets)


# -- encoders / decoder -------------------------------------------------------

def _check_inputs(params: DmmParams, x: np.ndarray, mask: np.ndarray) -> None:
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.n_obs:
        raise ShapeError(f"model expects (batch, T, {cfg.n_obs}) series, got {x.shape}")
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match series {x.shape}")


def encoder_input(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero-filled values concatenated with the mask along channels."""
    m = np.asarray(mask, dtype=np.float64)
    return np.concatenate([np.where(m > 0, x, 0.0), m], axis=-1)


def _posterior(mu: Tensor, logvar: Tensor) -> GaussianSeq:
    return GaussianSeq(mu, logvar.clip(LOGVAR_MIN, LOGVAR_MAX))


def encode_z(params: DmmParams, x_filled: np.ndarray, mask: np.ndarray) -> GaussianSeq:
    x_filled = np.asarray(x_filled, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    _check_inputs(params, x_filled, mask)
    return _posterior(*params.phi_z(Tensor(encoder_input(x_filled, mask))))


def shift_back(series: np.ndarray) -> np.ndarray:
    """Series whose step t holds step t-1 of the input (zeros at t=1)."""
    out = np.zeros_like(series)
    out[:, 1:] = series[:, :-1]
    return out


def encode_c(params: DmmParams, x: np.ndarray, mask: np.ndarray, prev_full: np.ndarray | None = None) -> GaussianSeq:
    """Missing-cause posterior.

    MAR conditions on the observed values at each step.  MNAR conditions on
    ``prev_full``: at step t the completed series at t-1 (observed values
    plus imputations), zero at t=1.  When ``prev_full`` is omitted for MNAR
    it is built from ``x`` with missing entries zero-filled.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    _check_inputs(params, x, mask)
    if params.variant == "MAR":
        return _posterior(*params.phi_c(Tensor(encoder_input(x, mask))))
    if prev_full is None:
        prev_full = shift_back(np.where(mask > 0, x, 0.0))
    return _posterior(*params.phi_c(Tensor(prev_full)))


def decode(params: DmmParams, z, c) -> Tensor:
    z, c = (v if isinstance(v, Tensor) else Tensor(v) for v in (z, c))
    cfg = params.config
    if z.shape[-1] != cfg.n or c.shape[-1] != cfg.n_c or z.shape[:-1] != c.shape[:-1]:
        raise ShapeError(f"decoder expects z (..., {cfg.n}) and c (..., {cfg.n_c}), got {z.shape}, {c.shape}")
    return mlp_forward(params.decoder, concat([z, c], axis=-1))


def mnar_conditioning(params: DmmParams, x: np.ndarray, mask: np.ndarray, z_seq: np.ndarray, u_c: np.ndarray | None) -> np.ndarray:
    """Completed previous-step series for the MNAR cause encoder and prior.

    Walks forward in time: the cause at step t depends on the completed step
    t-1, whose missing entries come from decoding step t-1.  Runs without a
    graph, so the imputations act as constants (stop-gradient).  ``u_c`` is
    the standardised noise for sampling causes; ``None`` uses posterior means.
    """
    m = np.asarray(mask, dtype=np.float64) > 0
    x0 = np.where(m, x, 0.0)
    b, t_len, _ = x.shape
    prev = np.zeros_like(x0)
    with no_grad():
        for t in range(1, t_len):
            mu, lv = params.phi_c(Tensor(prev[:, :t]))
            mu_t = mu.data[:, t - 1]
            lv_t = np.clip(lv.data[:, t - 1], LOGVAR_MIN, LOGVAR_MAX)
            c_t = mu_t if u_c is None else mu_t + np.exp(0.5 * lv_t) * u_c[:, t - 1]
            x_hat = mlp_forward(params.decoder, Tensor(np.concatenate([z_seq[:, t - 1], c_t], axis=-1))).data
            prev[:, t] = np.where(m[:, t - 1], x0[:, t - 1], x_hat)
    return prev


# -- priors -------------------------------------------------------------------

def _check_jacobian(d: np.ndarray, t_offset: int) -> None:
    """``d``: (k, batch, T') derivatives; raises naming the first bad (t, i)."""
    small = np.abs(d) < MIN_ABS_JACOBIAN
    if np.any(small):
        k, _, t = np.argwhere(small)[0]
        raise NumericalError(f"prior Jacobian below {MIN_ABS_JACOBIAN} at t={t + t_offset + 1}, i={k + 1}")


def flow_noise(stack: MlpStack, coord: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
    """Noise values and their derivatives w.r.t. the coordinate, both (k, B, T').

    coord: (B, T', k) latent coordinates; cond: (B, T', m) conditioning
    shared by all k networks.  Network i sees [coord[..., i], cond].
    """
    b, t_len, k = coord.shape
    per_coord = coord.transpose(2, 0, 1).reshape(k, b * t_len, 1)
    cond_rows = cond.reshape(1, b * t_len, cond.shape[-1])
    cond_rep = concat([cond_rows] * k, axis=0) if k > 1 else cond_rows
    noise, deriv = stack.forward_jvp(concat([per_coord, cond_rep], axis=-1), 0)
    return noise.reshape(k, b, t_len), deriv.reshape(k, b, t_len)


def _flow_terms(stack: MlpStack, coord: Tensor, cond: Tensor, t_offset: int) -> Tensor:
    """Per-sequence sum over (t, i) of log N(noise) + log|d noise / d coord|."""
    noise, deriv = flow_noise(stack, coord, cond)
    _check_jacobian(deriv.data, t_offset)
    return (gaussian_logpdf(noise) + deriv.abs().log()).sum(axis=(0, 2))


def prior_logp_z(params: DmmParams, z: Tensor) -> Tensor:
    """log p(z_{1:T}) per sequence: standard normal at t=1, learned
    transition density for t >= 2 conditioned on z_{t-1}."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    first = gaussian_logpdf(z[:, 0, :]).sum(axis=1)
    if z.shape[1] < 2:
        return first
    return first + _flow_terms(params.r_nets, z[:, 1:, :], z[:, :-1, :], t_offset=1)


def prior_logp_c(params: DmmParams, c: Tensor, conditioning: np.ndarray) -> Tensor:
    """log p(c_{1:T} | conditioning) per sequence.

    MAR: ``conditioning`` is [zero-filled x_t, mask_t] and every step uses the
    learned density.  MNAR: ``conditioning`` is the completed x_{t-1}; step 1
    is standard normal and steps >= 2 use the learned density.
    """
    c = c if isinstance(c, Tensor) else Tensor(c)
    cond = Tensor(np.asarray(conditioning, dtype=np.float64))
    if cond.shape[-1] != params.config.c_cond_dim:
        raise ShapeError(f"cause prior expects {params.config.c_cond_dim} conditioning channels, got {cond.shape[-1]}")
    if params.variant == "MAR":
        return _flow_terms(params.s_nets, c, cond, t_offset=0)
    first = gaussian_logpdf(c[:, 0, :]).sum(axis=1)
    if c.shape[1] < 2:
        return first
    return first + _flow_terms(params.s_nets, c[:, 1:, :], cond[:, 1:, :], t_offset=1)


# -- objective ----------------------------------------------------------------

def kl_per_sequence(q: GaussianSeq, sample: Tensor, noise: np.ndarray, log_prior: Tensor) -> Tensor:
    """Single-sample estimate of KL(q || prior) for each sequence."""
    return q.log_prob(sample, noise) - log_prior


def _as_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "r", m), dtype=np.float64)


def elbo(
    params: DmmParams,
    x: np.ndarray,
    mask,
    target_mask,
    rng: np.random.Generator,
    target: np.ndarray | None = None,
) -> LossBreakdown:
    """Negative ELBO pieces for one batch.

    ``x``: (B, T, n_obs) values, with anything at masked positions ignored.
    ``mask``: what the model may see.  ``target_mask``: entries whose
    reconstruction is scored, against ``target`` (defaults to ``x``).
    """
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    m = _as_array(mask)
    tm = _as_array(target_mask)
    _check_inputs(params, x, m)
    if tm.shape != x.shape:
        raise ShapeError("target mask shape does not match the series")
    n_target = tm.sum()
    if n_target == 0:
        raise ContractError("target mask selects no entries; nothing to train on")
    target = x if target is None else np.asarray(target, dtype=np.float64)
    cfg = params.config
    b, t_len, _ = x.shape
    x0 = np.where(m > 0, x, 0.0)

    u_z = rng.standard_normal((b, t_len, cfg.n))
    u_c = rng.standard_normal((b, t_len, cfg.n_c))

    qz = encode_z(params, x0, m)
    z = qz.sample(u_z)
    if cfg.variant == "MAR":
        qc = encode_c(params, x0, m)
        cond = encoder_input(x0, m)
    else:
        cond = mnar_conditioning(params, x0, m, z.data, u_c)
        qc = encode_c(params, x0, m, prev_full=cond)
    c = qc.sample(u_c)

    x_hat = decode(params, z, c)
    resid = (x_hat - np.where(tm > 0, target, 0.0)) * tm
    recon = resid.square().sum() * (0.5 / n_target) + HALF_LOG_2PI

    kl_z = kl_per_sequence(qz, z, u_z, prior_logp_z(params, z)).mean()
    kl_c = kl_per_sequence(qc, c, u_c, prior_logp_c(params, c, cond)).mean()
    total = recon + kl_z * cfg.beta + kl_c * cfg.gamma
    return LossBreakdown(recon.item(), kl_z.item(), kl_c.item(), total.item(), graph=total)


def posterior_means(params: DmmParams, x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means of (z, c) without sampling."""
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    m = _as_array(mask)
    x0 = np.where(m > 0, x, 0.0)
    with no_grad():
        mu_z = encode_z(params, x0, m).mu.data
        if params.variant == "MAR":
            mu_c = encode_c(params, x0, m).mu.data
        else:
            prev = mnar_conditioning(params, x0, m, mu_z, None)
            mu_c = encode_c(params, x0, m, prev_full=prev).mu.data
    return mu_z, mu_c


def reconstruct(params: DmmParams, x: np.ndarray, mask) -> np.ndarray:
    mu_z, mu_c = posterior_means(params, x, mask)
    with no_grad():
        return decode(params, mu_z, mu_c).data


# -- checkpoints ----------------------------------------------------------------

def _encode_block(a: np.ndarray) -> dict:
    le = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _decode_block(block: dict) -> np.ndarray:
    raw = base64.b64decode(block["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(block["shape"])


def to_checkpoint(params: DmmParams, extra: dict | None = None) -> dict:
    return {
        "format": "dmm-checkpoint/1",
        "variant": params.variant,
        "config": params.config.to_dict(),
        "params": {k: _encode_block(p.data) for k, p in params.named_parameters().items()},
        "extra": extra or {},
    }


def from_checkpoint(doc: dict) -> DmmParams:
    if doc.get("format") != "dmm-checkpoint/1":
        raise ValidationError("not a DMM checkpoint")
    cfg = dict(doc["config"])
    params = init_params(ModelConfig(**cfg), seed=0)
    named = params.named_parameters()
    if set(named) != set(doc["params"]):
        raise ValidationError("checkpoint parameter names do not match the configuration")
    for k, p in named.items():
        arr = _decode_block(doc["params"][k])
        if arr.shape != p.shape:
            raise ShapeError(f"checkpoint block {k} has shape {arr.shape}, expected {p.shape}")
        p.data[...] = arr
    return params


def save_checkpoint(params: DmmParams, path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(to_checkpoint(params, extra), fh, sort_keys=True)


def load_checkpoint(path) -> DmmParams:
    with open(path) as fh:
        return from_checkpoint(json.load(fh))
