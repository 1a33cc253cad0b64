"""
Latent diffusion: noise schedules, forward process, the conditional MLP denoiser
with a learnable null condition, classifier-free guidance and ancestral sampling.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import numcore as nc
from .errors import ConfigError, DatasetError, ShapeError
from .numcore import AdamState, ParamBundle, Tensor

log = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MIN_STEP_ALPHA = 0.001

Predictor = Callable[[np.ndarray, int], np.ndarray]


# ------------------------
# Schedules
# ------------------------
@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """alpha_bar[0] = 1, strictly decreasing to alpha_bar[T] near 0."""

    kind: str
    T: int
    alpha_bar: np.ndarray

    def step_alpha(self, t: int, s: Optional[int] = None) -> float:
        """alpha_{t|s} = alpha_bar_t / alpha_bar_s (s defaults to t - 1)."""
        s = t - 1 if s is None else s
        return float(self.alpha_bar[t] / self.alpha_bar[s])

    def posterior_variance(self, t: int, s: Optional[int] = None) -> float:
        s = t - 1 if s is None else s
        ab_s, ab_t = self.alpha_bar[s], self.alpha_bar[t]
        return float((1.0 - ab_s) * (1.0 - ab_t / ab_s) / (1.0 - ab_t))


def make_schedule(kind: str = "cosine", T: int = 100) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
        raw = f / f[0]
        alphas = np.clip(raw[1:] / raw[:-1], MIN_STEP_ALPHA, 1.0)
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
        alphas = np.clip(1.0 - betas, MIN_STEP_ALPHA, 1.0)
    else:
        raise ConfigError(f"unknown schedule kind '{kind}' (expected cosine or linear)")
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    alpha_bar.setflags(write=False)
    return NoiseSchedule(kind=kind, T=T, alpha_bar=alpha_bar)


def respaced_ladder(T_train: int, T_sample: int) -> List[int]:
    """T, T - stride, ... (> 0), then 0, with stride = ceil(T_train / T_sample)."""
    if not 1 <= T_sample <= T_train:
        raise ConfigError(f"need 1 <= T_sample <= T_train, got {T_sample} and {T_train}")
    stride = math.ceil(T_train / T_sample)
    return list(range(T_train, 0, -stride)) + [0]


# ------------------------
# Forward process
# ------------------------
def q_sample(
    z0: Union[Tensor, np.ndarray],
    t: Union[int, np.ndarray],
    eps: Union[Tensor, np.ndarray],
    schedule: NoiseSchedule,
) -> Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; `t` is a scalar or one step per row."""
    z0, eps = nc.as_tensor(z0), nc.as_tensor(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"q_sample: z0 {z0.shape} and eps {eps.shape} differ")
    steps = np.asarray(t, dtype=np.int64)
    if np.any(steps < 0) or np.any(steps > schedule.T):
        raise ShapeError(f"q_sample: t must lie in 0..{schedule.T}")
    ab = schedule.alpha_bar[steps]
    if steps.ndim == 1:
        ab = ab[:, None]
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


# ------------------------
# Denoiser
# ------------------------
def time_embedding(t: np.ndarray, dim: int = 32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def init_denoiser(
    rng: np.random.Generator,
    latent_dim: int = 24,
    cond_dim: int = 24,
    hidden: int = 256,
    layers: int = 4,
    time_dim: int = 32,
) -> ParamBundle:
    sizes = [latent_dim + cond_dim + time_dim] + [hidden] * (layers - 1) + [latent_dim]
    tensors: Dict[str, Tensor] = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        tensors[f"w{k}"] = Tensor(nc.glorot(rng, fan_in, fan_out), requires_grad=True)
        tensors[f"b{k}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    tensors["null"] = Tensor(rng.normal(0.0, 0.1, size=cond_dim), requires_grad=True)
    return ParamBundle(tensors)


def _n_layers(params: ParamBundle) -> int:
    return sum(1 for name in params.tensors if name.startswith("w"))


def _time_dim(params: ParamBundle) -> int:
    latent_dim = params[f"w{_n_layers(params) - 1}"].shape[1]
    return params["w0"].shape[0] - latent_dim - params["null"].shape[0]


def denoise_predict(
    z_t: Union[Tensor, np.ndarray],
    t: Union[int, np.ndarray],
    condition: Optional[Union[Tensor, np.ndarray]],
    params: ParamBundle,
    keep: Optional[np.ndarray] = None,
) -> Tensor:
    """
    z0 estimate from (z_t, t, condition). `condition=None` uses the learnable null
    embedding; with `keep`, rows where keep is False use it instead of their condition.
    """
    z_t = nc.as_tensor(z_t)
    if z_t.ndim == 1:
        z_t = z_t.reshape((1, -1))
    batch = z_t.shape[0]
    null = params["null"]
    latent_dim = params[f"w{_n_layers(params) - 1}"].shape[1]
    if z_t.shape[1] != latent_dim:
        raise ShapeError(f"denoise_predict: z_t {z_t.shape} does not match latent dim {latent_dim}")

    null_rows = nc.broadcast_to(null.reshape((1, -1)), (batch, null.shape[0]))
    if condition is None:
        cond = null_rows
    else:
        cond = nc.as_tensor(condition)
        if cond.ndim == 1:
            cond = nc.broadcast_to(cond.reshape((1, -1)), (batch, cond.shape[0]))
        if cond.shape != (batch, null.shape[0]):
            raise ShapeError(f"denoise_predict: condition {cond.shape} does not match ({batch}, {null.shape[0]})")
        if keep is not None:
            mask = np.asarray(keep, dtype=np.float64).reshape(batch, 1)
            cond = cond * mask + null_rows * (1.0 - mask)

    steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    temb = Tensor._wrap(time_embedding(steps, _time_dim(params)), False)
    h = nc.concat([z_t, cond, temb], axis=1)
    n = _n_layers(params)
    for k in range(n):
        h = nc.linear(h, params[f"w{k}"], params[f"b{k}"])
        if k < n - 1:
            h = h.relu()
    return h


def cfg_predict(
    z_t: np.ndarray, t: int, c: np.ndarray, w: float, params: ParamBundle
) -> np.ndarray:
    """w * conditional + (1 - w) * unconditional."""
    with nc.no_recording():
        cond = denoise_predict(z_t, t, c, params).data
        uncond = denoise_predict(z_t, t, None, params).data
    return w * cond + (1.0 - w) * uncond


def guided_predictor(params: ParamBundle, c: Optional[np.ndarray], w: float) -> Predictor:
    """Predictor for sampling: guided when a condition is given, plain null-condition otherwise."""
    if c is None:
        def predict(z_t: np.ndarray, t: int) -> np.ndarray:
            with nc.no_recording():
                return denoise_predict(z_t, t, None, params).data
        return predict
    return lambda z_t, t: cfg_predict(z_t, t, c, w, params)


# ------------------------
# Reverse process
# ------------------------
def step_coefficients(schedule: NoiseSchedule, t: int, s: Optional[int] = None) -> Tuple[float, float, float]:
    """(prediction coefficient, z_t coefficient, sigma) for the step t -> s."""
    s = t - 1 if s is None else s
    if t < 1 or not 0 <= s < t or t > schedule.T:
        raise ShapeError(f"ancestral step needs 0 <= s < t <= {schedule.T}, got t={t}, s={s}")
    ab_s, ab_t = schedule.alpha_bar[s], schedule.alpha_bar[t]
    a_ts = schedule.step_alpha(t, s)
    denom = 1.0 - ab_t
    coef_pred = math.sqrt(ab_s) * (1.0 - a_ts) / denom
    coef_z = math.sqrt(a_ts) * (1.0 - ab_s) / denom
    sigma = math.sqrt(max(schedule.posterior_variance(t, s), 0.0))
    return coef_pred, coef_z, sigma


def ancestral_step(
    z_t: np.ndarray,
    prediction: np.ndarray,
    t: int,
    eps: np.ndarray,
    schedule: NoiseSchedule,
    s: Optional[int] = None,
) -> np.ndarray:
    coef_pred, coef_z, sigma = step_coefficients(schedule, t, s)
    return coef_pred * np.asarray(prediction) + coef_z * np.asarray(z_t) + sigma * np.asarray(eps)


def sample_latent(
    predict: Predictor,
    latent_dim: int,
    schedule: NoiseSchedule,
    ladder: Sequence[int],
    rng: np.random.Generator,
    n: int = 1,
) -> np.ndarray:
    """Ancestral sampling from z_T ~ N(0, I) down the given timestep ladder; returns (n, latent_dim)."""
    z = rng.standard_normal((n, latent_dim))
    for t, s in zip(ladder[:-1], ladder[1:]):
        prediction = predict(z, t)
        _, _, sigma = step_coefficients(schedule, t, s)
        eps = rng.standard_normal(z.shape) if sigma > 0 else np.zeros_like(z)
        z = ancestral_step(z, prediction, t, eps, schedule, s)
    return z


# ------------------------
# Training
# ------------------------
@dataclass
class DiffusionConfig:
    T_train: int = 100
    T_sample: int = 50
    T_sample_uncond: int = 10
    p_drop: float = 0.1
    w: float = 2.0
    schedule: str = "cosine"
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32

    def __post_init__(self):
        if not 1 <= self.T_sample <= self.T_train or not 1 <= self.T_sample_uncond <= self.T_train:
            raise ConfigError("sampling steps must satisfy 1 <= T_sample <= T_train")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1], got {self.p_drop}")


def diffusion_loss(
    z: Union[Tensor, np.ndarray],
    c: Union[Tensor, np.ndarray],
    params: ParamBundle,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    p_drop: float = 0.1,
    predict: Optional[Callable[[Tensor, np.ndarray, Tensor, np.ndarray], Tensor]] = None,
) -> Tensor:
    """
    mean_b || zhat(z_t, t, c or null) - z ||^2 with t ~ U{1..T}, fresh eps and the
    condition dropped to the null embedding with probability p_drop.
    """
    z, c = nc.as_tensor(z), nc.as_tensor(c)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DatasetError("diffusion_loss: empty batch")
    batch = z.shape[0]
    t = rng.integers(1, schedule.T + 1, size=batch)
    eps = rng.standard_normal(z.shape)
    keep = rng.random(batch) >= p_drop
    z_t = q_sample(z, t, eps, schedule)
    if predict is None:
        prediction = denoise_predict(z_t, t, c, params, keep=keep)
    else:
        prediction = predict(z_t, t, c, keep)
    diff = prediction - z
    return (diff * diff).sum(axis=1).mean()


@dataclass
class DiffusionResult:
    params: ParamBundle
    losses: List[float] = field(default_factory=list)


def train_diffusion(
    latents: np.ndarray,
    conditions: np.ndarray,
    params: ParamBundle,
    schedule: NoiseSchedule,
    cfg: DiffusionConfig,
    rng: np.random.Generator,
    progress: bool = False,
) -> DiffusionResult:
    """Fit the denoiser on fixed (mu_g, c) pairs; the encoders never see a gradient here."""
    latents = np.asarray(latents, dtype=np.float64)
    conditions = np.asarray(conditions, dtype=np.float64)
    if latents.shape[0] == 0 or latents.shape[0] != conditions.shape[0]:
        raise DatasetError("train_diffusion: empty dataset or mismatched latent/condition counts")
    bundles = {"den": params.trainable()}
    flat = nc.flatten_bundles(bundles)
    state = AdamState(lr=cfg.lr)
    losses: List[float] = []

    for epoch in tqdm(range(cfg.epochs), desc="diffusion", disable=not progress):
        order = rng.permutation(latents.shape[0])
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]

            def loss_fn(p: Dict[str, Tensor]):
                den = nc.unflatten_bundles(bundles, p)["den"]
                return diffusion_loss(latents[idx], conditions[idx], den, schedule, rng, cfg.p_drop), {}

            loss, flat, state, _ = nc.train_step(loss_fn, flat, state)
            total += loss * len(idx)
        losses.append(total / len(order))
        log.info("diffusion epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, losses[-1])

    trained = nc.unflatten_bundles(bundles, flat)["den"]
    return DiffusionResult(params=trained.frozen(), losses=losses)
