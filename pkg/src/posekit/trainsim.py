"""Desk-scale diffusion core and multi-task training simulator.

The denoiser is deliberately tiny: two affine layers with tanh in between,
each carrying a low-rank adapter pair, over a flattened 4x8x8 latent. What
the simulator exercises is not generation quality but the training
mechanics: closed-form forward noising, the deterministic reverse update,
classifier-free guidance, two-task sampling, condition dropout, and the
partial-parameter rule that the animation task updates the adapter plus
both pose modules while the text-image-to-video task zeroes the pose
conditions and updates the adapter only.

Parameters are split into four partitions: ``base`` (frozen trunk),
``lora`` (adapter pairs, effective weight W + down @ up), ``ipi`` (the
cross-attention extractor) and ``epi`` (an affine stub mapping rendered
pose features to the explicit condition). The trainability mask is applied
at update time, so frozen partitions stay bitwise identical no matter how
many steps run.

Per-step randomness comes from a stream derived from (seed, step index),
which makes runs reproducible and independent of batching order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .epi import AnchorPool, EpiConfig, TransformRecord, epi_transform
from .errors import ConfigError, NumericalError, ShapeError, UsageError
from .ipi import (
    IpiConfig,
    IpiParams,
    init_ipi_params,
    ipi_backward,
    ipi_forward_cached,
    residual_inject,
    synthetic_clip_features,
    zero_grads,
)
from .pose_io import CanvasSpec, render_frame
from .seeding import derive_rng
from .skeleton import PoseFrame, PoseSequence, stick_figure

# Full-scale reference constants; the desk-scale defaults below differ on
# purpose (tests must run in seconds, not GPU-days).
FULL_SCALE = {
    "train_diffusion_steps": 1000,
    "ddim_steps": 50,
    "cfg_scale": 5.0,
    "segment_frames": 81,
    "width": 832,
    "height": 480,
    "lr_ipi": 1e-7,
    "lr_other": 1e-5,
    "transform_probability": 0.98,
}

CFG_SCALE = 5.0
DDIM_STEPS = 50


# ---------------------------------------------------------------------------
# Noise schedule and diffusion math


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step corruption rates and their cumulative products.

    ``alpha_bar[t]`` is the product of (1 - beta_s) for s <= t, with
    ``alpha_bar[0] = 1`` so reverse steps may target t_prev = 0 directly.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ConfigError("every beta must lie strictly in (0, 1)")
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (betas.size + 1,) or ab[0] != 1.0:
            raise ConfigError("alpha_bar must have length T+1 with alpha_bar[0] = 1")
        if not np.all(np.diff(ab) < 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return int(self.betas.size)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  shape: str = "linear") -> NoiseSchedule:
    """Build a schedule; ``shape`` is "linear" or "cosine" (the cosine shape
    ignores the beta bounds and derives betas from the squared-cosine
    cumulative curve, clipped to 0.999)."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if shape == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )
        betas = np.linspace(beta_start, beta_end, T)
    elif shape == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule shape: {shape!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_diffuse(z0: np.ndarray, t: int, schedule: NoiseSchedule,
                    noise: np.ndarray) -> np.ndarray:
    """Closed-form marginal: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise."""
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape(z0, noise, "forward_diffuse")
    if not (1 <= t <= schedule.T):
        raise UsageError(f"t must be in [1, {schedule.T}], got {t}")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def diffusion_loss(pred_noise: np.ndarray, true_noise: np.ndarray) -> float:
    """Mean squared error between predicted and true noise."""
    pred = np.asarray(pred_noise, dtype=np.float64)
    true = np.asarray(true_noise, dtype=np.float64)
    _check_same_shape(pred, true, "diffusion_loss")
    diff = pred - true
    return float(np.mean(diff * diff))


def ddim_step(z_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse update from t to t_prev via the predicted-noise estimate.

    With eta = 0 the update is deterministic: reconstruct x0 from the noise
    prediction and re-noise it to level t_prev with the same prediction.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_same_shape(z_t, eps_pred, "ddim_step")
    if not (schedule.T >= t > t_prev >= 0):
        raise UsageError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t_prev]
    x0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    if eta == 0.0:
        return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred
    if noise is None:
        raise UsageError("eta > 0 requires an explicit noise sample")
    sigma = (
        eta
        * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
        * math.sqrt(1.0 - ab_t / ab_prev)
    )
    dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    return math.sqrt(ab_prev) * x0_hat + dir_coeff * eps_pred + sigma * np.asarray(noise)


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """Descending (t, t_prev) pairs covering T..0 in the given step count."""
    if not (1 <= steps <= T):
        raise UsageError(f"steps must be in [1, {T}], got {steps}")
    grid = np.unique(np.linspace(0, T, steps + 1).round().astype(int))[::-1]
    return [(int(grid[i]), int(grid[i + 1])) for i in range(len(grid) - 1)]


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                scale: float = CFG_SCALE) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    _check_same_shape(eps_cond, eps_uncond, "cfg_combine")
    return eps_uncond + scale * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# Tasks and configuration


class Task(enum.Enum):
    ANIMATION = "animation"
    TI2V = "ti2v"


@dataclass(frozen=True)
class TaskSamplerConfig:
    p_ti2v: float = 0.1
    cond_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("p_ti2v", "cond_dropout"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {value}")


def sample_task(rng: np.random.Generator, cfg: TaskSamplerConfig) -> Task:
    return Task.TI2V if rng.random() < cfg.p_ti2v else Task.ANIMATION


@dataclass(frozen=True)
class TrainSimConfig:
    """Desk-scale simulator dimensions, schedule and learning rates."""

    latent_channels: int = 4
    latent_size: int = 8
    hidden: int = 128
    lora_rank: int = 4
    text_dim: int = 32
    clip_tokens: int = 6
    clip_seed: int = 0
    pose_grid: int = 8
    feature_canvas: int = 64
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_shape: str = "linear"
    lr_ipi: float = FULL_SCALE["lr_ipi"]
    lr_other: float = FULL_SCALE["lr_other"]
    cfg_scale: float = CFG_SCALE
    uncond_drop: str = "text"
    ipi: IpiConfig = field(default_factory=lambda: IpiConfig(n_learnable_queries=8))
    sampler: TaskSamplerConfig = field(default_factory=TaskSamplerConfig)
    epi: EpiConfig = field(default_factory=EpiConfig)

    def __post_init__(self):
        if self.uncond_drop not in ("text", "all"):
            raise ConfigError(f"uncond_drop must be 'text' or 'all', got {self.uncond_drop!r}")
        if self.merge_dim != self.ipi.n_learnable_queries * self.ipi.d_model:
            raise ConfigError(
                f"flattened extractor output ({self.ipi.n_learnable_queries} x "
                f"{self.ipi.d_model}) must match the merge width {self.merge_dim}"
            )

    @property
    def latent_dim(self) -> int:
        return self.latent_channels * self.latent_size * self.latent_size

    @property
    def merge_dim(self) -> int:
        return 2 * self.latent_dim

    @property
    def in_dim(self) -> int:
        return self.merge_dim + self.text_dim + 1

    @property
    def pose_feat_dim(self) -> int:
        return self.pose_grid * self.pose_grid


# ---------------------------------------------------------------------------
# Parameter partition


@dataclass
class ParamPartition:
    """Four disjoint parameter sets; ``base`` is never updated."""

    base: dict[str, np.ndarray]
    lora: dict[str, np.ndarray]
    ipi: IpiParams
    epi: dict[str, np.ndarray]

    def copy(self) -> "ParamPartition":
        return ParamPartition(
            base={k: v.copy() for k, v in self.base.items()},
            lora={k: v.copy() for k, v in self.lora.items()},
            ipi=self.ipi.copy(),
            epi={k: v.copy() for k, v in self.epi.items()},
        )

    def named_blocks(self) -> dict[str, np.ndarray]:
        blocks: dict[str, np.ndarray] = {}
        for prefix, group in (("base", self.base), ("lora", self.lora), ("epi", self.epi)):
            for name, arr in group.items():
                blocks[f"{prefix}.{name}"] = arr
        for name, arr in self.ipi.blocks.items():
            blocks[f"ipi.{name}"] = arr
        return blocks


def init_partition(cfg: TrainSimConfig, rng: np.random.Generator) -> ParamPartition:
    """Seeded init; adapter up-projections start at zero so the effective
    weights equal the frozen trunk at step zero."""
    def linear(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))

    base = {
        "w1": linear(cfg.in_dim, cfg.hidden),
        "b1": np.zeros(cfg.hidden),
        "w2": linear(cfg.hidden, cfg.latent_dim),
        "b2": np.zeros(cfg.latent_dim),
    }
    r = cfg.lora_rank
    lora = {
        "down1": rng.normal(0.0, 1.0 / math.sqrt(cfg.in_dim), (cfg.in_dim, r)),
        "up1": np.zeros((r, cfg.hidden)),
        "down2": rng.normal(0.0, 1.0 / math.sqrt(cfg.hidden), (cfg.hidden, r)),
        "up2": np.zeros((r, cfg.latent_dim)),
    }
    ipi = init_ipi_params(cfg.ipi, rng)
    epi = {
        "w": rng.normal(0.0, 1.0 / math.sqrt(cfg.pose_feat_dim), (cfg.pose_feat_dim, cfg.merge_dim)),
        "b": np.zeros(cfg.merge_dim),
    }
    return ParamPartition(base=base, lora=lora, ipi=ipi, epi=epi)


def partition_from_blocks(cfg: TrainSimConfig, blocks: Mapping[str, np.ndarray]) -> ParamPartition:
    base, lora, epi, ipi_blocks = {}, {}, {}, {}
    for name, arr in blocks.items():
        prefix, _, rest = name.partition(".")
        if prefix == "base":
            base[rest] = arr.copy()
        elif prefix == "lora":
            lora[rest] = arr.copy()
        elif prefix == "epi":
            epi[rest] = arr.copy()
        elif prefix == "ipi":
            ipi_blocks[rest] = arr.copy()
        else:
            raise ConfigError(f"unknown partition prefix in block {name!r}")
    return ParamPartition(base=base, lora=lora, ipi=IpiParams(cfg.ipi, ipi_blocks), epi=epi)


def partition_delta_norms(before: ParamPartition, after: ParamPartition) -> dict[str, float]:
    """L2 norm of the parameter change per partition."""
    out: dict[str, float] = {}
    for part in ("base", "lora", "epi"):
        a, b = getattr(before, part), getattr(after, part)
        out[part] = math.sqrt(sum(float(np.sum((b[k] - a[k]) ** 2)) for k in a))
    out["ipi"] = math.sqrt(
        sum(float(np.sum((after.ipi.blocks[k] - before.ipi.blocks[k]) ** 2))
            for k in before.ipi.blocks)
    )
    return out


# ---------------------------------------------------------------------------
# Conditions


@dataclass(frozen=True)
class EpiContext:
    """Anchor pool plus transform settings used to augment driving poses."""

    pool: AnchorPool
    cfg: EpiConfig


@dataclass
class ConditionBundle:
    """All conditioning pieces for one denoiser call."""

    task: Task
    f_ref: np.ndarray
    f_e: np.ndarray
    f_i: np.ndarray
    text_emb: np.ndarray
    f_merge: np.ndarray | None = None
    dropped: tuple[str, ...] = ()
    transform: TransformRecord | None = None

    def __post_init__(self):
        if self.task is Task.TI2V:
            if np.any(self.f_e != 0.0) or np.any(self.f_i != 0.0):
                raise ConfigError("TI2V bundles must carry exactly-zero pose conditions")


def _scale_frame(frame: PoseFrame, sx: float, sy: float) -> PoseFrame:
    def scaled(block):
        if block is None:
            return None
        out = block.copy()
        out[:, 0] *= sx
        out[:, 1] *= sy
        return out

    return PoseFrame(
        body=scaled(frame.body),
        left_hand=scaled(frame.left_hand),
        right_hand=scaled(frame.right_hand),
        face=scaled(frame.face),
    )


def render_feature_grid(seq: PoseSequence, grid: int = 8, canvas: int = 64) -> np.ndarray:
    """Rendered-pose features: frames rasterized onto a small canvas, mean
    luminance per grid cell, averaged over frames. Values in [0, 1]."""
    spec = CanvasSpec(canvas, canvas, line_thickness=2, joint_radius=2)
    sx, sy = canvas / seq.width, canvas / seq.height
    cell = canvas // grid
    acc = np.zeros((grid, grid))
    for frame in seq.frames:
        img = render_frame(_scale_frame(frame, sx, sy), spec)
        lum = np.frombuffer(img.pixels, dtype=np.uint8).reshape(canvas, canvas, 3)
        lum = lum.mean(axis=2) / 255.0
        acc += lum[: grid * cell, : grid * cell].reshape(grid, cell, grid, cell).mean(axis=(1, 3))
    return (acc / len(seq.frames)).reshape(-1)


def fuse_conditions(bundle: ConditionBundle, noised_latent: np.ndarray,
                    cfg: TrainSimConfig) -> np.ndarray:
    """Channel-concatenate the reference latent with the noised latent, then
    add the explicit feature and the alpha-weighted implicit feature."""
    noised = np.asarray(noised_latent, dtype=np.float64)
    _check_same_shape(noised, bundle.f_ref, "fuse_conditions")
    stacked = np.concatenate([bundle.f_ref, noised])
    return residual_inject(stacked + bundle.f_e, bundle.f_i.reshape(-1), cfg.ipi.alpha)


def _build_condition_cached(
    task: Task,
    ref_latent: np.ndarray,
    pose_seq: PoseSequence | None,
    text_emb: np.ndarray,
    cfg: TrainSimConfig,
    rng: np.random.Generator,
    epi_ctx: EpiContext | None,
    theta_ipi: IpiParams,
    theta_epi: Mapping[str, np.ndarray],
    noised_latent: np.ndarray | None,
):
    ref_latent = np.asarray(ref_latent, dtype=np.float64)
    text = np.asarray(text_emb, dtype=np.float64)
    record = None
    ipi_cache = None
    pose_feats = None

    if task is Task.ANIMATION:
        if pose_seq is None:
            raise UsageError("the animation task needs a pose sequence")
        if epi_ctx is None:
            raise UsageError("the animation task needs an anchor pool")
        transformed, record = epi_transform(pose_seq, epi_ctx.pool, epi_ctx.cfg, rng)
        pose_feats = render_feature_grid(transformed, cfg.pose_grid, cfg.feature_canvas)
        f_e = pose_feats @ theta_epi["w"] + theta_epi["b"]
        clip = synthetic_clip_features(pose_seq, cfg.clip_tokens, cfg.ipi.d_model, cfg.clip_seed)
        f_i, ipi_cache = ipi_forward_cached(clip, pose_seq, theta_ipi, cfg.ipi)
    else:
        f_e = np.zeros(cfg.merge_dim)
        f_i = np.zeros((cfg.ipi.n_learnable_queries, cfg.ipi.d_model))

    # Three dropout draws are always consumed, in a fixed order, so the
    # stream stays aligned across tasks.
    draws = {name: rng.random() for name in ("f_e", "f_i", "text")}
    dropped = []
    p = cfg.sampler.cond_dropout
    if task is Task.ANIMATION and draws["f_e"] < p:
        f_e = np.zeros_like(f_e)
        dropped.append("f_e")
    if task is Task.ANIMATION and draws["f_i"] < p:
        f_i = np.zeros_like(f_i)
        dropped.append("f_i")
    if draws["text"] < p:
        text = np.zeros_like(text)
        dropped.append("text")

    bundle = ConditionBundle(
        task=task,
        f_ref=ref_latent,
        f_e=f_e,
        f_i=f_i,
        text_emb=text,
        dropped=tuple(dropped),
        transform=record,
    )
    if noised_latent is not None:
        bundle.f_merge = fuse_conditions(bundle, noised_latent, cfg)
    cache = {
        "pose_feats": pose_feats,
        "ipi_cache": ipi_cache,
        "fe_active": task is Task.ANIMATION and "f_e" not in bundle.dropped,
        "fi_active": task is Task.ANIMATION and "f_i" not in bundle.dropped,
    }
    return bundle, cache


def build_condition(
    task: Task,
    ref_latent: np.ndarray,
    pose_seq: PoseSequence | None,
    text_emb: np.ndarray,
    cfg: TrainSimConfig,
    rng: np.random.Generator,
    epi_ctx: EpiContext | None,
    theta_ipi: IpiParams,
    theta_epi: Mapping[str, np.ndarray],
    noised_latent: np.ndarray | None = None,
) -> ConditionBundle:
    """Assemble the conditioning bundle for one step.

    Animation: the explicit feature comes from the pose-encoder stub over the
    augmented pose, the implicit feature from the extractor over the original
    driving pose. TI2V: both pose conditions are exactly zero. Each droppable
    condition is independently zeroed with probability cond_dropout. When the
    noised latent is passed the fused feature is filled in, otherwise callers
    fuse later via ``fuse_conditions``.
    """
    bundle, _ = _build_condition_cached(
        task, ref_latent, pose_seq, text_emb, cfg, rng, epi_ctx,
        theta_ipi, theta_epi, noised_latent,
    )
    return bundle


# ---------------------------------------------------------------------------
# Denoiser


def _effective_weights(partition: ParamPartition):
    w1 = partition.base["w1"] + partition.lora["down1"] @ partition.lora["up1"]
    w2 = partition.base["w2"] + partition.lora["down2"] @ partition.lora["up2"]
    return w1, w2


def predict_noise(partition: ParamPartition, cfg: TrainSimConfig,
                  f_merge: np.ndarray, text_emb: np.ndarray, t: int) -> np.ndarray:
    """Denoiser forward pass: eps = W2e tanh(W1e [f_merge; text; t/T] + b1) + b2."""
    x = np.concatenate([f_merge, text_emb, [t / cfg.T]])
    w1, w2 = _effective_weights(partition)
    h = np.tanh(x @ w1 + partition.base["b1"])
    return h @ w2 + partition.base["b2"]


def cfg_predict(partition: ParamPartition, cfg: TrainSimConfig,
                bundle: ConditionBundle, noised_latent: np.ndarray, t: int,
                scale: float | None = None) -> np.ndarray:
    """Guided prediction: the unconditional branch zeroes the text embedding
    ("text" mode) or all conditions ("all" mode) per config."""
    scale = cfg.cfg_scale if scale is None else scale
    f_merge = fuse_conditions(bundle, noised_latent, cfg)
    eps_cond = predict_noise(partition, cfg, f_merge, bundle.text_emb, t)
    zero_text = np.zeros_like(bundle.text_emb)
    if cfg.uncond_drop == "text":
        eps_uncond = predict_noise(partition, cfg, f_merge, zero_text, t)
    else:
        stripped = ConditionBundle(
            task=bundle.task,
            f_ref=bundle.f_ref,
            f_e=np.zeros_like(bundle.f_e),
            f_i=np.zeros_like(bundle.f_i),
            text_emb=zero_text,
        )
        merge_uncond = fuse_conditions(stripped, noised_latent, cfg)
        eps_uncond = predict_noise(partition, cfg, merge_uncond, zero_text, t)
    return cfg_combine(eps_cond, eps_uncond, scale)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class Batch:
    """One training sample: clean latent, reference latent, text embedding,
    and (for the animation task) a driving pose sequence.

    ``t`` and ``noise`` pin the corruption level and target noise; when left
    None each step draws fresh ones from its own stream. Pinning them turns
    the batch into a fixed regression target for overfit experiments.
    """

    z0: np.ndarray
    ref_latent: np.ndarray
    text_emb: np.ndarray
    pose: PoseSequence | None = None
    t: int | None = None
    noise: np.ndarray | None = None


@dataclass
class SimState:
    cfg: TrainSimConfig
    schedule: NoiseSchedule
    partition: ParamPartition
    epi_ctx: EpiContext
    seed: int
    step: int = 0
    last_loss: float | None = None


def make_sim_state(cfg: TrainSimConfig, rng: np.random.Generator,
                   epi_ctx: EpiContext | None = None, seed: int | None = None) -> SimState:
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule_shape)
    partition = init_partition(cfg, rng)
    if epi_ctx is None:
        pool = AnchorPool((stick_figure(32, 18, torso=12.0), stick_figure(32, 14, torso=18.0)))
        epi_ctx = EpiContext(pool=pool, cfg=cfg.epi)
    return SimState(
        cfg=cfg,
        schedule=schedule,
        partition=partition,
        epi_ctx=epi_ctx,
        seed=cfg.sampler.seed if seed is None else seed,
    )


def train_step(state: SimState, batch: Batch, task: Task) -> SimState:
    """One gradient-descent step; returns a new state (the input state is
    never mutated, so a raised error leaves training unchanged).

    The animation task updates lora, ipi and epi; the TI2V task updates lora
    only. The frozen trunk is never touched by either task.
    """
    cfg = state.cfg
    rng = derive_rng(state.seed, state.step)
    # Draws are always consumed so the stream layout does not depend on
    # whether the batch pins its target.
    drawn_t = int(rng.integers(1, cfg.T + 1))
    drawn_noise = rng.normal(0.0, 1.0, cfg.latent_dim)
    t = drawn_t if batch.t is None else int(batch.t)
    noise = drawn_noise if batch.noise is None else np.asarray(batch.noise, dtype=np.float64)
    z_t = forward_diffuse(np.asarray(batch.z0, dtype=np.float64), t, state.schedule, noise)

    bundle, cond_cache = _build_condition_cached(
        task, batch.ref_latent, batch.pose, batch.text_emb, cfg, rng,
        state.epi_ctx, state.partition.ipi, state.partition.epi, z_t,
    )
    p = state.partition
    x = np.concatenate([bundle.f_merge, bundle.text_emb, [t / cfg.T]])
    w1, w2 = _effective_weights(p)
    h = np.tanh(x @ w1 + p.base["b1"])
    eps_pred = h @ w2 + p.base["b2"]
    loss = diffusion_loss(eps_pred, noise)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}")

    # Backward through the denoiser.
    d_eps = 2.0 * (eps_pred - noise) / cfg.latent_dim
    d_w2e = np.outer(h, d_eps)
    d_h = w2 @ d_eps
    d_pre = d_h * (1.0 - h * h)
    d_w1e = np.outer(x, d_pre)
    d_x = w1 @ d_pre

    grads_lora = {
        "down1": d_w1e @ p.lora["up1"].T,
        "up1": p.lora["down1"].T @ d_w1e,
        "down2": d_w2e @ p.lora["up2"].T,
        "up2": p.lora["down2"].T @ d_w2e,
    }

    d_merge = d_x[: cfg.merge_dim]
    grads_epi = {"w": np.zeros_like(p.epi["w"]), "b": np.zeros_like(p.epi["b"])}
    grads_ipi = zero_grads(cfg.ipi)
    if cond_cache["fe_active"]:
        grads_epi["w"] = np.outer(cond_cache["pose_feats"], d_merge)
        grads_epi["b"] = d_merge.copy()
    if cond_cache["fi_active"]:
        d_fi = (cfg.ipi.alpha * d_merge).reshape(bundle.f_i.shape)
        grads_ipi = ipi_backward(d_fi, cond_cache["ipi_cache"], p.ipi, cfg.ipi)

    new = p.copy()
    for name, g in grads_lora.items():
        new.lora[name] -= cfg.lr_other * g
    if task is Task.ANIMATION:
        for name, g in grads_epi.items():
            new.epi[name] -= cfg.lr_other * g
        for name, g in grads_ipi.items():
            new.ipi.blocks[name] -= cfg.lr_ipi * g

    return replace(state, partition=new, step=state.step + 1, last_loss=loss)


# ---------------------------------------------------------------------------
# Simulation runs


@dataclass(frozen=True)
class SimReport:
    n_steps: int
    seed: int
    task_counts: Mapping[str, int]
    delta_norms: Mapping[str, float]
    loss_trajectory: tuple[float, ...]

    def to_json_dict(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "seed": self.seed,
            "task_counts": dict(self.task_counts),
            "delta_norms": dict(self.delta_norms),
            "loss_trajectory": list(self.loss_trajectory),
        }


def _synthetic_pose(rng: np.random.Generator, n_frames: int = 6,
                    width: int = 64, height: int = 64) -> PoseSequence:
    frames = []
    cx = float(rng.uniform(24, 40))
    cy = float(rng.uniform(12, 20))
    torso = float(rng.uniform(10, 16))
    for _ in range(n_frames):
        base = stick_figure(cx, cy, torso=torso)
        body = base.body.copy()
        body[:, 0] += rng.normal(0.0, 0.8, 18)
        body[:, 1] += rng.normal(0.0, 0.8, 18)
        frames.append(PoseFrame(body=body))
    return PoseSequence(tuple(frames), width, height, fps=8.0)


def make_synthetic_batch(cfg: TrainSimConfig, rng: np.random.Generator,
                         with_pose: bool) -> Batch:
    return Batch(
        z0=rng.normal(0.0, 1.0, cfg.latent_dim),
        ref_latent=rng.normal(0.0, 1.0, cfg.latent_dim),
        text_emb=rng.normal(0.0, 1.0, cfg.text_dim),
        pose=_synthetic_pose(rng) if with_pose else None,
    )


def run_sim(cfg: TrainSimConfig, n_steps: int, rng: np.random.Generator,
            initial_partition: ParamPartition | None = None,
            capture_state: bool = False):
    """Run the two-task schedule over synthetic data and report task counts,
    per-partition parameter movement and the loss trajectory.

    ``initial_partition`` resumes from a checkpointed partition;
    ``capture_state`` additionally returns the final state for saving.
    """
    if n_steps < 0:
        raise UsageError("n_steps must be >= 0")
    state = make_sim_state(cfg, rng)
    if initial_partition is not None:
        state.partition = initial_partition.copy()
    initial = state.partition.copy()
    anim_batches = [make_synthetic_batch(cfg, rng, with_pose=True) for _ in range(4)]
    ti2v_batches = [make_synthetic_batch(cfg, rng, with_pose=False) for _ in range(4)]
    counts = {Task.ANIMATION.value: 0, Task.TI2V.value: 0}
    losses: list[float] = []
    for _ in range(n_steps):
        task = sample_task(rng, cfg.sampler)
        counts[task.value] += 1
        pool = anim_batches if task is Task.ANIMATION else ti2v_batches
        batch = pool[int(rng.integers(len(pool)))]
        state = train_step(state, batch, task)
        losses.append(state.last_loss)
    report = SimReport(
        n_steps=n_steps,
        seed=state.seed,
        task_counts=counts,
        delta_norms=partition_delta_norms(initial, state.partition),
        loss_trajectory=tuple(losses),
    )
    return (report, state) if capture_state else report
