"""Joint training of the velocity model, label embedding and occupancy head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.optim import AdamWState, adamw_step
from .autodiff.tensor import Tape, Tensor, no_tape
from .config import RunConfig
from .errors import ContractError, DimensionError, NonFiniteError
from .flow import VelocityModel, euler_integrate, flow_loss, otp_interpolate
from .head import OccHead, occ_head
from .masking import MaskSchedule, apply_mask
from .nn import Module
from .scene import Scene
from .tpv import LabelEmbedding, encode_labels

log = logging.getLogger(__name__)

HEAD_MODES = ("masked_input", "one_step", "full_integration")


@dataclass
class FlowConfig:
    n_euler_steps: int = 4
    t_sampling: str = "uniform"
    flow_weight: float = 1.0
    ce_weight: float = 1.0
    head_on: str = "one_step"

    def __post_init__(self):
        if self.n_euler_steps < 1:
            raise ContractError("n_euler_steps must be >= 1")
        if self.flow_weight < 0 or self.ce_weight < 0:
            raise ContractError("loss weights must be >= 0")
        if self.head_on not in HEAD_MODES:
            raise ContractError(f"head_on must be one of {HEAD_MODES}")
        if self.t_sampling != "uniform":
            raise ContractError(f"unsupported t_sampling {self.t_sampling!r}")


@dataclass
class TrainState:
    E: int
    steps_per_epoch: int
    seed: int = 0
    step: int = 0
    optimizer: AdamWState = field(default_factory=AdamWState)
    history: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return self.E * self.steps_per_epoch

    @property
    def epoch(self) -> int:
        return min(self.step // self.steps_per_epoch, self.E)

    def schedule_epoch(self, step: int | None = None) -> float:
        """Continuous epoch counter fed to the mask ramp: 0 at the first step, E at the last."""
        step = self.step if step is None else step
        if self.total_steps <= 1:
            return float(self.E)
        return self.E * min(step, self.total_steps - 1) / (self.total_steps - 1)


class FmoccModel(Module):
    """Velocity model + label embedding + head. ``velocity`` is None for the no-FMSSM baseline."""

    def __init__(self, channels: int, num_classes: int, use_fmssm: bool = True,
                 state_size: int = 8, depth: int = 2, share_planes: bool = False,
                 head_hidden: int = 32, emb_scale: float = 1.0, emb_trainable: bool = True,
                 chunk: int = 32, seed: int = 0):
        ss = np.random.SeedSequence(seed).spawn(3)
        seeds = [int(s.generate_state(1)[0]) for s in ss]
        self.head = OccHead(channels, num_classes, head_hidden, seeds[0])
        self.velocity = (
            VelocityModel(channels, state_size, depth, seeds[1], share_planes, chunk=chunk)
            if use_fmssm else None
        )
        self.emb = (
            LabelEmbedding(num_classes, channels, seeds[2], emb_scale, emb_trainable)
            if use_fmssm else None
        )

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "FmoccModel":
        m = cfg.model
        return cls(cfg.scene.channels, cfg.scene.num_classes, m.use_fmssm, m.state_size,
                   m.depth, m.share_planes, m.head_hidden, m.emb_scale, m.emb_trainable,
                   m.scan_chunk, cfg.seed)

    @property
    def use_fmssm(self) -> bool:
        return self.velocity is not None

    @property
    def channels(self) -> int:
        return self.head.channels


def flow_config(cfg: RunConfig) -> FlowConfig:
    f = cfg.flow
    return FlowConfig(f.n_euler_steps, f.t_sampling, f.flow_weight, f.ce_weight, f.head_on)


def adamw_state(cfg: RunConfig) -> AdamWState:
    o = cfg.optim
    return AdamWState(lr=o.lr, weight_decay=o.weight_decay, beta1=o.beta1, beta2=o.beta2,
                      eps=o.eps)


class TrainingError(RuntimeError):
    def __init__(self, msg: str, scene_seed: int | None = None):
        super().__init__(msg)
        self.scene_seed = scene_seed


def _losses(model: FmoccModel, V0: np.ndarray, Y: np.ndarray, t: np.ndarray,
            cfg: FlowConfig) -> tuple[Tensor | None, Tensor]:
    """Flow and cross-entropy losses on a batch ``V0[B, X, Y, Z, C]``, ``Y[B, X, Y, Z]``."""
    if not model.use_fmssm:
        return None, ops.cross_entropy(occ_head(V0, model.head), Y)

    n = V0.shape[0]
    V1 = encode_labels(Y, model.emb)
    V_t = otp_interpolate(V0, V1, t)
    if cfg.head_on == "one_step":
        v = model.velocity(ops.concat([V_t, Tensor(V0)], axis=0), np.concatenate([t, np.zeros(n)]))
        v_t = v[:n]
        V_head = ops.add(V0, v[n:])
    else:
        v_t = model.velocity(V_t, t)
        if cfg.head_on == "masked_input":
            V_head = Tensor(V0)
        else:
            V_head = euler_integrate(Tensor(V0), model.velocity, cfg.n_euler_steps)
    fl = flow_loss(v_t, V0, V1)
    ce = ops.cross_entropy(occ_head(V_head, model.head), Y)
    return fl, ce


def train_step(batch: Sequence[tuple[int, Scene]], model: FmoccModel, state: TrainState,
               cfg: FlowConfig, mask: MaskSchedule | None = None) -> tuple[float, float, float]:
    """One optimizer update on ``batch`` of ``(scene_seed, scene)``.

    Returns ``(flow_loss, ce_loss, p_drop)``; flow_loss is 0 for the baseline.
    """
    if not batch:
        raise ContractError("train_step needs a non-empty batch")
    p_drop = mask(state.schedule_epoch()) if mask is not None else 0.0
    seeds = [s for s, _ in batch]
    V0 = np.stack([
        apply_mask(sc.features, p_drop, [state.seed, state.step, s]) for s, sc in batch
    ])
    Y = np.stack([sc.labels for _, sc in batch])
    t = np.random.default_rng([state.seed, state.step, 0x7]).uniform(size=len(batch))

    params = model.named_parameters()
    model.zero_grad()
    try:
        with Tape() as tape:
            fl, ce = _losses(model, V0, Y, t, cfg)
            terms = []
            if fl is not None and cfg.flow_weight > 0:
                terms.append(ops.mul(fl, cfg.flow_weight))
            if cfg.ce_weight > 0:
                terms.append(ops.mul(ce, cfg.ce_weight))
            if terms:
                total = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
                tape.backward(total)
    except NonFiniteError as exc:
        bad = _find_bad_scene(model, V0, Y, t, cfg, seeds)
        raise TrainingError(f"non-finite loss at step {state.step} ({exc})", bad) from exc

    adamw_step(params, {k: p.grad for k, p in params.items()}, state.optimizer)
    fl_val = 0.0 if fl is None else fl.item()
    ce_val = ce.item()
    state.history.append((state.step, state.epoch, fl_val, ce_val, p_drop))
    state.step += 1
    return fl_val, ce_val, p_drop


def _find_bad_scene(model, V0, Y, t, cfg, seeds) -> int | None:
    for i, s in enumerate(seeds):
        try:
            with no_tape():
                _losses(model, V0[i: i + 1], Y[i: i + 1], t[i: i + 1], cfg)
        except NonFiniteError:
            return s
    return None


def refine(features: np.ndarray, model: FmoccModel, n_steps: int) -> np.ndarray:
    """Euler-integrated features (or the input itself for the baseline)."""
    if not model.use_fmssm:
        return np.asarray(features)
    with no_tape():
        out = euler_integrate(Tensor(features), model.velocity, n_steps)
    return out.data


def infer(features: np.ndarray, model: FmoccModel, n_steps: int = 4) -> np.ndarray:
    """Predicted labels for features ``[..., X, Y, Z, C]``."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != model.channels:
        raise DimensionError(
            f"features have {features.shape[-1]} channels; model was built for {model.channels}"
        )
    V = refine(features, model, n_steps)
    with no_tape():
        logits = occ_head(V, model.head)
    return logits.data.argmax(axis=-1)


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def epoch_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 0xE]).permutation(n_items)
    return [order[i: i + batch_size] for i in range(0, n_items, batch_size)]


def fit(model: FmoccModel, scenes: Sequence[tuple[int, Scene]], cfg: RunConfig,
        state: TrainState | None = None,
        on_step: Callable[[TrainState, tuple[float, float, float]], None] | None = None,
        on_epoch_end: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run (or resume) the epoch loop; one epoch is one pass over ``scenes``."""
    bs = cfg.train.batch_size
    steps_per_epoch = -(-len(scenes) // bs)
    if state is None:
        state = TrainState(E=cfg.train.epochs, steps_per_epoch=steps_per_epoch, seed=cfg.seed,
                           optimizer=adamw_state(cfg))
    fcfg = flow_config(cfg)
    mask = cfg.mask_schedule()
    while state.step < state.total_steps:
        epoch = state.step // steps_per_epoch
        batches = epoch_batches(len(scenes), bs, cfg.seed, epoch)
        for b in batches[state.step % steps_per_epoch:]:
            state.optimizer.lr = lr_at(state.step, cfg.optim.lr, cfg.optim.warmup_steps)
            losses = train_step([scenes[i] for i in b], model, state, fcfg, mask)
            if on_step is not None:
                on_step(state, losses)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state
