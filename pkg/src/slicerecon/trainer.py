"""Training on healthy window pairs, checkpointing and volume reconstruction."""

from __future__ import annotations

import copy
import json
import logging
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, Volume, load_preprocessed
from .errors import ConfigError, DivergenceError, RegimeViolationError, ShapeError
from .losses import LossConfig, critic_loss_terms, generator_loss_terms, is_finite, l1_loss
from .nets import (
    Checkpoint,
    CriticConfig,
    Generator,
    GeneratorConfig,
    build_critic,
    build_generator,
    generator_forward,
)
from .windowing import WindowPair, make_window_pairs, pairs_to_arrays

log = logging.getLogger(__name__)

PROFILES = ("paper", "desk")

# (steps, batch_size, base_filters) per profile; full-scale values differ by objective
_PAPER_DICE = (600_000, 64, 64)
_PAPER_GAN = (300_000, 32, 64)
_DESK = (1_200, 8, 8)


DEVICE_ENV = "SLICERECON_DEVICE"


class ReconstructionWarning(UserWarning):
    pass


def default_device() -> torch.device:
    """Compute device from ``$SLICERECON_DEVICE`` (e.g. ``cuda:0``); CPU otherwise."""
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        return torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"{DEVICE_ENV}={name!r} is not a valid device") from exc


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    profile: str = "desk"
    steps: int | None = None
    batch_size: int | None = None
    base_filters: int | None = None
    critic_filters: int | None = None
    conditional_critic: bool = True
    learning_rate: float = 2.0e-4
    adam_beta1: float | None = None
    adam_beta2: float | None = None
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def resolved(self) -> "TrainConfig":
        """Fill profile- and objective-dependent defaults."""
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        self.loss.validate()
        if self.profile == "paper":
            steps, batch, filters = _PAPER_GAN if self.loss.adversarial else _PAPER_DICE
        else:
            steps, batch, filters = _DESK
        b1, b2 = (0.5, 0.9) if self.loss.adversarial else (0.9, 0.999)
        cfg = replace(
            self,
            steps=self.steps if self.steps is not None else steps,
            batch_size=self.batch_size if self.batch_size is not None else batch,
            base_filters=self.base_filters if self.base_filters is not None else filters,
            critic_filters=self.critic_filters if self.critic_filters is not None else (
                self.base_filters if self.base_filters is not None else filters
            ),
            adam_beta1=self.adam_beta1 if self.adam_beta1 is not None else b1,
            adam_beta2=self.adam_beta2 if self.adam_beta2 is not None else b2,
        )
        if cfg.steps < 1 or cfg.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if cfg.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if cfg.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingLog:
    """Append-only JSON-lines record of per-step loss terms."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None
        self._t0 = time.perf_counter()

    def write(self, step: int, terms: dict):
        rec = {"step": step, **{k: float(v) for k, v in terms.items()}}
        rec["wall_time"] = round(time.perf_counter() - self._t0, 4)
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def check_healthy(volumes_or_entries: Iterable) -> None:
    """Refuse anything but CDR 0 in the training set."""
    bad = [getattr(v, "scan_id", "?") for v in volumes_or_entries if float(v.cdr) != 0.0]
    if bad:
        raise RegimeViolationError(f"training set contains non-healthy scans: {bad[:5]}")


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    """Endless index batches from successive seeded permutations (epochs)."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _cpu_state(module):
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


def _snapshot(step, cfg, g, c, og, oc, gcfg, ccfg) -> Checkpoint:
    return Checkpoint(
        generator_config=gcfg,
        generator_state=_cpu_state(g),
        critic_config=ccfg,
        critic_state=None if c is None else _cpu_state(c),
        generator_optimizer=copy.deepcopy(og.state_dict()),
        critic_optimizer=None if oc is None else copy.deepcopy(oc.state_dict()),
        step=step,
        seed=cfg.seed,
        train_config=cfg.to_dict(),
    )


def train_on_arrays(
    cfg: TrainConfig,
    inputs: np.ndarray,
    targets: np.ndarray,
    out_dir=None,
    log_path=None,
    device=None,
) -> tuple[Checkpoint, TrainingLog]:
    """Core loop over pre-built ``(N, 3, H, W)`` input/target arrays in [0, 1].

    Adversarial objectives run ``critic_steps`` critic updates, each on a fresh
    batch, before every generator update.
    """
    cfg = cfg.resolved()
    if inputs.shape != targets.shape or inputs.ndim != 4:
        raise ShapeError(f"inputs/targets must be matching (N, 3, H, W), got {inputs.shape} / {targets.shape}")
    n, ch, h, w = inputs.shape
    if n == 0:
        raise ShapeError("no training windows")
    device = torch.device(device) if device is not None else default_device()
    x_all = torch.from_numpy(np.ascontiguousarray(inputs, dtype=np.float32)).to(device)
    y_all = torch.from_numpy(np.ascontiguousarray(targets, dtype=np.float32)).to(device)

    gcfg = GeneratorConfig(in_channels=ch, out_channels=ch, base_filters=cfg.base_filters, image_size=(h, w))
    g = build_generator(gcfg, seed=cfg.seed).to(device)
    og = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
    c = oc = ccfg = None
    if cfg.loss.adversarial:
        ccfg = CriticConfig(conditional=cfg.conditional_critic, stack_channels=ch, base_filters=cfg.critic_filters)
        c = build_critic(ccfg, seed=cfg.seed + 1).to(device)
        oc = torch.optim.Adam(c.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))

    batches = _batch_stream(n, cfg.batch_size, np.random.default_rng(cfg.seed))
    gp_rng = torch.Generator(device=device).manual_seed(cfg.seed + 2)

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    tlog = TrainingLog(log_path)
    last_good = _snapshot(0, cfg, g, c, og, oc, gcfg, ccfg)
    g.train()
    if c is not None:
        c.train()
    try:
        for step in range(1, cfg.steps + 1):
            terms = {}
            if c is not None:
                for _ in range(cfg.loss.critic_steps):
                    idx = torch.from_numpy(next(batches)).to(device)
                    xb, yb = x_all[idx], y_all[idx]
                    with torch.no_grad():
                        fake = g(xb)
                    ct = critic_loss_terms(c, xb, yb, fake, cfg.loss.gp_lambda, gp_rng)
                    if not is_finite(ct["loss"]):
                        raise DivergenceError(f"non-finite critic loss at step {step}", last_good)
                    oc.zero_grad(set_to_none=True)
                    ct["loss"].backward()
                    oc.step()
                terms.update({f"critic_{k}": v.detach() for k, v in ct.items()})
            idx = torch.from_numpy(next(batches)).to(device)
            xb, yb = x_all[idx], y_all[idx]
            fake = g(xb)
            gt = generator_loss_terms(c, xb, fake, yb, cfg.loss)
            if not is_finite(gt["loss"]):
                raise DivergenceError(f"non-finite generator loss at step {step}", last_good)
            og.zero_grad(set_to_none=True)
            gt["loss"].backward()
            og.step()
            terms.update({f"gen_{k}": v.detach() for k, v in gt.items()})
            tlog.write(step, terms)

            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_good = _snapshot(step, cfg, g, c, og, oc, gcfg, ccfg)
                if out_dir is not None:
                    last_good.save(out_dir / "checkpoints" / f"step_{step:07d}.pt")
    except DivergenceError as exc:
        if out_dir is not None:
            exc.last_good_checkpoint.save(out_dir / "checkpoints" / "last_good.pt")
        raise
    finally:
        tlog.close()

    g.eval()
    final = _snapshot(cfg.steps, cfg, g, c, og, oc, gcfg, ccfg)
    if out_dir is not None:
        final.save(out_dir / "checkpoints" / "final.pt")
    return final, tlog


def window_arrays(volumes: Sequence[Volume]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [p for v in volumes for p in make_window_pairs(v)]
    return pairs_to_arrays(pairs)


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir=None,
    target_width: int | None = None,
    slice_fraction: float = 0.4,
    access_log: list | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Train on the manifest's training split; every entry must be CDR 0.

    The regime check runs on manifest labels before any pixel is read, and
    again on the loaded volumes. ``access_log`` (if given) collects the scan ids
    actually read.
    """
    entries = manifest.split("train")
    if not entries:
        raise ConfigError("manifest has no training scans")
    check_healthy(entries)
    volumes = []
    for e in entries:
        v = load_preprocessed(manifest, e, target_width=target_width, slice_fraction=slice_fraction)
        if access_log is not None:
            access_log.append((v.scan_id, v.cdr))
        volumes.append(v)
    check_healthy(volumes)
    inputs, targets = window_arrays(volumes)
    log.info("training on %d windows from %d scans", len(inputs), len(volumes))
    log_path = None if out_dir is None else Path(out_dir) / "train_log.jsonl"
    return train_on_arrays(cfg, inputs, targets, out_dir=out_dir, log_path=log_path)


@torch.no_grad()
def predict(g: Generator, inputs: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Evaluation-mode predictions for ``(N, 3, H, W)`` inputs, as float32."""
    was_training = g.training
    g.eval()
    device = next(g.parameters()).device
    try:
        outs = []
        for i in range(0, len(inputs), chunk):
            x = torch.from_numpy(np.ascontiguousarray(inputs[i : i + chunk], dtype=np.float32)).to(device)
            outs.append(generator_forward(g, x).cpu().numpy())
        return np.concatenate(outs) if outs else np.empty((0,) + inputs.shape[1:], dtype=np.float32)
    finally:
        g.train(was_training)


def reconstruct_volume(model: Checkpoint | Generator, v: Volume) -> list[tuple[WindowPair, np.ndarray]]:
    """Predict every window's next stack; scans under 6 slices yield ``[]`` and a warning."""
    g = model.generator().to(default_device()) if isinstance(model, Checkpoint) else model
    pairs = make_window_pairs(v)
    if not pairs:
        warnings.warn(
            f"scan {v.scan_id} has {v.n_slices} slices; at least 6 are needed to reconstruct",
            ReconstructionWarning,
            stacklevel=2,
        )
        return []
    inputs, _ = pairs_to_arrays(pairs)
    preds = predict(g, inputs)
    return list(zip(pairs, preds))


def mean_window_l1(model: Checkpoint | Generator, volumes: Sequence[Volume]) -> float:
    g = model.generator() if isinstance(model, Checkpoint) else model
    inputs, targets = window_arrays(volumes)
    preds = predict(g, inputs)
    return float(l1_loss(torch.from_numpy(preds).double(), torch.from_numpy(targets).double()))
