"""U-Net-like slice-stack generator, Wasserstein critic and checkpoints."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .errors import ConfigError, FormatError, ShapeError

KERNEL = 4
LEAK = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 3
    out_channels: int = 3
    encoder_depth: int = 4
    decoder_depth: int = 4
    base_filters: int = 64
    max_multiplier: int = 8
    norm: bool = True
    skip_connections: bool = True
    head_kernel: int = 3
    image_size: tuple[int, int] | None = None

    def validate(self):
        if self.encoder_depth != self.decoder_depth:
            raise ConfigError("encoder_depth must equal decoder_depth")
        if self.encoder_depth < 1 or self.base_filters < 1:
            raise ConfigError("encoder_depth and base_filters must be positive")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigError("head_kernel must be a positive odd integer")
        if self.image_size is not None:
            check_spatial(self.image_size, self.encoder_depth, ConfigError)


@dataclass(frozen=True)
class CriticConfig:
    conditional: bool = True
    stack_channels: int = 3
    n_blocks: int = 3
    base_filters: int = 64

    @property
    def in_channels(self) -> int:
        return 2 * self.stack_channels if self.conditional else self.stack_channels

    def validate(self):
        if self.n_blocks < 1 or self.base_filters < 1:
            raise ConfigError("critic n_blocks and base_filters must be positive")


def check_spatial(size, depth, exc=ShapeError):
    factor = 2**depth
    h, w = size
    if h % factor or w % factor or h <= 0 or w <= 0:
        raise exc(f"spatial size {h}x{w} must be a positive multiple of {factor}")


@contextmanager
def seeded(seed):
    """Run the block under a fixed torch seed without disturbing the global stream."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _down(cin, cout, norm):
    layers = [nn.Conv2d(cin, cout, KERNEL, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(LEAK))
    return nn.Sequential(*layers)


def _up(cin, cout, norm):
    layers = [nn.ConvTranspose2d(cin, cout, KERNEL, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Encoder of stride-2 convolutions, mirrored transposed-convolution decoder.

    Decoder stage ``j`` (j >= 1) sees the previous decoder output concatenated
    with the encoder output of the same resolution. A ``head_kernel`` convolution
    and a sigmoid map the last decoder features to the output stack.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        f = cfg.base_filters
        widths = [f * min(2**i, cfg.max_multiplier) for i in range(cfg.encoder_depth)]

        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for cout in widths:
            self.down.append(_down(cin, cout, cfg.norm))
            cin = cout

        # decoder output widths mirror the encoder, ending at base width
        dec_out = widths[-2::-1] + [f]
        self.up = nn.ModuleList()
        cin = widths[-1]
        for j, cout in enumerate(dec_out):
            self.up.append(_up(cin, cout, cfg.norm))
            skip = widths[-2 - j] if (cfg.skip_connections and j < len(dec_out) - 1) else 0
            cin = cout + skip
        # a 1x1 head trains far slower: each output logit sees only C weights
        k = cfg.head_kernel
        self.head = nn.Conv2d(dec_out[-1], cfg.out_channels, kernel_size=k, padding=k // 2)

    def forward(self, x):
        feats = []
        for block in self.down:
            x = block(x)
            feats.append(x)
        skips = feats[-2::-1]
        for j, block in enumerate(self.up):
            x = block(x)
            if self.cfg.skip_connections and j < len(skips):
                x = torch.cat([x, skips[j]], dim=1)
        return torch.sigmoid(self.head(x))


class Critic(nn.Module):
    """Stride-2 conv blocks without normalization, then a linear head on pooled features."""

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        for i in range(cfg.n_blocks):
            cout = cfg.base_filters * 2**i
            layers += [nn.Conv2d(cin, cout, KERNEL, stride=2, padding=1), nn.LeakyReLU(LEAK)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h).squeeze(1)


def build_generator(cfg: GeneratorConfig, seed: int | None = None) -> Generator:
    with seeded(seed):
        return Generator(cfg)


def build_critic(cfg: CriticConfig, seed: int | None = None) -> Critic:
    with seeded(seed):
        return Critic(cfg)


def generator_forward(g: Generator, input_stack: torch.Tensor) -> torch.Tensor:
    """Predict next stacks from ``(B, C, H, W)`` or a single ``(C, H, W)`` input."""
    single = input_stack.dim() == 3
    x = input_stack.unsqueeze(0) if single else input_stack
    if x.dim() != 4 or x.shape[1] != g.cfg.in_channels:
        raise ShapeError(
            f"generator expects (B, {g.cfg.in_channels}, H, W), got {tuple(input_stack.shape)}"
        )
    check_spatial(x.shape[-2:], g.cfg.encoder_depth)
    if g.cfg.image_size is not None and tuple(x.shape[-2:]) != tuple(g.cfg.image_size):
        raise ShapeError(f"generator configured for {g.cfg.image_size}, got {tuple(x.shape[-2:])}")
    y = g(x)
    return y[0] if single else y


def critic_forward(c: Critic, input_stack: torch.Tensor, candidate_stack: torch.Tensor) -> torch.Tensor:
    """One real score per sample; the condition is ignored by unconditional critics."""
    if candidate_stack.dim() != 4 or candidate_stack.shape[1] != c.cfg.stack_channels:
        raise ShapeError(f"candidate must be (B, {c.cfg.stack_channels}, H, W), got {tuple(candidate_stack.shape)}")
    if c.cfg.conditional:
        if input_stack is None or input_stack.shape != candidate_stack.shape:
            raise ShapeError(
                "condition and candidate shapes differ: "
                f"{None if input_stack is None else tuple(input_stack.shape)} vs {tuple(candidate_stack.shape)}"
            )
        x = torch.cat([input_stack, candidate_stack], dim=1)
    else:
        x = candidate_stack
    if min(x.shape[-2:]) < 2**c.cfg.n_blocks:
        raise ShapeError(f"candidate too small for {c.cfg.n_blocks} stride-2 blocks")
    return c(x)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "slicerecon-checkpoint/1"


@dataclass
class Checkpoint:
    generator_config: GeneratorConfig
    generator_state: dict
    critic_config: CriticConfig | None = None
    critic_state: dict | None = None
    generator_optimizer: dict | None = None
    critic_optimizer: dict | None = None
    step: int = 0
    seed: int = 0
    train_config: dict = field(default_factory=dict)

    def generator(self) -> Generator:
        g = Generator(self.generator_config)
        g.load_state_dict(self.generator_state)
        g.eval()
        return g

    def critic(self) -> Critic | None:
        if self.critic_config is None:
            return None
        c = Critic(self.critic_config)
        c.load_state_dict(self.critic_state)
        return c

    def save(self, path) -> None:
        gcfg = asdict(self.generator_config)
        doc = {
            "format": CHECKPOINT_FORMAT,
            "generator_config": gcfg,
            "generator_state": self.generator_state,
            "critic_config": None if self.critic_config is None else asdict(self.critic_config),
            "critic_state": self.critic_state,
            "generator_optimizer": self.generator_optimizer,
            "critic_optimizer": self.critic_optimizer,
            "step": self.step,
            "seed": self.seed,
            "train_config": self.train_config,
        }
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(doc, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            doc = torch.load(Path(path), map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise
        except Exception as exc:  # torch raises a variety of unpickling errors
            raise FormatError(f"{path}: unreadable checkpoint: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        gcfg = dict(doc["generator_config"])
        if gcfg.get("image_size") is not None:
            gcfg["image_size"] = tuple(gcfg["image_size"])
        ccfg = doc["critic_config"]
        return cls(
            generator_config=GeneratorConfig(**gcfg),
            generator_state=doc["generator_state"],
            critic_config=None if ccfg is None else CriticConfig(**ccfg),
            critic_state=doc["critic_state"],
            generator_optimizer=doc["generator_optimizer"],
            critic_optimizer=doc["critic_optimizer"],
            step=int(doc["step"]),
            seed=int(doc["seed"]),
            train_config=doc["train_config"],
        )
