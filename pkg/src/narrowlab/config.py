"""Run configuration dataclasses and the flat ``key = value`` config format."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch: int = 4
    vocab_size: int = 64
    n_tokens: int = 8
    text_dim: int = 32
    image_dim: int = 32
    latent_channels: int = 12
    channels: int = 32
    ladder: tuple[int, ...] = (8, 4)
    blocks_per_stage: int = 1
    attn_resolutions: tuple[int, ...] = (8, 4)
    attn_dim: int = 32
    temb_dim: int = 32
    score_hidden: int = 64
    mask_grid: int = 8
    encoder_seed: int = 1234
    init_seed: int = 0

    def __post_init__(self):
        lat = self.image_size // 2
        if self.ladder[0] != lat:
            raise ValueError(f"ladder must start at latent size {lat}, got {self.ladder}")
        for a, b in zip(self.ladder, self.ladder[1:]):
            if a % b or a <= b:
                raise ValueError(f"ladder must divide evenly: {self.ladder}")
        if not set(self.attn_resolutions) & set(self.ladder):
            raise ValueError("at least one attention resolution must be on the ladder")
        if self.image_size % self.patch:
            raise ValueError("patch must divide image_size")

    @property
    def latent_size(self) -> int:
        return self.image_size // 2

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        d = json.loads(s)
        for k in ("ladder", "attn_resolutions"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class GuidanceConfig:
    omega_t: float = 7.5
    omega_i: float = 12.5
    gamma_scope: float = 0.25
    gamma_num: float = 0.8
    steps: int = 50
    seed: int = 0
    mask_mode: str = "maxnorm"
    target_index: int = 2
    # scoring variants used by the ablation harness
    fusion: str = "timestep"  # timestep | textual | visual | average | none
    swap_target: str = ""

    def __post_init__(self):
        if self.omega_t < 0 or self.omega_i < 0:
            raise ValueError("guidance weights must be nonnegative")
        if not 0 < self.gamma_scope <= 1 or not 0 < self.gamma_num <= 1:
            raise ValueError("gamma_scope and gamma_num must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mask_mode not in ("maxnorm", "binary"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        if self.fusion not in ("timestep", "textual", "visual", "average", "none"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    def key(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class TrainConfig:
    phase: int = 0
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    text_dropout: float = 0.1
    gamma_low: float = 0.3
    gamma_high: float = 1.0
    log_every: int = 1
    init: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return type(current)(value)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def train_config_from_kv(kv: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig; ``model.<field>`` keys configure the model dims."""
    cfg = base or TrainConfig()
    model_kw = {}
    top = {f.name for f in fields(TrainConfig)} - {"model"}
    model_fields = {f.name for f in fields(ModelConfig)}
    for k, v in kv.items():
        if k.startswith("model."):
            name = k[len("model."):]
            if name not in model_fields:
                raise KeyError(f"unknown config key {k!r}")
            model_kw[name] = _coerce(v, getattr(cfg.model, name))
        elif k in top:
            setattr(cfg, k, _coerce(v, getattr(cfg, k)))
        else:
            raise KeyError(f"unknown config key {k!r}")
    if model_kw:
        cfg.model = dataclasses.replace(cfg.model, **model_kw)
    return cfg
