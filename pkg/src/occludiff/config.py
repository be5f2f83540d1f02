"""Run configuration: nested defaults, the line-oriented key=value file
format (dotted keys, # comments), presets, and up-front validation that
collects every problem before any work starts.
"""

from dataclasses import dataclass, field, fields

from .datasynth import MASK_KINDS
from .gate import GATE_KINDS


class ConfigError(ValueError):
    """One or more invalid or inconsistent configuration values."""


@dataclass
class DataConfig:
    n_identities: int = 40
    images_per_identity: int = 20
    height: int = 32
    width: int = 32
    variation: float = 1.0
    gallery_fraction: float = 0.8


@dataclass
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class RepaintConfig:
    r: int = 3
    j: int = 5


@dataclass
class GateConfig:
    kind: str = "softmax"
    k: int = 2
    logit_scale: float = 16.0


@dataclass
class ModelConfig:
    denoiser_channels: int = 8
    temb_dim: int = 16
    embed_dim: int = 64


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float


@dataclass
class EvalConfig:
    pairs: int = 400
    gate_probes_per_identity: int = 4


@dataclass
class OcclusionConfig:
    kind: str = "rect_mask"
    severity: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    n_experts: int = 3
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    repaint: RepaintConfig = field(default_factory=RepaintConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train_denoiser: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, batch_size=32, lr=2e-3)
    )
    train_embedder: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=30, batch_size=32, lr=1e-3)
    )
    train_gate: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=80, batch_size=32, lr=1e-3)
    )


# section name in the key=value file -> RunConfig attribute
_SECTIONS = {
    "data": "data",
    "schedule": "schedule",
    "repaint": "repaint",
    "gate": "gate",
    "model": "model",
    "occlusion": "occlusion",
    "eval": "eval",
    "train.denoiser": "train_denoiser",
    "train.embedder": "train_embedder",
    "train.gate": "train_gate",
}

PRESETS = ("desk", "paper")


def default_config():
    return RunConfig()


def apply_preset(cfg, preset):
    """Desk preset is the dataclass default; the paper preset restores the
    published schedule/resampling/gate-training scales."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if preset == "paper":
        cfg.schedule.T = 200
        cfg.repaint.r = 10
        cfg.repaint.j = 10
        cfg.train_gate.epochs = 200
        cfg.train_gate.batch_size = 32
        cfg.train_gate.lr = 1e-6
        cfg.gate.logit_scale = 1.0
    return cfg


def _coerce(section_obj, attr, raw, key):
    current = getattr(section_obj, attr)
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(current, int):
            return int(raw.strip(), 0)
        if isinstance(current, float):
            return float(raw.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(
            f"key '{key}': cannot parse {raw.strip()!r} as {type(current).__name__}"
        ) from None


def set_key(cfg, key, raw_value):
    """Apply one dotted key=value assignment; unknown keys are rejected."""
    if key == "seed" or key == "n_experts":
        setattr(cfg, key, _coerce(cfg, key, raw_value, key))
        return
    section_name, _, attr = key.rpartition(".")
    target = _SECTIONS.get(section_name)
    if target is None:
        raise ConfigError(f"unknown configuration key '{key}'")
    section_obj = getattr(cfg, target)
    if attr not in {f.name for f in fields(section_obj)}:
        raise ConfigError(f"unknown configuration key '{key}'")
    setattr(section_obj, attr, _coerce(section_obj, attr, raw_value, key))


def parse_config_lines(lines, cfg=None):
    """Apply key=value lines (comments with #, blanks skipped) on top of
    cfg (default config when omitted); all line errors are reported at once."""
    cfg = cfg if cfg is not None else default_config()
    errors = []
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            errors.append(f"line {lineno}: expected key=value, got {text!r}")
            continue
        key, _, value = text.partition("=")
        try:
            set_key(cfg, key.strip(), value)
        except ConfigError as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def load_config(path, cfg=None):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_lines(fh.readlines(), cfg)


def config_lines(cfg):
    """Serialize to sorted key=value lines (the same format load_config reads)."""
    out = [f"seed={cfg.seed}", f"n_experts={cfg.n_experts}"]
    for section_name, attr_name in _SECTIONS.items():
        obj = getattr(cfg, attr_name)
        for f in fields(obj):
            out.append(f"{section_name}.{f.name}={getattr(obj, f.name)}")
    return sorted(out)


def validate_config(cfg):
    """Collect every violation; raise ConfigError listing all of them."""
    errors = []

    def need(cond, msg):
        if not cond:
            errors.append(msg)

    need(0 <= cfg.seed < 2**64, f"seed must be a u64, got {cfg.seed}")
    need(cfg.n_experts >= 0, f"n_experts must be >= 0, got {cfg.n_experts}")
    d = cfg.data
    need(d.n_identities >= 2, f"data.n_identities must be >= 2, got {d.n_identities}")
    need(d.images_per_identity >= 2,
         f"data.images_per_identity must be >= 2 (split needs both sides), "
         f"got {d.images_per_identity}")
    need(d.height >= 8 and d.width >= 8,
         f"data dims must be >= 8, got {d.height}x{d.width}")
    need(d.height % 4 == 0 and d.width % 4 == 0,
         f"data dims must be divisible by 4 (two downsampling stages), "
         f"got {d.height}x{d.width}")
    need(d.variation >= 0.0, f"data.variation must be >= 0, got {d.variation}")
    need(0.0 < d.gallery_fraction < 1.0,
         f"data.gallery_fraction must be in (0, 1), got {d.gallery_fraction}")
    s = cfg.schedule
    need(s.T >= 1, f"schedule.T must be >= 1, got {s.T}")
    need(0.0 < s.beta_start <= s.beta_end < 1.0,
         f"schedule betas must satisfy 0 < start <= end < 1, "
         f"got ({s.beta_start}, {s.beta_end})")
    rp = cfg.repaint
    need(rp.r >= 1, f"repaint.r must be >= 1, got {rp.r}")
    need(1 <= rp.j <= s.T, f"repaint.j must be in 1..{s.T}, got {rp.j}")
    if 1 <= rp.j <= s.T:
        need(s.T % rp.j == 0, f"repaint.j={rp.j} must divide schedule.T={s.T}")
    g = cfg.gate
    need(g.kind in GATE_KINDS, f"gate.kind must be one of {GATE_KINDS}, got {g.kind!r}")
    if g.kind == "noisy_topk":
        need(1 <= g.k <= cfg.n_experts + 1,
             f"gate.k must be in 1..{cfg.n_experts + 1}, got {g.k}")
    need(g.logit_scale > 0.0, f"gate.logit_scale must be > 0, got {g.logit_scale}")
    m = cfg.model
    need(m.denoiser_channels >= 1, f"model.denoiser_channels must be >= 1, got {m.denoiser_channels}")
    need(m.temb_dim >= 1, f"model.temb_dim must be >= 1, got {m.temb_dim}")
    need(m.embed_dim >= 2, f"model.embed_dim must be >= 2, got {m.embed_dim}")
    o = cfg.occlusion
    need(o.kind in MASK_KINDS, f"occlusion.kind must be one of {MASK_KINDS}, got {o.kind!r}")
    need(0.0 < o.severity <= 1.0, f"occlusion.severity must be in (0, 1], got {o.severity}")
    e = cfg.eval
    need(e.pairs >= 2, f"eval.pairs must be >= 2, got {e.pairs}")
    need(e.gate_probes_per_identity >= 1,
         f"eval.gate_probes_per_identity must be >= 1, got {e.gate_probes_per_identity}")
    for name, tc in (("train.denoiser", cfg.train_denoiser),
                     ("train.embedder", cfg.train_embedder),
                     ("train.gate", cfg.train_gate)):
        need(tc.epochs >= 1, f"{name}.epochs must be >= 1, got {tc.epochs}")
        need(tc.batch_size >= 1, f"{name}.batch_size must be >= 1, got {tc.batch_size}")
        need(tc.lr > 0.0, f"{name}.lr must be > 0, got {tc.lr}")
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg
