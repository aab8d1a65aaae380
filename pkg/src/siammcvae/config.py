"""Training configuration and its ``key = value`` text form."""

from dataclasses import dataclass, field, fields, replace

from .model import ModelConfig
from .optim import AdamHyper
from .vision import PatchGrid


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    beta: float = 0.2
    kl_form: str = "paper"
    mask_ratio: float = 0.75
    mask_mode: str = "random"
    frame_gap: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    train_pairs: int = 512
    eval_pairs: int = 64
    sequence_length: int = 96
    background: str = "gradient"
    mask_later: bool = True
    checkpoint_every: int = 500
    log_every: int = 50
    data_dir: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        for name in ("lr", "adam_eps", "batch_size", "steps", "train_pairs", "eval_pairs",
                     "sequence_length", "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("moment decays must lie in (0, 1)")
        if self.kl_form not in ("paper", "standard"):
            raise ConfigError(f"kl_form must be 'paper' or 'standard', got {self.kl_form!r}")
        if self.mask_mode not in ("random", "block"):
            raise ConfigError(f"mask_mode must be 'random' or 'block', got {self.mask_mode!r}")
        if self.frame_gap < 0 or self.frame_gap >= self.sequence_length:
            raise ConfigError("frame_gap must lie in [0, sequence_length)")

    @property
    def adam(self):
        return AdamHyper(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    def with_(self, **kw):
        """Copy with top-level or model-level fields replaced."""
        model_keys = {f.name for f in fields(ModelConfig)} | {"H", "W", "C", "P"}
        mk = {k: kw.pop(k) for k in list(kw) if k in model_keys}
        model = self.model
        if mk:
            grid_kw = {k: mk.pop(k) for k in ("H", "W", "C", "P") if k in mk}
            if grid_kw:
                g = model.grid
                mk["grid"] = PatchGrid(**{**dict(H=g.H, W=g.W, C=g.C, P=g.P), **grid_kw})
            model = replace(model, **mk)
        try:
            return replace(self, model=model, **kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None


_MODEL_KEYS = ("H", "W", "C", "P", "D", "D_latent", "L", "L_dec", "heads_enc", "heads_dec",
               "attention_kernel", "reparam_enabled", "chunk_size", "adaptive_threshold",
               "mlp_ratio", "init_std")


def to_items(cfg):
    """Flat ordered (key, value) pairs."""
    m, g = cfg.model, cfg.model.grid
    items = []
    for k in _MODEL_KEYS:
        items.append((k, getattr(g, k) if k in ("H", "W", "C", "P") else getattr(m, k)))
    for f in fields(TrainConfig):
        if f.name != "model":
            items.append((f.name, getattr(cfg, f.name)))
    return items


def dumps(cfg):
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg))


def _coerce(key, text, template):
    t = type(template)
    if t is bool:
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return t(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {t.__name__}") from None


def apply_overrides(cfg, pairs):
    """Apply string ``(key, value)`` overrides with type coercion."""
    ref = dict(to_items(cfg))
    kw = {}
    for k, v in pairs:
        if k not in ref:
            raise ConfigError(f"unknown config key {k!r}")
        kw[k] = _coerce(k, v, ref[k])
    try:
        return cfg.with_(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def loads(text, base=None):
    pairs = []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return apply_overrides(base or TrainConfig(), pairs)


def load(path):
    with open(path) as fh:
        return loads(fh.read())


def save(cfg, path):
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
