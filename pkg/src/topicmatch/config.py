"""Run configuration and its line-oriented ``key = value`` text form."""
from dataclasses import dataclass, field, fields, replace
import math

from .numerics import ContractError, stable_hash


KERNEL_CHOICES = ("dot", "linear")


@dataclass(frozen=True)
class RunConfig:
    # topic model
    n_topics: int = 8
    n_covisible: int = 3
    tau: float = 0.2
    n_samples: int = 4
    n_negatives: int = 5
    topic_layers: int = 2
    # network widths
    widths: tuple = (32, 48, 64, 96)
    coarse_heads: int = 4
    fine_heads: int = 4
    use_pos_encoding: bool = True
    kernel_topic: str = "dot"
    kernel_coarse: str = "dot"
    kernel_fine: str = "dot"
    # matching
    ds_temperature: float = 0.1
    mutual_nn: bool = True
    patch_size: int = 5
    hard_argmax: bool = False
    log_eps: float = 1e-9
    # training
    seed: int = 0
    lr: float = 0.01
    steps: int = 3000
    batch_size: int = 2
    warmup_steps: int = 100
    fine_matches_per_pair: int = 96
    checkpoint_every: int = 500
    # data
    image_size: int = 128
    perspective: float = 0.1
    jitter: float = 0.1
    eval_perspective: float = 0.1
    # evaluation
    topk: int = 1000
    ransac_threshold: float = 3.0
    ransac_confidence: float = 0.99999
    ransac_max_iters: int = 2000

    def __post_init__(self):
        self.validate()

    @property
    def d_coarse(self):
        return self.widths[2]

    @property
    def d_fine(self):
        return self.widths[0]

    def validate(self):
        if self.n_topics < 1:
            raise ContractError("n_topics must be >= 1")
        if not 1 <= self.n_covisible <= self.n_topics:
            raise ContractError("need 1 <= n_covisible <= n_topics")
        if not 0.0 < self.tau < 1.0:
            raise ContractError("tau must lie in (0, 1)")
        if self.n_samples < 1 or self.n_negatives < 1:
            raise ContractError("n_samples and n_negatives must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ContractError("patch_size must be odd")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ContractError("widths needs four positive channel counts")
        if not self.d_fine < self.d_coarse:
            raise ContractError("fine width must be smaller than coarse width")
        if self.d_coarse % 4 or self.d_coarse % self.coarse_heads or self.d_fine % self.fine_heads:
            raise ContractError("widths must divide by head counts (and by 4 for the encoding)")
        for k in (self.kernel_topic, self.kernel_coarse, self.kernel_fine):
            if k not in KERNEL_CHOICES:
                raise ContractError(f"kernel must be one of {KERNEL_CHOICES}, got {k!r}")
        if self.image_size % 8 or self.image_size < 64:
            raise ContractError("image_size must be a multiple of 8 and >= 64")
        if self.ds_temperature <= 0 or self.lr < 0 or not math.isfinite(self.lr):
            raise ContractError("temperature must be positive and lr non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps >= 0 and batch_size >= 1 required")

    def override(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return stable_hash(self.to_text())

    def model_hash(self):
        """Hash of the fields that fix parameter shapes."""
        keys = ("n_topics", "topic_layers", "widths", "coarse_heads", "fine_heads")
        return stable_hash(";".join(f"{k}={getattr(self, k)}" for k in keys))

    def data_hash(self, perspective=None):
        p = self.eval_perspective if perspective is None else perspective
        return stable_hash(f"size={self.image_size};perspective={p!r};jitter={self.jitter!r}")


def _coerce(name, raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config(text, base=None):
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ContractError(f"unknown config key: {key}")
        try:
            values[key] = _coerce(key, raw, known[key])
        except ValueError as exc:
            raise ContractError(f"line {lineno}: bad value for {key}: {exc}") from None
    return replace(base, **values)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
