"""Run configuration serialised as ``key=value`` text."""
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass(frozen=True)
class RunConfig:
    mode: str = "parametric"
    order: str = "1"  # part levels used in training: 1, 2, both, off
    epochs: int = 200
    batch_size: int = 128
    lr0: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    lambda_b: float = 0.35
    tau_r: float = 0.07
    tau_s: float = 0.1
    tau_t: float = 0.05
    xi: float = 1.0
    rep_dim: int = 128
    part_dim: int = 128
    aug_strength: float = 0.5
    drop_rate: float = 0.1
    pc_threshold: float = 0.0
    num_classes: int = 0  # 0: take K from the manifest
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    # label construction
    tau_obj: float = 0.6
    per_class: int = 1
    k_candidates: str = "2..10"
    k_candidates_2nd: str = "2..6"

    def validate(self):
        if self.mode not in ("parametric", "nonparametric"):
            raise ValidationError(f"mode must be parametric or nonparametric, got {self.mode!r}")
        if self.order not in ("1", "2", "both", "off"):
            raise ValidationError(f"order must be 1, 2, both or off, got {self.order!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValidationError("need epochs >= 0 and batch_size >= 2")
        for name in ("tau_r", "tau_s", "tau_t"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 <= self.lambda_b <= 1.0:
            raise ValidationError("lambda_b must lie in [0, 1]")
        parse_range(self.k_candidates)
        parse_range(self.k_candidates_2nd)
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def dumps(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def parse_range(text):
    """``"2..10"`` -> (2, ..., 10); ``"2,4,6"`` -> (2, 4, 6)."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            out = tuple(range(int(lo), int(hi) + 1))
        else:
            out = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValidationError(f"bad integer range {text!r}") from None
    if not out:
        raise ValidationError(f"empty range {text!r}")
    return out


def _coerce(f, value):
    if f.type in (int, "int"):
        return int(value)
    if f.type in (float, "float"):
        return float(value)
    return str(value)


def loads(text, base=None):
    base = base or RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(known[key], value)
        except ValueError:
            raise ValidationError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    return base.replace(**updates).validate()


def load(path, base=None):
    return loads(Path(path).read_text(encoding="utf-8"), base)
