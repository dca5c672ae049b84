"""Run configuration: plain-text key-value files, one `key = value` per line.

Lines starting with `#` are comments.  Unknown keys are rejected so typos
fail loudly.  The canonical serialization (field order, repr values) is
what gets hashed into checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


@dataclass
class RunConfig:
    # run
    seed: int = 0
    steps: int = 20000
    resolution: int = 32

    # generator architecture
    dim_z: int = 64
    dim_w: int = 64
    dim_m: int = 8
    n_layers: int = 8
    hidden_width: int = 32
    feature_dim: int = 16
    octaves_x: int = 6
    octaves_d: int = 4
    conditioning_mode: str = "layered_sum"  # or "input_concat"

    # renderer
    samples_train: int = 10
    samples_eval: int = 64
    jitter_train: bool = True
    bound_radius: float = 0.42
    background_head: bool = True

    # pose distribution
    yaw_min: float = -0.6
    yaw_max: float = 0.6
    pitch_min: float = -0.3
    pitch_max: float = 0.3
    radius: float = 2.7
    fov: float = 0.35
    t_near: float = 1.7
    t_far: float = 3.7
    pose_mode: str = "uniform"  # or "dataset"

    # discriminator / adversarial
    disc_channels: int = 16
    gamma_r1: float = 10.0
    batch_d: int = 6
    pairs_g: int = 3

    # loss weights
    lambda_adv: float = 1.0
    lambda_motion: float = 10.0
    lambda_consist: float = 1.0
    lambda_id: float = 1.0
    lambda_bg: float = 1.0
    beta_l: float = 1.0
    beta_a: float = 1.0
    beta_t: float = 1.0
    beta_s: float = 1.0
    enable_consist: bool = True
    enable_id: bool = True
    enable_bg: bool = True

    # optimizer
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8

    # synthetic world / oracles
    world_identities: int = 400
    frames_per_identity: int = 8
    holdout_identities: int = 40
    train_identities: int = 200
    frame_cache_per_identity: int = 32
    embed_dim: int = 32
    oracle_channels: int = 16
    oracle_batch: int = 64
    oracle_steps_regressor: int = 2000
    oracle_steps_encoder: int = 1500
    oracle_steps_segmenter: int = 500
    oracle_lr: float = 1e-3

    # evaluation
    motion_threshold: float = 1.2
    snapshot_every: int = 2000
    eval_samples: int = 64

    def validate(self) -> "RunConfig":
        if self.yaw_min > self.yaw_max or self.pitch_min > self.pitch_max:
            raise ValueError("config: empty pose range")
        if self.conditioning_mode not in ("layered_sum", "input_concat"):
            raise ValueError(f"config: unknown conditioning_mode '{self.conditioning_mode}'")
        if self.pose_mode not in ("uniform", "dataset"):
            raise ValueError(f"config: unknown pose_mode '{self.pose_mode}'")
        if not (0 < self.t_near < self.t_far):
            raise ValueError("config: need 0 < t_near < t_far")
        if self.samples_train < 2 or self.samples_eval < 2:
            raise ValueError("config: sample counts must be >= 2")
        if min(self.lambda_adv, self.lambda_motion, self.lambda_consist,
               self.lambda_id, self.lambda_bg,
               self.beta_l, self.beta_a, self.beta_t, self.beta_s) < 0:
            raise ValueError("config: loss weights must be non-negative")
        return self

    def to_text(self) -> str:
        lines = ["# corf run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()


def _coerce(raw: str, typ):
    if typ is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: '{raw}'")
    return typ(raw)


def load_config(path) -> RunConfig:
    """Parse a key-value config file into a validated RunConfig."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}:{ln}: unknown config key '{key}'")
        typ = fields[key]
        typ = types.get(typ, typ) if isinstance(typ, str) else typ
        try:
            values[key] = _coerce(raw, typ)
        except ValueError as e:
            raise ValueError(f"{path}:{ln}: bad value for '{key}': {e}") from None
    return RunConfig(**values).validate()
