"""
Pydantic models for experiment configuration.

Section models (`DataSection`, `ModelSection`, ...) mirror the sections of the
experiment config file one to one: every field is a legal key of its section.
"""
import hashlib
from datetime import datetime
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field, root_validator, validator

try:
    from typing import Literal
except ImportError:  # pragma: no cover
    from typing_extensions import Literal

Negatives = Union[Literal["all"], int]


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _check_negatives(value: Negatives) -> Negatives:
    if value != "all" and int(value) < 1:
        raise ValueError("negatives must be 'all' or a positive count")
    return value


class LabModel(BaseModel):
    """Base model: unknown fields rejected, 'none' and '' read as null."""

    class Config:
        extra = "forbid"
        validate_assignment = True

    @root_validator(pre=True)
    def _blank_is_none(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        cleaned = {}
        for key, value in values.items():
            if isinstance(value, str) and value.strip().lower() in {"", "none", "null"}:
                field = cls.__fields__.get(key)
                if field is not None and field.allow_none:
                    value = None
            cleaned[key] = value
        return cleaned


# Loss / estimator / probe configs

class LossConfig(LabModel):
    """Weights and temperatures of both CTC stage objectives."""
    alpha: float = Field(default=0.5, ge=0, description="Stage-1 contrastive weight")
    beta: float = Field(default=1.0, ge=0, description="Stage-2 contrastive weight")
    tau_stage1: float = Field(default=0.5, gt=0, description="Stage-1 temperature")
    tau_stage2: float = Field(default=0.4, gt=0, description="Stage-2 temperature")
    negatives_per_anchor: Negatives = Field(default="all", description="K negatives or 'all'")

    _negatives = validator("negatives_per_anchor", allow_reuse=True)(_check_negatives)


class MineConfig(LabModel):
    """Statistics network and optimizer settings for one MINE run."""
    hidden_dim: int = Field(default=64, ge=1)
    layer_count: int = Field(default=4, ge=2, description="Fully-connected layers incl. output")
    batch_size: int = Field(default=256, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    train_steps: int = Field(default=2000, ge=1)
    ema_decay: float = Field(default=0.99, gt=0, lt=1)
    bias_correction: bool = Field(default=True, description="EMA-corrected denominator gradient")
    tail_fraction: float = Field(default=0.1, gt=0, le=1, description="Share of final steps averaged")
    standardize_inputs: bool = Field(default=True)

    @classmethod
    def preset(cls, name: str, quantity: str = "ixt") -> "MineConfig":
        """Named presets; 'paper-a5' differs between I(X;T) and I(T;Y)."""
        if name == "desk":
            return cls()
        if name == "paper-a5":
            if quantity == "ity":
                return cls(hidden_dim=1024, batch_size=5000, learning_rate=1e-5, train_steps=10000)
            return cls(hidden_dim=1024, batch_size=1000, learning_rate=1e-4, train_steps=10000)
        raise ValueError(f"unknown MINE preset {name!r}")


class ProbeConfig(LabModel):
    """Linear-probe protocol: fresh head, cross-entropy, stepwise-decayed SGD."""
    steps: int = Field(default=1500, ge=1)
    batch_size: int = Field(default=256, ge=1)
    lr_init: float = Field(default=0.1, gt=0)
    lr_decay_factor: float = Field(default=0.1, gt=0)
    decay_steps: List[int] = Field(default_factory=lambda: [500, 1000])
    seed: int = 0
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    feature_scaling: Literal["rms", "standardize", "none"] = "rms"

    _split = validator("decay_steps", pre=True, allow_reuse=True)(_split_list)

    @root_validator(skip_on_failure=True)
    def _decay_before_end(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        steps, decay = values["steps"], values["decay_steps"]
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ValueError("decay_steps must be strictly increasing")
        if decay and decay[-1] >= steps:
            raise ValueError("decay_steps must be smaller than steps")
        return values

    @classmethod
    def cifar_scale(cls, seed: int = 0) -> "ProbeConfig":
        """15K steps, batch 512, lr 0.4, x0.1 at 5K and 10K."""
        return cls(steps=15000, batch_size=512, lr_init=0.4, lr_decay_factor=0.1,
                   decay_steps=[5000, 10000], seed=seed)

    def scaled(self, factor: float) -> "ProbeConfig":
        """Same protocol with step counts shrunk by `factor` (0 < factor <= 1)."""
        if not 0 < factor <= 1:
            raise ValueError("factor must lie in (0, 1]")
        steps = max(1, int(round(self.steps * factor)))
        decay = sorted({max(1, int(round(s * factor))) for s in self.decay_steps})
        decay = [s for s in decay if s < steps]
        return self.copy(update={"steps": steps, "decay_steps": decay})

    def lr_at(self, step: int) -> float:
        """Learning rate used at optimizer step `step` (0-based)."""
        passed = sum(1 for boundary in self.decay_steps if step >= boundary)
        return self.lr_init * self.lr_decay_factor ** passed


class SharedPatternSpec(LabModel):
    """Synthetic source/target pair sharing a latent subspace."""
    shared_dim: int = Field(default=8, ge=1)
    source_private_dim: int = Field(default=8, ge=1)
    target_private_dim: int = Field(default=8, ge=1)
    ambient_dim: Optional[int] = Field(default=None, description="Defaults to the latent total")
    source_classes: int = Field(default=10, ge=2)
    target_classes: int = Field(default=4, ge=2)
    train_samples: int = Field(default=2000, ge=1)
    test_samples: int = Field(default=1000, ge=1)
    noise_std: float = Field(default=0.1, ge=0)
    source_shared_weight: float = Field(
        default=0.5, ge=0, description="Weight of the shared latent in source labels (private weight 1)"
    )
    seed: int = 0

    @validator("ambient_dim")
    def _ambient_holds_latents(cls, value: Optional[int], values: Dict[str, Any]) -> Optional[int]:
        if value is None:
            return value
        needed = sum(values.get(k, 0) for k in ("shared_dim", "source_private_dim", "target_private_dim"))
        if value < needed:
            raise ValueError(f"ambient_dim must be >= {needed}")
        return value

    @property
    def latent_dim(self) -> int:
        return self.shared_dim + self.source_private_dim + self.target_private_dim

    @property
    def feature_dim(self) -> int:
        return self.ambient_dim if self.ambient_dim is not None else self.latent_dim

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "SharedPatternSpec":
        if name == "default":
            return cls(seed=seed)
        if name == "small":
            return cls(train_samples=600, test_samples=600, seed=seed)
        raise ValueError(f"unknown data preset {name!r}")


# Config-file sections

class DataSection(SharedPatternSpec):
    """[data]: either file prefixes or a SharedPatternSpec to generate from."""
    source: Optional[str] = Field(default=None, description="Prefix of <p>_train.csv / <p>_test.csv")
    targets: List[str] = Field(default_factory=list, description="Target prefixes")
    augment_strength: float = Field(default=0.0, ge=0)

    _split = validator("targets", pre=True, allow_reuse=True)(_split_list)

    @root_validator(skip_on_failure=True)
    def _targets_with_source(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if values.get("source") is not None and not values.get("targets"):
            raise ValueError("a file-based source needs at least one target")
        return values

    def shared_spec(self) -> SharedPatternSpec:
        return SharedPatternSpec(**{k: getattr(self, k) for k in SharedPatternSpec.__fields__})


class ModelSection(LabModel):
    """[model]: backbone shape and the master seed."""
    hidden_dims: List[int] = Field(default_factory=lambda: [128, 64])
    rep_dim: int = Field(default=32, ge=1)
    rectify_reps: bool = Field(default=False, description="Rectify the representation layer as well")
    seed: int = 0

    _split = validator("hidden_dims", pre=True, allow_reuse=True)(_split_list)

    @validator("hidden_dims")
    def _positive(cls, value: List[int]) -> List[int]:
        if any(v < 1 for v in value):
            raise ValueError("hidden dims must be positive")
        return value


class StageSection(LabModel):
    epochs: int = Field(default=60, ge=0)
    stop_epoch: Optional[int] = Field(default=None, ge=0, description="Early stop; schedule still spans epochs")
    batch_size: int = Field(default=64, ge=1)
    lr_init: float = Field(default=5e-2, gt=0)
    lr_min: float = Field(default=0.0, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    tau: float = Field(default=0.5, gt=0)

    @root_validator(skip_on_failure=True)
    def _schedule_bounds(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if values["lr_min"] > values["lr_init"]:
            raise ValueError("lr_min must not exceed lr_init")
        stop = values.get("stop_epoch")
        if stop is not None and stop > values["epochs"]:
            raise ValueError("stop_epoch must not exceed epochs")
        return values

    @property
    def effective_epochs(self) -> int:
        return self.epochs if self.stop_epoch is None else self.stop_epoch


class Stage1Section(StageSection):
    """[stage1]: information aggregation stage."""
    alpha: float = Field(default=0.5, ge=0)
    bank_momentum: float = Field(default=0.5, ge=0, le=1)
    negatives: Negatives = Field(default="all", description="K negatives or 'all', both stages")

    _negatives = validator("negatives", allow_reuse=True)(_check_negatives)


class Stage2Section(StageSection):
    """[stage2]: information revitalization stage."""
    epochs: int = Field(default=30, ge=0)
    lr_init: float = Field(default=5e-3, gt=0)
    tau: float = Field(default=0.4, gt=0)
    beta: float = Field(default=1.0, ge=0)
    reset_optimizer: bool = True


class EvalSection(LabModel):
    """[eval]: evaluation cadence and the linear-probe protocol."""
    eval_every: int = Field(default=1, ge=1)
    probe_steps: int = Field(default=1500, ge=1)
    probe_batch_size: int = Field(default=256, ge=1)
    probe_lr: float = Field(default=0.1, gt=0)
    probe_decay_factor: float = Field(default=0.1, gt=0)
    probe_decay_steps: List[int] = Field(default_factory=lambda: [500, 1000])
    probe_momentum: float = Field(default=0.9, ge=0, lt=1)
    probe_feature_scaling: Literal["rms", "standardize", "none"] = "rms"
    nmi_average: Literal["geometric", "arithmetic"] = "geometric"
    checkpoints: bool = True

    _split = validator("probe_decay_steps", pre=True, allow_reuse=True)(_split_list)


class MiSection(LabModel):
    """[mi]: information-plane estimation cadence and MINE settings."""
    enabled: bool = False
    every: int = Field(default=5, ge=1)
    preset: Literal["desk", "paper-a5"] = "desk"
    hidden_dim: Optional[int] = Field(default=None, ge=1)
    layer_count: Optional[int] = Field(default=None, ge=2)
    batch_size: Optional[int] = Field(default=None, ge=1)
    learning_rate: Optional[float] = Field(default=None, gt=0)
    train_steps: Optional[int] = Field(default=None, ge=1)
    ema_decay: Optional[float] = Field(default=None, gt=0, lt=1)
    bias_correction: Optional[bool] = None
    max_samples: Optional[int] = Field(default=None, ge=2)


SECTION_MODELS = {
    "data": DataSection,
    "model": ModelSection,
    "stage1": Stage1Section,
    "stage2": Stage2Section,
    "eval": EvalSection,
    "mi": MiSection,
}


def _mine_config(mi: MiSection, quantity: str) -> MineConfig:
    base = MineConfig.preset(mi.preset, quantity)
    overrides = {
        key: getattr(mi, key)
        for key in ("hidden_dim", "layer_count", "batch_size", "learning_rate",
                    "train_steps", "ema_decay", "bias_correction")
        if getattr(mi, key) is not None
    }
    return base.copy(update=overrides) if overrides else base


class TrainConfig(LabModel):
    """Everything one training run depends on."""
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    stage1: Stage1Section = Field(default_factory=Stage1Section)
    stage2: Stage2Section = Field(default_factory=Stage2Section)
    eval: EvalSection = Field(default_factory=EvalSection)
    mi: MiSection = Field(default_factory=MiSection)

    @root_validator(skip_on_failure=True)
    def _mine_fits_generated_split(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        data, mi = values["data"], values["mi"]
        if not mi.enabled or data.source is not None:
            return values
        rows = data.test_samples if mi.max_samples is None else min(mi.max_samples, data.test_samples)
        needed = 2 * max(_mine_config(mi, quantity).batch_size for quantity in ("ixt", "ity"))
        if rows < needed:
            raise ValueError(
                f"MINE batches need {needed} test rows, data.test_samples/mi.max_samples give {rows}"
            )
        return values

    @property
    def seed(self) -> int:
        return self.model.seed

    @property
    def stage1_epochs(self) -> int:
        return self.stage1.effective_epochs

    @property
    def stage2_epochs(self) -> int:
        return self.stage2.effective_epochs

    @property
    def eval_every(self) -> int:
        return self.eval.eval_every

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.stage1.alpha,
            beta=self.stage2.beta,
            tau_stage1=self.stage1.tau,
            tau_stage2=self.stage2.tau,
            negatives_per_anchor=self.stage1.negatives,
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            steps=self.eval.probe_steps,
            batch_size=self.eval.probe_batch_size,
            lr_init=self.eval.probe_lr,
            lr_decay_factor=self.eval.probe_decay_factor,
            decay_steps=self.eval.probe_decay_steps,
            seed=self.seed,
            momentum=self.eval.probe_momentum,
            feature_scaling=self.eval.probe_feature_scaling,
        )

    def mine_config(self, quantity: str) -> MineConfig:
        return _mine_config(self.mi, quantity)

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = self.json(sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunManifest(BaseModel):
    """Provenance written into every output directory."""
    command: str = Field(..., description="CLI command name")
    output_dir: str = Field(..., description="Resolved output directory")
    config_path: Optional[str] = Field(None, description="Config file, if any")
    seed: int = Field(..., description="Seed the command ran with")
    mode: Optional[str] = Field(None, description="Training mode for train runs")
    overrides: List[str] = Field(default_factory=list, description="--set overrides, verbatim")
    config_fingerprint: Optional[str] = Field(None, description="TrainConfig fingerprint")
    version: str = Field(..., description="CTC Lab version")
    timestamp: datetime = Field(default_factory=datetime.utcnow, description="Run start time")
