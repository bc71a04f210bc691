"""
Pydantic models for measured results: MI estimates, epoch records, trajectories.
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, validator

from .config import TrainConfig


class MiEstimate(BaseModel):
    """A mutual-information value in nats with its tail-window uncertainty."""
    value: float = Field(..., description="Estimate in nats")
    stderr: float = Field(default=0.0, ge=0, description="Standard error over the tail window, nats")
    steps_used: int = Field(default=0, ge=0, description="Optimizer steps run (0 for exact oracles)")
    method: str = Field(default="mine", description="'mine' or the exact oracle used")

    @validator("value")
    def _finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("MI estimate must be finite")
        return value


class EpochRecord(BaseModel):
    """Measurements taken after one evaluated epoch."""
    epoch: int = Field(..., ge=0)
    stage: int = Field(..., ge=1, le=2)
    train_loss: float = Field(..., description="Mean training objective over the epoch, nats")
    test_loss: float = Field(..., description="Source test cross-entropy, nats")
    r_at_1: float = Field(..., ge=0, le=1)
    nmi: float = Field(..., ge=0, le=1)
    source_accuracy: float = Field(..., ge=0, le=1, description="Source test top-1 accuracy")
    probe: Dict[str, float] = Field(default_factory=dict, description="Target name -> probe accuracy")
    ixt: Dict[str, MiEstimate] = Field(default_factory=dict, description="Dataset -> I(X;T)")
    ity: Dict[str, MiEstimate] = Field(default_factory=dict, description="Dataset -> I(T;Y)")
    entropy_bound: Optional[float] = Field(
        None, description="Mean ln(N_keys) - contrastive loss over the epoch"
    )


class Trajectory(BaseModel):
    """Ordered epoch records of one run plus what produced them."""
    config: TrainConfig
    config_fingerprint: str
    mode: str = Field(..., description="'vanilla' or 'ctc'")
    source: str = Field(..., description="Source dataset name")
    targets: List[str] = Field(default_factory=list)
    records: List[EpochRecord] = Field(default_factory=list)
    checkpoints: Dict[int, str] = Field(default_factory=dict, description="Epoch -> checkpoint path")
    information_bank_digest: Optional[str] = None

    @validator("records")
    def _increasing_epochs(cls, records: List[EpochRecord]) -> List[EpochRecord]:
        epochs = [r.epoch for r in records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("epoch indices must be strictly increasing")
        return records

    @validator("config_fingerprint")
    def _fingerprint_matches(cls, value: str, values: Dict) -> str:
        config = values.get("config")
        if config is not None and config.fingerprint() != value:
            raise ValueError("fingerprint does not match the stored config")
        return value

    @property
    def datasets(self) -> List[str]:
        return [self.source] + list(self.targets)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(
                f"epoch {record.epoch} does not follow epoch {self.records[-1].epoch}"
            )
        self.records.append(record)
