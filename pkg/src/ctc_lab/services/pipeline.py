"""
Experiment engine: vanilla cross-entropy training, the two-stage contrastive
temporal coding schedule and per-epoch temporal evaluation.

Every random draw derives from the master seed and a fixed tag sequence, so
one TrainConfig reproduces one trajectory bit for bit.
"""
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from ..core.config import get_settings
from ..core.errors import DataError, NumericError, TrainingDivergedError
from ..core.metrics import DIVERGENCES, EPOCH_DURATION, EVAL_DURATION, TRAIN_STEPS
from ..models.config import DataSection, LossConfig, StageSection, TrainConfig
from ..models.records import EpochRecord, MiEstimate, Trajectory
from .checkpoint import load_checkpoint, save_checkpoint
from .contrastive import (
    InformationBank,
    MemoryBank,
    StageLoss,
    bank_update,
    cross_entropy,
    snapshot_information_bank,
    stage1_objective,
    stage2_objective,
)
from .datagen import DatasetPair, augment, gen_shared_pair, load_pair
from .evaluation import accuracy, kmeans, linear_probe, nmi, recall_at_1
from .mi_lab import estimate_ity, estimate_ixt
from .numerics import (
    Backbone,
    CosineSchedule,
    LinearHead,
    Params,
    SgdState,
    backward,
    cosine_lr,
    forward,
    init_backbone,
    init_head,
    load_network_parameters,
    mlp_forward,
    network_parameters,
    sgd_step,
)

logger = structlog.get_logger(__name__)

# seed tags
_BACKBONE, _HEAD, _SHUFFLE, _NEGATIVES, _AUGMENT, _KMEANS, _MINE = range(7)


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 32-bit seed for (seed, tags...)."""
    return int(np.random.SeedSequence(seed, spawn_key=tags).generate_state(1)[0])


@dataclass
class ExperimentData:
    source: DatasetPair
    targets: List[DatasetPair]

    def __post_init__(self):
        if not self.targets:
            raise DataError("an experiment needs at least one target dataset")
        dim = self.source.train.feature_dim
        for pair in self.pairs:
            if pair.train.feature_dim != dim or pair.test.feature_dim != dim:
                raise DataError(f"{pair.name} has a different feature count than the source ({dim})")

    @property
    def pairs(self) -> List[DatasetPair]:
        return [self.source, *self.targets]


def load_experiment_data(section: DataSection) -> ExperimentData:
    """File-based datasets when [data] names a source prefix, else a generated pair."""
    if section.source is not None:
        source = load_pair(section.source)
        targets = [load_pair(prefix) for prefix in section.targets]
        return ExperimentData(source=source, targets=targets)
    source, target = gen_shared_pair(section.shared_spec())
    return ExperimentData(source=source, targets=[target])


@dataclass
class EpochStats:
    train_loss: float
    entropy_bound: Optional[float]
    steps: int


@dataclass
class _Network:
    backbone: Backbone
    head: LinearHead
    params: Params = field(init=False)

    def __post_init__(self):
        self.params = network_parameters(self.backbone, self.head)

    def load(self, params: Params) -> None:
        self.params = params
        self.backbone, self.head = load_network_parameters(self.backbone, self.head, params)


def evaluate_epoch(
    backbone: Backbone,
    head: LinearHead,
    data: ExperimentData,
    config: TrainConfig,
    epoch: int,
    stage: int,
    train_loss: Optional[float] = None,
    with_mi: bool = False,
    entropy_bound: Optional[float] = None,
) -> EpochRecord:
    """Measure one epoch: source discriminability, target transfer, optional information plane.

    With `train_loss` unset the source training cross-entropy of the
    network is recorded instead.
    """
    started = time.perf_counter()
    source = data.source
    reps_test, logits_test = forward(backbone, head, source.test.features)
    test_loss, _ = cross_entropy(logits_test, source.test.labels)
    if train_loss is None:
        _, logits_train = forward(backbone, head, source.train.features)
        train_loss, _ = cross_entropy(logits_train, source.train.labels)
    k = min(source.class_count, reps_test.shape[0])
    clusters = kmeans(reps_test, k, seed=derive_seed(config.seed, _KMEANS, epoch))

    probe_config = config.probe_config()
    probe: Dict[str, float] = {}
    test_reps: Dict[str, np.ndarray] = {source.name: reps_test}
    for target in data.targets:
        reps_train, _ = mlp_forward(backbone, target.train.features)
        reps_target, _ = mlp_forward(backbone, target.test.features)
        test_reps[target.name] = reps_target
        probe[target.name] = linear_probe(
            reps_train, target.train.labels, reps_target, target.test.labels, probe_config
        )

    ixt: Dict[str, MiEstimate] = {}
    ity: Dict[str, MiEstimate] = {}
    if with_mi:
        ixt, ity = _information_plane(data, test_reps, config, epoch)

    record = EpochRecord(
        epoch=epoch,
        stage=stage,
        train_loss=train_loss,
        test_loss=test_loss,
        r_at_1=recall_at_1(reps_test, source.test.labels),
        nmi=nmi(clusters.assignments, source.test.labels, config.eval.nmi_average),
        source_accuracy=accuracy(logits_test, source.test.labels),
        probe=probe,
        ixt=ixt,
        ity=ity,
        entropy_bound=entropy_bound,
    )
    EVAL_DURATION.observe(time.perf_counter() - started)
    logger.info(
        "Epoch evaluated",
        epoch=epoch,
        stage=stage,
        train_loss=round(record.train_loss, 6),
        test_loss=round(record.test_loss, 6),
        r_at_1=record.r_at_1,
        nmi=round(record.nmi, 6),
        probe=probe,
    )
    return record


def _information_plane(
    data: ExperimentData, test_reps: Dict[str, np.ndarray], config: TrainConfig, epoch: int
) -> Tuple[Dict[str, MiEstimate], Dict[str, MiEstimate]]:
    jobs: List[Tuple[str, str, Callable[[], MiEstimate]]] = []
    max_samples = config.mi.max_samples
    for index, pair in enumerate(data.pairs):
        split = pair.test
        reps = test_reps[pair.name]
        ixt_seed = derive_seed(config.seed, _MINE, epoch, index, 0)
        ity_seed = derive_seed(config.seed, _MINE, epoch, index, 1)
        jobs.append((pair.name, "ixt", partial(
            estimate_ixt, split.features, reps, config.mine_config("ixt"), ixt_seed, max_samples
        )))
        jobs.append((pair.name, "ity", partial(
            estimate_ity, reps, split.labels, pair.class_count, config.mine_config("ity"), ity_seed,
            max_samples,
        )))

    workers = get_settings().mi_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: job[2](), jobs))
    else:
        results = [job[2]() for job in jobs]

    ixt: Dict[str, MiEstimate] = {}
    ity: Dict[str, MiEstimate] = {}
    for (name, quantity, _), estimate in zip(jobs, results):
        (ixt if quantity == "ixt" else ity)[name] = estimate
    return ixt, ity


class ExperimentRunner:
    """Trains one network under a TrainConfig and records its trajectory."""

    def __init__(self, config: TrainConfig, data: ExperimentData,
                 output_dir: Optional[Union[str, Path]] = None, mode: str = "ctc"):
        self.config = config
        self.data = data
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.mode = mode
        source = data.source
        backbone = init_backbone(
            source.train.feature_dim,
            config.model.hidden_dims,
            config.model.rep_dim,
            derive_seed(config.seed, _BACKBONE),
            config.model.rectify_reps,
        )
        head = init_head(config.model.rep_dim, source.class_count, derive_seed(config.seed, _HEAD))
        self.network = _Network(backbone, head)
        self.trajectory = Trajectory(
            config=config,
            config_fingerprint=config.fingerprint(),
            mode=mode,
            source=source.name,
            targets=[t.name for t in data.targets],
        )
        self.last_checkpoint: Optional[str] = None
        self.information_bank: Optional[InformationBank] = None

    # Schedules

    def steps_per_epoch(self, section: StageSection) -> int:
        return math.ceil(self.data.source.train.size / section.batch_size)

    def _optimizer(self, section: StageSection) -> SgdState:
        return SgdState.for_params(
            self.network.params, section.lr_init, section.momentum, section.weight_decay
        )

    def _schedule(self, section: StageSection, epochs: int) -> CosineSchedule:
        return CosineSchedule(
            lr_init=section.lr_init,
            lr_min=section.lr_min,
            total_steps=epochs * self.steps_per_epoch(section),
        )

    # Epochs

    def _train_epoch(
        self,
        epoch: int,
        stage: int,
        section: StageSection,
        objective: Callable[..., StageLoss],
        optimizer: SgdState,
        schedule: CosineSchedule,
        first_step: int,
        memory_bank: Optional[MemoryBank] = None,
    ) -> EpochStats:
        train = self.data.source.train
        seed = self.config.seed
        strength = self.config.data.augment_strength
        order = np.random.default_rng(derive_seed(seed, _SHUFFLE, epoch)).permutation(train.size)
        negatives_rng = np.random.default_rng(derive_seed(seed, _NEGATIVES, epoch))
        batch = section.batch_size
        losses: List[float] = []
        bounds: List[float] = []
        step = first_step
        with EPOCH_DURATION.labels(stage=str(stage)).time():
            for index, start in enumerate(range(0, train.size, batch)):
                ids = order[start:start + batch]
                xb = train.features[ids]
                if strength > 0:
                    xb = augment(xb, strength, derive_seed(seed, _AUGMENT, epoch, index))
                try:
                    reps, logits = forward(self.network.backbone, self.network.head, xb)
                    loss = objective(reps, logits, train.labels[ids], ids, negatives_rng)
                    if not math.isfinite(loss.total):
                        raise NumericError(f"loss is {loss.total}")
                    grads = backward(self.network.backbone, self.network.head, xb,
                                     (loss.grad_reps, loss.grad_logits))
                    optimizer.learning_rate = cosine_lr(schedule, step)
                    self.network.load(sgd_step(self.network.params, grads, optimizer))
                    if memory_bank is not None and loss.normalized_reps is not None:
                        bank_update(memory_bank, ids, loss.normalized_reps)
                except NumericError as exc:
                    DIVERGENCES.inc()
                    logger.error("Training diverged", epoch=epoch, stage=stage, error=str(exc))
                    raise TrainingDivergedError(str(exc), epoch, self.last_checkpoint) from exc
                losses.append(loss.total)
                if loss.entropy_bound is not None:
                    bounds.append(loss.entropy_bound)
                step += 1
        TRAIN_STEPS.labels(stage=str(stage)).inc(step - first_step)
        return EpochStats(
            train_loss=float(np.mean(losses)),
            entropy_bound=float(np.mean(bounds)) if bounds else None,
            steps=step - first_step,
        )

    def _should_evaluate(self, epoch: int, last_epoch: int) -> bool:
        return epoch % self.config.eval_every == 0 or epoch == last_epoch

    def _should_estimate_mi(self, epoch: int, last_epoch: int) -> bool:
        mi = self.config.mi
        return mi.enabled and (epoch % mi.every == 0 or epoch == last_epoch)

    def _record(self, epoch: int, stage: int, last_epoch: int,
                stats: Optional[EpochStats] = None) -> None:
        if not self._should_evaluate(epoch, last_epoch):
            return
        record = evaluate_epoch(
            self.network.backbone,
            self.network.head,
            self.data,
            self.config,
            epoch,
            stage,
            train_loss=stats.train_loss if stats is not None else None,
            with_mi=self._should_estimate_mi(epoch, last_epoch),
            entropy_bound=stats.entropy_bound if stats is not None else None,
        )
        self.trajectory.append(record)
        self._checkpoint(epoch, stage, record)

    def _checkpoint(self, epoch: int, stage: int, record: EpochRecord) -> None:
        if self.output_dir is None or not self.config.eval.checkpoints:
            return
        relative = f"checkpoints/epoch_{epoch:04d}.ckpt"
        save_checkpoint(
            self.output_dir / relative,
            self.network.params,
            epoch,
            stage,
            rectify_reps=self.network.backbone.activate_output,
            extra={
                "train_loss": record.train_loss,
                "entropy_bound": record.entropy_bound,
                "mi": bool(record.ixt),
                "fingerprint": self.trajectory.config_fingerprint,
            },
        )
        self.last_checkpoint = relative
        self.trajectory.checkpoints[epoch] = relative

    # Runs

    def _run_stage(
        self,
        stage: int,
        section: StageSection,
        first_epoch: int,
        epochs: int,
        last_epoch: int,
        objective: Callable[..., StageLoss],
        optimizer: SgdState,
        memory_bank: Optional[MemoryBank] = None,
        schedule_epochs: Optional[int] = None,
    ) -> None:
        schedule = self._schedule(section, schedule_epochs if schedule_epochs is not None else section.epochs)
        step = 0
        for offset in range(epochs):
            epoch = first_epoch + offset
            stats = self._train_epoch(
                epoch, stage, section, objective, optimizer, schedule, step, memory_bank
            )
            step += stats.steps
            logger.debug("Epoch trained", epoch=epoch, stage=stage, train_loss=stats.train_loss)
            self._record(epoch, stage, last_epoch, stats)

    def train_vanilla(self) -> Trajectory:
        config = self.config
        epochs = config.stage1_epochs + config.stage2_epochs
        logger.info("Starting vanilla training", epochs=epochs, seed=config.seed)
        self._record(0, 1, epochs)
        labels_only = LossConfig(alpha=0.0, beta=0.0)

        def objective(reps, logits, labels, ids, rng):
            return stage1_objective(reps, logits, labels, ids, None, labels_only, rng)

        self._run_stage(
            1, config.stage1, 1, epochs, epochs, objective, self._optimizer(config.stage1),
            schedule_epochs=config.stage1.epochs + config.stage2.epochs,
        )
        return self.trajectory

    def train_ctc(self) -> Trajectory:
        config = self.config
        loss_config = config.loss_config()
        stage1_epochs, stage2_epochs = config.stage1_epochs, config.stage2_epochs
        last_epoch = stage1_epochs + stage2_epochs
        logger.info(
            "Starting CTC training",
            stage1_epochs=stage1_epochs,
            stage2_epochs=stage2_epochs,
            alpha=loss_config.alpha,
            beta=loss_config.beta,
            seed=config.seed,
        )
        self._record(0, 1, last_epoch)

        train = self.data.source.train
        memory_bank = None
        if loss_config.alpha > 0:
            reps, _ = mlp_forward(self.network.backbone, train.features)
            memory_bank = MemoryBank.from_representations(reps, config.stage1.bank_momentum)

        def stage1(reps, logits, labels, ids, rng):
            return stage1_objective(reps, logits, labels, ids, memory_bank, loss_config, rng)

        optimizer = self._optimizer(config.stage1)
        self._run_stage(1, config.stage1, 1, stage1_epochs, last_epoch, stage1, optimizer, memory_bank)

        if stage2_epochs == 0:
            return self.trajectory

        info_bank = snapshot_information_bank(self.network.backbone, train.features)
        self.information_bank = info_bank
        self.trajectory.information_bank_digest = info_bank.digest

        def stage2(reps, logits, labels, ids, rng):
            return stage2_objective(reps, logits, labels, ids, info_bank, loss_config, rng)

        stage2_section = config.stage2
        if stage2_section.reset_optimizer:
            optimizer = self._optimizer(stage2_section)
        else:
            optimizer.momentum = stage2_section.momentum
            optimizer.weight_decay = stage2_section.weight_decay
        self._run_stage(2, stage2_section, stage1_epochs + 1, stage2_epochs, last_epoch, stage2, optimizer)
        info_bank.verify()
        logger.info("CTC training finished", epochs=last_epoch, digest=info_bank.digest[:12])
        return self.trajectory


def train_vanilla(config: TrainConfig, data: ExperimentData,
                  output_dir: Optional[Union[str, Path]] = None) -> Trajectory:
    """Cross-entropy-only training over stage1 + stage2 epochs with one cosine schedule."""
    return ExperimentRunner(config, data, output_dir, mode="vanilla").train_vanilla()


def train_ctc(config: TrainConfig, data: ExperimentData,
              output_dir: Optional[Union[str, Path]] = None) -> Trajectory:
    """Information aggregation stage, information-bank snapshot, information revitalization stage."""
    return ExperimentRunner(config, data, output_dir, mode="ctc").train_ctc()


def evaluate_checkpoint(path: Union[str, Path], data: ExperimentData, config: TrainConfig) -> EpochRecord:
    """Re-run the evaluation of a saved epoch from its checkpoint."""
    checkpoint = load_checkpoint(path)
    backbone, head = checkpoint.network()
    return evaluate_epoch(
        backbone,
        head,
        data,
        config,
        checkpoint.epoch,
        checkpoint.stage,
        train_loss=checkpoint.extra.get("train_loss"),
        with_mi=bool(checkpoint.extra.get("mi", False)),
        entropy_bound=checkpoint.extra.get("entropy_bound"),
    )
