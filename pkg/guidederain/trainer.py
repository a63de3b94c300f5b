"""
Training loop and held-out evaluation.

Shared by the train and ablate commands. A run is fully determined by its
RunConfig: parameter initialization, batch order and crop windows all
derive from the seed.
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple
import logging

import numpy as np

from .checkpoint import Checkpoint, check_mode, save_checkpoint
from .config import ConfigError, RunConfig
from .data import DatasetError, batch_iter, dataset_scan, load_dataset, synthetic_dataset
from .exporter import TrainingLogExporter
from .loss import LossWeights, compute_losses
from .metrics import image_metrics
from .models import EpochRecord, LossBreakdown, MetricReport, ModelOutputs, RainPair, TrainingSummary
from .network import DerainNetwork
from .optim import AdamState, adam_step, lr_at
from .tensor import Tape, Tensor


logger = logging.getLogger(__name__)

LOG_NAME = "loss_log.csv"
FINAL_CHECKPOINT = "model.ckpt"


def prepare_pairs(config: RunConfig) -> List[RainPair]:
    """
    Load or synthesize the pairs a run trains on.

    Raises:
        DatasetError: If no data source is configured or the dataset is invalid
    """
    if config.dataset:
        paths = dataset_scan(config.dataset)
        return load_dataset(paths, workers=config.workers)
    if config.synthetic:
        logger.info(
            f"Synthesizing {config.synthetic_count} rain pairs of "
            f"{config.synthetic_size}x{config.synthetic_size} (seed {config.seed})"
        )
        return synthetic_dataset(
            config.synthetic_count, config.synthetic_size, config.rain_params(), config.seed
        )
    raise DatasetError("No training data: pass --dataset <dir> or --synthetic")


def split_holdout(
    pairs: Sequence[RainPair],
    fraction: float,
    seed: int,
) -> Tuple[List[RainPair], List[RainPair]]:
    """
    Deterministically split pairs into (train, held_out).

    At least one pair always stays in the training split.
    """
    n_held = int(round(len(pairs) * fraction))
    n_held = min(n_held, len(pairs) - 1)
    if n_held <= 0:
        return list(pairs), []
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(pairs))
    held = sorted(order[:n_held])
    train = sorted(order[n_held:])
    return [pairs[i] for i in train], [pairs[i] for i in held]


def clamp_unit(t: Tensor) -> Tensor:
    return Tensor(np.clip(t.data, 0.0, 1.0))


def mean_abs_error(network: DerainNetwork, params, pairs: Sequence[RainPair]) -> float:
    """Mean |B^ - B| of the clamped final output; comparable across topologies."""
    errors = [
        float(np.mean(np.abs(clamp_unit(network.infer(pair.o, params).final).data - pair.b.data)))
        for pair in pairs
    ]
    return float(np.mean(errors))


def evaluate_pairs(network: DerainNetwork, params, pairs: Sequence[RainPair]) -> MetricReport:
    """PSNR/SSIM of the clamped final output against B for every pair."""
    report = MetricReport()
    for pair in pairs:
        outputs = network.infer(pair.o, params)
        residual = None
        if outputs.rain_hat is not None and outputs.free_hat is not None:
            residual = float(np.mean(np.abs(outputs.free_hat.data + outputs.rain_hat.data - pair.o.data)))
        report.rows.append(image_metrics(pair.name, clamp_unit(outputs.final), pair.b, residual))
    return report


class Trainer:
    """
    Runs the seeded training loop for one configuration.

    Each step: bind parameters to a fresh tape, forward under the ablation
    mode, compute the loss breakdown, backpropagate and take one ADAM step
    at the learning rate of the current epoch.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.network = DerainNetwork(config.model_config())
        self.weights: LossWeights = config.loss_weights()
        self.schedule = config.schedule()
        self.params = self.network.init_params(config.seed)
        self.state = AdamState.for_params(self.params)
        self.start_epoch = 0
        self.records: List[EpochRecord] = []

    @property
    def parameter_count(self) -> int:
        return self.params.count()

    def resume(self, checkpoint: Checkpoint) -> None:
        """
        Continue from a saved checkpoint's parameters and optimizer state.

        Raises:
            CheckpointError: If the checkpoint was trained under another mode
        """
        check_mode(checkpoint, self.network.mode)
        self.params = checkpoint.params
        self.state = checkpoint.state or AdamState.for_params(self.params)
        self.start_epoch = int(checkpoint.extra.get("epoch", 0))
        self.records = [
            EpochRecord(**row)
            for row in checkpoint.extra.get("history", [])
            if int(row["epoch"]) < self.start_epoch
        ]
        logger.info(f"Resuming {self.network.mode.label} from epoch {self.start_epoch}")

    def validate(self, pairs: Sequence[RainPair]) -> None:
        """
        Check the data against the configuration before any training work.

        Raises:
            DatasetError: If there are no pairs
            ConfigError: If the crop does not fit the images or the network
        """
        if not pairs:
            raise DatasetError("No training pairs")
        smallest = min(min(p.shape[2], p.shape[3]) for p in pairs)
        if self.config.crop > smallest:
            raise ConfigError(f"crop {self.config.crop} exceeds the smallest image side {smallest}")
        multiple = self.network.config.spatial_multiple
        if self.config.crop % multiple:
            raise ConfigError(
                f"crop {self.config.crop} must be a multiple of {multiple} for this architecture"
            )
        if self.start_epoch >= self.schedule.total_epochs:
            raise ConfigError(
                f"checkpoint is at epoch {self.start_epoch}; nothing left of {self.schedule.total_epochs} epochs"
            )

    def train_step(self, batch: RainPair, lr: float) -> LossBreakdown:
        tape = Tape()
        bound = self.params.bind(tape)
        outputs: ModelOutputs = self.network.forward(batch.o, bound)
        losses = compute_losses(outputs, batch, self.weights, self.network.mode)
        tape_grads = tape.backward(losses.total_tensor)
        grads = self.params.gradients(tape_grads, bound)
        adam_step(self.params, grads, self.state, lr)
        return losses

    def run_epoch(self, pairs: Sequence[RainPair], epoch: int) -> EpochRecord:
        lr = lr_at(self.schedule, epoch)
        breakdowns: List[LossBreakdown] = []
        for index, batch in enumerate(batch_iter(pairs, self.config.batch, self.config.crop, self.config.seed, epoch)):
            losses = self.train_step(batch, lr)
            breakdowns.append(losses)
            logger.debug(f"epoch {epoch} batch {index}: total {losses.total:.6f}")

        means = {
            key: float(np.mean([getattr(b, key) for b in breakdowns]))
            for key in ("guide", "rain", "rain_free", "physical")
        }
        effective = self.weights.for_mode(self.network.mode)
        return EpochRecord(
            epoch=epoch,
            lr=lr,
            total=effective.combine(**means),
            batches=len(breakdowns),
            **means,
        )

    def _save(self, path: Path, epoch: int) -> Path:
        return save_checkpoint(
            path,
            self.network.config,
            self.params,
            self.state,
            extra={
                "epoch": epoch,
                "seed": self.config.seed,
                "mode": self.network.mode.label,
                "history": [asdict(record) for record in self.records],
            },
        )

    def fit(
        self,
        pairs: Sequence[RainPair],
        out_dir: Optional[str] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    ) -> TrainingSummary:
        """
        Train for the configured number of epochs.

        With an output directory, the loss log is rewritten after every
        epoch, periodic checkpoints are written every ``checkpoint_every``
        epochs and the final parameters go to ``model.ckpt``.

        Args:
            pairs: Training pairs
            out_dir: Output directory, or None to keep everything in memory
            on_epoch: Optional callback per finished epoch

        Returns:
            TrainingSummary of the run
        """
        self.validate(pairs)
        total_epochs = self.schedule.total_epochs
        label = self.network.mode.label
        logger.info(
            f"Training {label} ({self.parameter_count} parameters) on {len(pairs)} pairs "
            f"for {total_epochs - self.start_epoch} epochs"
        )

        out = Path(out_dir) if out_dir else None
        log_path = out / LOG_NAME if out else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        exporter = TrainingLogExporter()

        for epoch in range(self.start_epoch, total_epochs):
            record = self.run_epoch(pairs, epoch)
            self.records.append(record)
            logger.info(
                f"Epoch {epoch + 1}/{total_epochs}: total {record.total:.6f} "
                f"(guide {record.guide:.5f}, rain {record.rain:.5f}, "
                f"rain_free {record.rain_free:.5f}, physical {record.physical:.5f}) lr {record.lr:g}"
            )
            if out:
                exporter.export(self.records, str(log_path))
                if (epoch + 1) % self.config.checkpoint_every == 0 and epoch + 1 < total_epochs:
                    self._save(out / f"checkpoint_epoch{epoch + 1:04d}.ckpt", epoch + 1)
            if on_epoch:
                on_epoch(record)

        checkpoint_path = self._save(out / FINAL_CHECKPOINT, total_epochs) if out else None
        return TrainingSummary(
            mode_label=label,
            epochs=len(self.records),
            parameter_count=self.parameter_count,
            first_total=self.records[0].total,
            final_total=self.records[-1].total,
            checkpoint_path=str(checkpoint_path) if checkpoint_path else "",
            log_path=str(log_path) if log_path else "",
            records=list(self.records),
        )

    def evaluate(self, pairs: Sequence[RainPair]) -> MetricReport:
        return evaluate_pairs(self.network, self.params, pairs)

    def training_error(self, pairs: Sequence[RainPair]) -> float:
        return mean_abs_error(self.network, self.params, pairs)
