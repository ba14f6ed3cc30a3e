import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dama.core.exceptions import ConfigurationError, NonFiniteError, ShapeMismatchError
from dama.models.corpus import Utterance, batches
from dama.models.transformer import ToyTransformer
from dama.numcore import GradientContext, ParameterStore, Rng, clip_grad_norm
from dama.schemas.schedule import AdaptationConfig, AdaptationMode
from dama.schemas.training import (
    ADAPTER_DEFAULT_LR,
    FFT_DEFAULT_LR,
    PRETRAIN_DEFAULT_LR,
    EpochRecord,
    TrainingConfig,
    TrainingReport,
)
from dama.services.schedule_service import ScheduleService

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    learning_rate: float
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class NewBobState:
    learning_rate: float
    previous: Optional[float] = None
    threshold: float = 0.0025
    factor: float = 0.8


class TrainingService:
    """Optimizer, learning-rate annealing and the training loops."""

    @staticmethod
    def adamw_step(params: ParameterStore, grads: Dict[str, np.ndarray], state: AdamWState) -> AdamWState:
        """
        One decoupled-weight-decay Adam update, in place.

        Parameters are updated in place so that arrays shared with adapters
        stay shared. Frozen parameters are skipped even when a gradient is given.
        """
        for name in sorted(grads):
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteError(f"gradient of '{name}' is not finite at step {state.step + 1}")

        state.step += 1
        beta1, beta2 = state.betas
        lr = state.learning_rate
        correction1 = 1.0 - beta1**state.step
        correction2 = 1.0 - beta2**state.step
        for name in sorted(grads):
            param = params[name]
            if not param.trainable:
                continue
            grad = grads[name]
            if grad.shape != param.value.shape:
                raise ShapeMismatchError(
                    f"gradient of '{name}' has shape {grad.shape}, parameter is {param.value.shape}"
                )
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(param.value)
                v = np.zeros_like(param.value)
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            state.m[name], state.v[name] = m, v
            if state.weight_decay:
                param.value *= 1.0 - lr * state.weight_decay
            param.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        return state

    @staticmethod
    def newbob_update(state: NewBobState, metric: float) -> NewBobState:
        """Anneal when the relative validation improvement falls below the threshold."""
        if not np.isfinite(metric):
            raise NonFiniteError(f"validation metric is not finite ({metric})")
        if state.previous is None:
            return replace(state, previous=metric)
        improvement = (state.previous - metric) / max(abs(state.previous), 1e-12)
        learning_rate = state.learning_rate
        if improvement < state.threshold:
            learning_rate = state.learning_rate * state.factor
            logger.info(
                f"NewBob: relative improvement {improvement:.5f} < {state.threshold}, "
                f"learning rate {state.learning_rate:.3g} -> {learning_rate:.3g}"
            )
        return replace(state, learning_rate=learning_rate, previous=metric)

    @staticmethod
    def evaluate_loss(model: ToyTransformer, utterances: Sequence[Utterance], batch_size: int) -> Optional[float]:
        """Token-weighted mean cross-entropy over ``utterances`` (None when empty)."""
        if not utterances:
            return None
        total, count = 0.0, 0
        for batch in batches(utterances, batch_size):
            ctx = GradientContext(model.params, grad_enabled=False)
            n_tokens = int(np.sum(batch.token_lengths + 1))
            total += float(model.loss(ctx, batch).value) * n_tokens
            count += n_tokens
        return total / count

    @staticmethod
    def fit(
        model: ToyTransformer,
        train: Sequence[Utterance],
        valid: Sequence[Utterance],
        training: TrainingConfig,
        learning_rate: float,
    ) -> Tuple[List[EpochRecord], int]:
        """Shuffled mini-batch AdamW with clipping; NewBob on per-epoch validation loss."""
        if training.epochs > 0 and not train:
            raise ConfigurationError("training set is empty")
        adam = AdamWState(
            learning_rate=learning_rate,
            betas=tuple(training.betas),
            eps=training.eps,
            weight_decay=training.weight_decay,
        )
        newbob = NewBobState(
            learning_rate=learning_rate,
            threshold=training.newbob_threshold,
            factor=training.newbob_factor,
        )
        rng = Rng(training.seed)
        records: List[EpochRecord] = []
        steps = 0
        for epoch in range(1, training.epochs + 1):
            order = rng.spawn(epoch).permutation(len(train))
            epoch_lr = newbob.learning_rate
            adam.learning_rate = epoch_lr
            losses = []
            for batch in batches(train, training.batch_size, order):
                if training.max_steps is not None and steps >= training.max_steps:
                    break
                ctx = GradientContext(model.params)
                loss = model.loss(ctx, batch)
                grads, _ = clip_grad_norm(ctx.backward(loss), training.max_grad_norm)
                TrainingService.adamw_step(model.params, grads, adam)
                losses.append(float(loss.value))
                steps += 1

            valid_loss = TrainingService.evaluate_loss(model, valid, training.valid_batch_size)
            if valid_loss is not None:
                newbob = TrainingService.newbob_update(newbob, valid_loss)
            train_loss = float(np.mean(losses)) if losses else None
            records.append(
                EpochRecord(
                    epoch=epoch,
                    steps=len(losses),
                    train_loss=train_loss,
                    valid_loss=valid_loss,
                    learning_rate=epoch_lr,
                )
            )
            logger.info(
                f"Epoch {epoch}/{training.epochs}: train loss {train_loss}, "
                f"valid loss {valid_loss if valid_loss is None else round(valid_loss, 4)}, "
                f"lr {epoch_lr:.3g}, {len(losses)} steps"
            )
            if training.max_steps is not None and steps >= training.max_steps:
                break
        return records, steps

    @staticmethod
    def _check_ready(model: ToyTransformer, config: AdaptationConfig) -> int:
        """Trainable count of a model prepared for ``config``; rejects mismatches."""
        expected = ScheduleService.trainable_params(config, model.geometry())
        if config.mode == AdaptationMode.FFT:
            if model.adapters is not None:
                raise ConfigurationError("fft training requires a model without adapters")
        elif model.adapters is None:
            raise ConfigurationError(f"{config.label} training requires injected adapters")
        elif model.adapters.label != config.label:
            raise ConfigurationError(
                f"attached adapters are '{model.adapters.label}', config is '{config.label}'"
            )
        actual = model.params.count(trainable_only=True)
        if actual != expected:
            raise ConfigurationError(
                f"model has {actual} trainable parameters, {config.label} expects {expected}"
            )
        return actual

    @staticmethod
    def train_adaptation(
        model: ToyTransformer,
        config: AdaptationConfig,
        train: Sequence[Utterance],
        valid: Sequence[Utterance],
        training: TrainingConfig,
    ) -> TrainingReport:
        trainable = TrainingService._check_ready(model, config)
        if training.learning_rate is not None:
            learning_rate, source = training.learning_rate, "configured"
        elif config.mode == AdaptationMode.FFT:
            learning_rate, source = FFT_DEFAULT_LR, "artifact default for fft"
        else:
            learning_rate, source = ADAPTER_DEFAULT_LR, "artifact default for adapter modes"

        logger.info(
            f"Adapting with {config.label}: {trainable} trainable of {model.base_param_count} "
            f"base parameters, lr {learning_rate:.3g} ({source})"
        )
        started = time.perf_counter()
        records, steps = TrainingService.fit(model, train, valid, training, learning_rate)
        return TrainingReport(
            mode=config.mode.value,
            label=config.label,
            epochs=records,
            total_steps=steps,
            trainable_params=trainable,
            base_params=model.base_param_count,
            trainable_ratio=trainable / model.base_param_count,
            initial_learning_rate=learning_rate,
            learning_rate_source=source,
            wall_time_seconds=time.perf_counter() - started,
        )

    @staticmethod
    def pretrain(
        model: ToyTransformer,
        train: Sequence[Utterance],
        valid: Sequence[Utterance],
        training: TrainingConfig,
    ) -> TrainingReport:
        """Train every base parameter on the seen languages."""
        if model.adapters is not None:
            raise ConfigurationError("pretraining requires a model without adapters")
        model.set_base_trainable(True)
        learning_rate = training.learning_rate or PRETRAIN_DEFAULT_LR
        started = time.perf_counter()
        records, steps = TrainingService.fit(model, train, valid, training, learning_rate)
        return TrainingReport(
            mode="pretrain",
            label="pretrain",
            epochs=records,
            total_steps=steps,
            trainable_params=model.base_param_count,
            base_params=model.base_param_count,
            trainable_ratio=1.0,
            initial_learning_rate=learning_rate,
            learning_rate_source="configured" if training.learning_rate else "artifact default",
            wall_time_seconds=time.perf_counter() - started,
        )
