import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from dama.core.exceptions import ConfigurationError
from dama.models.corpus import Utterance, split_of
from dama.models.transformer import ToyTransformer
from dama.schemas.evaluation import (
    AblationReport,
    AblationRow,
    EvaluationReport,
    LowResourceReport,
    LowResourceRow,
)
from dama.schemas.experiment import ExperimentConfig
from dama.schemas.schedule import (
    AdaptationConfig,
    AdaptationMode,
    InitMode,
    ScheduleShape,
)
from dama.schemas.training import TrainingReport
from dama.services.adapter_service import AdapterService
from dama.services.data_service import DataService
from dama.services.evaluation_service import EvaluationService
from dama.services.schedule_service import ScheduleService
from dama.services.training_service import TrainingService

logger = logging.getLogger(__name__)

DEFAULT_LOWRES_FRACTIONS = (1.0, 0.2, 0.1, 0.05)


@dataclass
class AdaptationRun:
    model: ToyTransformer
    adaptation: AdaptationConfig
    report: TrainingReport
    n_train: int


class ExperimentService:
    """Adapt-and-evaluate workflows shared by the command-line verbs."""

    @staticmethod
    def adapt(
        base: ToyTransformer,
        adaptation: AdaptationConfig,
        corpus: Sequence[Utterance],
        config: ExperimentConfig,
        budget_fraction: Optional[float] = None,
    ) -> AdaptationRun:
        """Copy ``base``, prepare it for ``adaptation`` and train on the corpus' train split."""
        fraction = config.budget_fraction if budget_fraction is None else budget_fraction
        subset = DataService.low_resource_subset(corpus, fraction, config.data.seed)
        train = split_of(subset, "train")
        valid = split_of(subset, "valid")

        model = base.copy()
        AdapterService.inject_adapters(model, adaptation, seed=config.seed)
        report = TrainingService.train_adaptation(model, adaptation, train, valid, config.training)
        return AdaptationRun(model=model, adaptation=adaptation, report=report, n_train=len(train))

    @staticmethod
    def ablation_grid(adaptation: AdaptationConfig) -> List[AdaptationConfig]:
        """
        {uniform, ushape} x {bpp on, off} x {svd, random} DAMA variants. The
        uniform cells use r_high at every layer so that only the per-layer
        ranks separate them from their U-shaped counterparts.
        """
        grid = []
        for shape in (ScheduleShape.UNIFORM, ScheduleShape.USHAPE):
            for bpp in (True, False):
                for init_mode in (InitMode.SVD, InitMode.RANDOM):
                    grid.append(
                        adaptation.model_copy(
                            update={
                                "mode": AdaptationMode.DAMA,
                                "schedule_shape": shape,
                                "bpp": bpp,
                                "init_mode": init_mode,
                                "uniform_rank": adaptation.schedule.r_high,
                            }
                        )
                    )
        return grid

    @staticmethod
    def ablate(
        base: ToyTransformer, corpus: Sequence[Utterance], config: ExperimentConfig
    ) -> AblationReport:
        test = split_of(corpus, "test")
        rows = []
        for cell in ExperimentService.ablation_grid(config.adaptation):
            run = ExperimentService.adapt(base, cell, corpus, config)
            wer = EvaluationService.evaluate_model(run.model, test, config.max_new_tokens).aggregate.wer
            rows.append(
                AblationRow(
                    schedule_shape=cell.schedule_shape.value,
                    bpp=cell.bpp,
                    init_mode=cell.init_mode.value,
                    trainable_params=run.report.trainable_params,
                    ranks=ScheduleService.ranks(cell, run.model.geometry()),
                    wer=wer,
                )
            )
            logger.info(f"Ablation cell {cell.label}: WER {wer:.4f}")
        return AblationReport(rows=rows)

    @staticmethod
    def mode_presets(config: ExperimentConfig, modes: Sequence[str]) -> List[AdaptationConfig]:
        """Named modes resolved against the run's config (its own adaptation for its mode)."""
        l_total = config.model.decoder_layers
        presets = []
        for name in modes:
            try:
                mode = AdaptationMode(name)
            except ValueError:
                raise ConfigurationError(
                    f"unknown adaptation mode '{name}', expected one of {[m.value for m in AdaptationMode]}"
                )
            if mode == config.adaptation.mode:
                presets.append(config.adaptation)
            elif mode == AdaptationMode.FFT:
                presets.append(AdaptationConfig.fft())
            elif mode == AdaptationMode.LORA_UNIFORM:
                presets.append(AdaptationConfig.lora(l_total=l_total))
            else:
                presets.append(AdaptationConfig.dama(l_total=l_total))
        return presets

    @staticmethod
    def low_resource(
        base: ToyTransformer,
        corpus: Sequence[Utterance],
        config: ExperimentConfig,
        fractions: Sequence[float] = DEFAULT_LOWRES_FRACTIONS,
        modes: Sequence[str] = ("lora_uniform", "dama"),
    ) -> LowResourceReport:
        test = split_of(corpus, "test")
        rows = []
        for adaptation in ExperimentService.mode_presets(config, modes):
            for fraction in fractions:
                run = ExperimentService.adapt(base, adaptation, corpus, config, budget_fraction=fraction)
                report: EvaluationReport = EvaluationService.evaluate_model(
                    run.model, test, config.max_new_tokens
                )
                rows.append(
                    LowResourceRow(
                        mode=adaptation.label,
                        fraction=fraction,
                        n_train=run.n_train,
                        trainable_params=run.report.trainable_params,
                        wer=report.aggregate.wer,
                    )
                )
        return LowResourceReport(rows=rows)
