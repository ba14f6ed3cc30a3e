import logging
import math
from fractions import Fraction
from typing import List, Optional

from pydantic import ValidationError

from dama.core.exceptions import ConfigurationError
from dama.schemas.schedule import (
    AccountingReport,
    AccountingTotals,
    AdaptationConfig,
    AdaptationMode,
    LayerAccounting,
    ModelGeometry,
    RankSchedule,
    Rounding,
    ScheduleShape,
    Segment,
)

logger = logging.getLogger(__name__)

GEOMETRY_DEPENDENT_NOTE = (
    "fft counts only the adapted-site weights of this geometry; "
    "the full base-model count is geometry-dependent"
)


def _round(value: Fraction, policy: Rounding) -> int:
    if policy == Rounding.FLOOR:
        return math.floor(value)
    if policy == Rounding.CEIL:
        return math.ceil(value)
    # Half away from zero; ranks are positive
    return math.floor(value + Fraction(1, 2))


class ScheduleService:
    """Depth-aware rank function and the parameter / MAC accounting built on it."""

    @staticmethod
    def _check_layer(schedule: RankSchedule, l: int):
        if not 1 <= l <= schedule.l_total:
            raise ConfigurationError(f"layer {l} outside 1..{schedule.l_total}")

    @staticmethod
    def segment_of(schedule: RankSchedule, l: int) -> Segment:
        """Early iff l <= l_early, late iff l >= l_late, mid otherwise (1-based)."""
        ScheduleService._check_layer(schedule, l)
        if l <= schedule.l_early:
            return Segment.EARLY
        if l >= schedule.l_late:
            return Segment.LATE
        return Segment.MID

    @staticmethod
    def rank_at(schedule: RankSchedule, l: int) -> int:
        """U-shaped rank: linear ramp down, flat r_low, linear ramp up."""
        segment = ScheduleService.segment_of(schedule, l)
        r_high, r_low = schedule.r_high, schedule.r_low
        span = r_high - r_low
        if segment == Segment.MID:
            return r_low
        if segment == Segment.EARLY:
            if schedule.l_early == 1:
                return r_high
            value = r_high - Fraction(l - 1, schedule.l_early - 1) * span
        else:
            if schedule.l_late == schedule.l_total:
                return r_high
            value = r_low + Fraction(l - schedule.l_late, schedule.l_total - schedule.l_late) * span
        return min(max(_round(value, schedule.rounding), r_low), r_high)

    @staticmethod
    def profile(schedule: RankSchedule) -> List[int]:
        return [ScheduleService.rank_at(schedule, l) for l in range(1, schedule.l_total + 1)]

    @staticmethod
    def aligned_schedule(config: AdaptationConfig, geom: ModelGeometry) -> Optional[RankSchedule]:
        """The config's schedule, checked (dama) or re-sized (other modes) to the geometry."""
        schedule = config.schedule
        if schedule.l_total == geom.layers:
            return schedule
        if config.mode == AdaptationMode.DAMA:
            raise ConfigurationError(
                f"schedule l_total={schedule.l_total} does not match "
                f"{geom.layers} decoder layers of geometry '{geom.name}'"
            )
        try:
            return RankSchedule.model_validate({**schedule.model_dump(), "l_total": geom.layers})
        except ValidationError:
            return None

    @staticmethod
    def ranks(config: AdaptationConfig, geom: ModelGeometry) -> List[int]:
        """Adapter rank per decoder layer (0 for fft)."""
        if config.mode == AdaptationMode.FFT:
            return [0] * geom.layers
        if config.mode == AdaptationMode.LORA_UNIFORM:
            return [config.uniform_rank] * geom.layers
        schedule = ScheduleService.aligned_schedule(config, geom)
        if config.schedule_shape == ScheduleShape.UNIFORM:
            return [config.uniform_rank] * geom.layers
        return ScheduleService.profile(schedule)

    @staticmethod
    def segments(config: AdaptationConfig, geom: ModelGeometry) -> List[Optional[Segment]]:
        schedule = ScheduleService.aligned_schedule(config, geom)
        if schedule is None:
            return [None] * geom.layers
        return [ScheduleService.segment_of(schedule, l) for l in range(1, geom.layers + 1)]

    @staticmethod
    def a_frozen(config: AdaptationConfig, segment: Optional[Segment]) -> bool:
        """Basis-protected projection freezes A in the mid segment only."""
        return config.mode == AdaptationMode.DAMA and config.bpp and segment == Segment.MID

    @staticmethod
    def _layer_params(geom: ModelGeometry, rank: int, frozen_a: bool) -> int:
        return sum(rank * (s.d_out + (0 if frozen_a else s.d_in)) for s in geom.sites)

    @staticmethod
    def trainable_params(config: AdaptationConfig, geom: ModelGeometry) -> int:
        if config.mode == AdaptationMode.FFT:
            if geom.base_param_count is not None:
                return geom.base_param_count
            return geom.site_weight_count
        ranks = ScheduleService.ranks(config, geom)
        segments = ScheduleService.segments(config, geom)
        return sum(
            ScheduleService._layer_params(geom, rank, ScheduleService.a_frozen(config, segment))
            for rank, segment in zip(ranks, segments)
        )

    @staticmethod
    def extra_macs(config: AdaptationConfig, geom: ModelGeometry, tokens: int) -> int:
        """Adapter forward MACs: r (d_in + d_out) per site per token; frozen A still costs."""
        if tokens < 1:
            raise ConfigurationError(f"tokens must be >= 1, got {tokens}")
        if config.mode == AdaptationMode.FFT:
            return 0
        per_token = sum(
            rank * sum(s.d_in + s.d_out for s in geom.sites)
            for rank in ScheduleService.ranks(config, geom)
        )
        return per_token * tokens

    @staticmethod
    def accounting_report(config: AdaptationConfig, geom: ModelGeometry) -> AccountingReport:
        ranks = ScheduleService.ranks(config, geom)
        segments = ScheduleService.segments(config, geom)
        per_layer = []
        for l, (rank, segment) in enumerate(zip(ranks, segments), start=1):
            if config.mode == AdaptationMode.FFT:
                params = sum(s.d_in * s.d_out for s in geom.sites)
            else:
                params = ScheduleService._layer_params(
                    geom, rank, ScheduleService.a_frozen(config, segment)
                )
            per_layer.append(
                LayerAccounting(layer=l, segment=segment, rank=rank, trainable_params=params)
            )

        notes = []
        if config.mode == AdaptationMode.FFT and geom.base_param_count is None:
            notes.append(GEOMETRY_DEPENDENT_NOTE)
        return AccountingReport(
            mode=config.mode.value,
            label=config.label,
            geometry=geom.name,
            per_layer=per_layer,
            totals=AccountingTotals(
                params=ScheduleService.trainable_params(config, geom),
                extra_macs_per_token=ScheduleService.extra_macs(config, geom, 1),
            ),
            notes=notes,
        )
