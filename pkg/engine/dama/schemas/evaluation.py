import csv
import io
from typing import List, Optional

from pydantic import BaseModel, Field

WER_HEADER = "token-level WER on synthetic tokens (stands in for word-level WER), micro-averaged"


class WerBreakdown(BaseModel):
    """Edit counts of one alignment; wer may exceed 1 when insertions dominate."""

    substitutions: int = Field(..., ge=0)
    deletions: int = Field(..., ge=0)
    insertions: int = Field(..., ge=0)
    n_ref: int = Field(..., gt=0)

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.edits / self.n_ref


class LanguageWer(BaseModel):
    language: str
    n_utts: int
    n_ref_tokens: int
    substitutions: int
    deletions: int
    insertions: int
    wer: float


class EvaluationReport(BaseModel):
    header: str = WER_HEADER
    per_language: List[LanguageWer]
    aggregate: LanguageWer

    def to_csv(self) -> str:
        buffer = io.StringIO()
        buffer.write("language,n_utts,n_ref_tokens,substitutions,deletions,insertions,wer\n")
        for row in self.per_language + [self.aggregate]:
            buffer.write(
                f"{row.language},{row.n_utts},{row.n_ref_tokens},{row.substitutions},"
                f"{row.deletions},{row.insertions},{row.wer:.6f}\n"
            )
        return buffer.getvalue()


class ForgettingRow(BaseModel):
    mode: str
    seen_wer_base: float
    seen_wer_adapted: float
    seen_wer_detached: Optional[float] = None
    target_wer_adapted: Optional[float] = None


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def _csv(header: List[str], rows: List[list]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


class ForgettingReport(BaseModel):
    header: str = WER_HEADER
    rows: List[ForgettingRow]

    def to_csv(self) -> str:
        return _csv(
            ["mode", "seen_wer_base", "seen_wer_adapted", "seen_wer_detached", "target_wer_adapted"],
            [
                [r.mode, _fmt(r.seen_wer_base), _fmt(r.seen_wer_adapted),
                 _fmt(r.seen_wer_detached), _fmt(r.target_wer_adapted)]
                for r in self.rows
            ],
        )


class AblationRow(BaseModel):
    schedule_shape: str
    bpp: bool
    init_mode: str
    trainable_params: int
    ranks: List[int]
    wer: float


class AblationReport(BaseModel):
    header: str = WER_HEADER
    rows: List[AblationRow]

    def to_csv(self) -> str:
        return _csv(
            ["schedule_shape", "bpp", "init_mode", "trainable_params", "ranks", "wer"],
            [
                [r.schedule_shape, "on" if r.bpp else "off", r.init_mode, r.trainable_params,
                 " ".join(str(rank) for rank in r.ranks), _fmt(r.wer)]
                for r in self.rows
            ],
        )


class LowResourceRow(BaseModel):
    mode: str
    fraction: float
    n_train: int
    trainable_params: int
    wer: float


class LowResourceReport(BaseModel):
    header: str = WER_HEADER
    rows: List[LowResourceRow]

    def to_csv(self) -> str:
        return _csv(
            ["mode", "fraction", "n_train", "trainable_params", "wer"],
            [[r.mode, r.fraction, r.n_train, r.trainable_params, _fmt(r.wer)] for r in self.rows],
        )
