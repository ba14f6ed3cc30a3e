import csv
import io
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

from dama.core.exceptions import EvaluationError
from dama.models.corpus import Utterance, batches
from dama.models.transformer import ToyTransformer
from dama.schemas.evaluation import (
    EvaluationReport,
    ForgettingReport,
    ForgettingRow,
    LanguageWer,
    WerBreakdown,
)
from dama.schemas.schedule import AccountingReport, AdaptationConfig, ModelGeometry
from dama.services.schedule_service import ScheduleService

logger = logging.getLogger(__name__)

DECODE_BATCH_SIZE = 32


class EvaluationService:
    """Token error rates, decoding evaluation and the comparison tables."""

    @staticmethod
    def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> WerBreakdown:
        """
        Unit-cost Levenshtein alignment. Among equal-cost alignments the
        backtrace prefers substitution (or match), then insertion, then deletion.
        """
        ref, hyp = list(reference), list(hypothesis)
        if not ref:
            raise EvaluationError("reference must contain at least one token")
        n, m = len(ref), len(hyp)
        cost = [[0] * (m + 1) for _ in range(n + 1)]
        for i in range(n + 1):
            cost[i][0] = i
        for j in range(m + 1):
            cost[0][j] = j
        for i in range(1, n + 1):
            row, prev = cost[i], cost[i - 1]
            for j in range(1, m + 1):
                row[j] = min(
                    prev[j - 1] + (ref[i - 1] != hyp[j - 1]),
                    row[j - 1] + 1,
                    prev[j] + 1,
                )

        subs = dels = ins = 0
        i, j = n, m
        while i > 0 or j > 0:
            if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
                subs += ref[i - 1] != hyp[j - 1]
                i, j = i - 1, j - 1
            elif j > 0 and cost[i][j] == cost[i][j - 1] + 1:
                ins += 1
                j -= 1
            else:
                dels += 1
                i -= 1
        return WerBreakdown(substitutions=subs, deletions=dels, insertions=ins, n_ref=n)

    @staticmethod
    def _row(language: str, items: List[Tuple[int, WerBreakdown]]) -> LanguageWer:
        subs = sum(b.substitutions for _, b in items)
        dels = sum(b.deletions for _, b in items)
        ins = sum(b.insertions for _, b in items)
        n_ref = sum(b.n_ref for _, b in items)
        return LanguageWer(
            language=language,
            n_utts=len(items),
            n_ref_tokens=n_ref,
            substitutions=subs,
            deletions=dels,
            insertions=ins,
            wer=(subs + dels + ins) / n_ref,
        )

    @staticmethod
    def decode_all(model: ToyTransformer, utterances: Sequence[Utterance],
                   max_new_tokens: int) -> List[List[int]]:
        hypotheses: List[List[int]] = []
        for batch in batches(utterances, DECODE_BATCH_SIZE):
            hypotheses.extend(model.greedy_decode(batch, max_new_tokens))
        return hypotheses

    @staticmethod
    def evaluate_model(model: ToyTransformer, utterances: Sequence[Utterance],
                       max_new_tokens: int = 80) -> EvaluationReport:
        """Greedy-decode every utterance; per-language and micro-averaged WER."""
        if not utterances:
            raise EvaluationError("evaluation set is empty")
        hypotheses = EvaluationService.decode_all(model, utterances, max_new_tokens)
        by_language: Dict[int, List[Tuple[int, WerBreakdown]]] = OrderedDict()
        everything = []
        for utt, hyp in zip(utterances, hypotheses):
            item = (utt.index, EvaluationService.wer(utt.tokens.tolist(), hyp))
            by_language.setdefault(utt.lang, []).append(item)
            everything.append(item)
        report = EvaluationReport(
            per_language=[
                EvaluationService._row(f"lang{lang}", by_language[lang]) for lang in sorted(by_language)
            ],
            aggregate=EvaluationService._row("all", everything),
        )
        logger.info(
            f"Evaluated {len(utterances)} utterances: WER {report.aggregate.wer:.4f} "
            f"over {report.aggregate.n_ref_tokens} reference tokens"
        )
        return report

    @staticmethod
    def forgetting_report(
        base: ToyTransformer,
        adapted: Sequence[Tuple[str, ToyTransformer]],
        seen_test: Sequence[Utterance],
        target_test: Optional[Sequence[Utterance]] = None,
        max_new_tokens: int = 80,
    ) -> ForgettingReport:
        """
        Seen-language WER before adaptation, after it and, for adapter modes,
        after detaching the adapters again. fft models have no detach value.
        """
        base_wer = EvaluationService.evaluate_model(base, seen_test, max_new_tokens).aggregate.wer
        rows = []
        for label, model in adapted:
            adapted_wer = EvaluationService.evaluate_model(model, seen_test, max_new_tokens).aggregate.wer
            target_wer = None
            if target_test:
                target_wer = EvaluationService.evaluate_model(
                    model, target_test, max_new_tokens
                ).aggregate.wer
            detached_wer = None
            registry = model.detach_adapters()
            if registry is not None:
                try:
                    detached_wer = EvaluationService.evaluate_model(
                        model, seen_test, max_new_tokens
                    ).aggregate.wer
                finally:
                    model.attach_adapters(registry)
            rows.append(
                ForgettingRow(
                    mode=label,
                    seen_wer_base=base_wer,
                    seen_wer_adapted=adapted_wer,
                    seen_wer_detached=detached_wer,
                    target_wer_adapted=target_wer,
                )
            )
        return ForgettingReport(rows=rows)

    @staticmethod
    def accounting(geom: ModelGeometry, configs: Sequence[AdaptationConfig]) -> List[AccountingReport]:
        return [ScheduleService.accounting_report(config, geom) for config in configs]

    @staticmethod
    def accounting_csv(reports: Sequence[AccountingReport]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["label", "mode", "geometry", "params", "extra_macs_per_token"])
        for report in reports:
            writer.writerow(
                [report.label, report.mode, report.geometry,
                 report.totals.params, report.totals.extra_macs_per_token]
            )
        return buffer.getvalue()
