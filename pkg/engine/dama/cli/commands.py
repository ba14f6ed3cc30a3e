"""
Command implementations behind the ``dama`` verbs.

Every command takes a resolved ``ExperimentConfig`` plus its input paths,
writes its artifacts and the resolved config into the output directory and
returns what it wrote. Inputs are only ever read.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dama.core.config import settings
from dama.core.exceptions import ConfigurationError, DataError
from dama.models.corpus import Utterance, split_of
from dama.models.transformer import ToyTransformer
from dama.schemas.data import CorpusManifest
from dama.schemas.experiment import ExperimentConfig
from dama.schemas.schedule import AdaptationConfig, AdaptationMode, ModelGeometry
from dama.services.checkpoint_service import CheckpointService
from dama.services.data_service import DataService
from dama.services.evaluation_service import EvaluationService
from dama.services.experiment_service import DEFAULT_LOWRES_FRACTIONS, ExperimentService
from dama.services.probe_service import ProbeService
from dama.services.schedule_service import ScheduleService
from dama.services.training_service import TrainingService

logger = logging.getLogger(__name__)

SEEN_FILE = "seen.ndjson"
UNSEEN_FILE = "unseen.ndjson"
MANIFEST_FILE = "languages.json"
GROUPS = ("seen", "unseen", "all")


def output_dir(config: ExperimentConfig, out: Optional[str] = None) -> Path:
    path = settings.resolve_output(out or config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    config.write_resolved(path)
    return path


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_group(corpus_dir: Path, group: str) -> List[Utterance]:
    if group not in GROUPS:
        raise ConfigurationError(f"unknown language group '{group}', expected one of {GROUPS}")
    corpus_dir = Path(corpus_dir)
    utterances: List[Utterance] = []
    if group in ("seen", "all"):
        utterances += DataService.load_corpus(corpus_dir / SEEN_FILE)
    if group in ("unseen", "all"):
        utterances += DataService.load_corpus(corpus_dir / UNSEEN_FILE)
    if not utterances:
        raise DataError(f"no utterances for group '{group}' in {corpus_dir}")
    return utterances


def _check_model(model: ToyTransformer, config: ExperimentConfig):
    if model.config != config.model:
        logger.warning("Checkpoint model config differs from the run config; using the checkpoint's")


def cmd_generate(config: ExperimentConfig, out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    languages, seen, unseen = DataService.build(config.data)
    manifest: CorpusManifest = DataService.manifest(config.data, seen, unseen)
    return {
        "seen": DataService.save_corpus(target / SEEN_FILE, seen),
        "unseen": DataService.save_corpus(target / UNSEEN_FILE, unseen),
        "manifest": _write_json(target / MANIFEST_FILE, manifest.model_dump(mode="json")),
    }


def cmd_pretrain(config: ExperimentConfig, corpus_dir: Path, out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    seen = load_group(corpus_dir, "seen")
    model = ToyTransformer(config.model)
    report = TrainingService.pretrain(
        model, split_of(seen, "train"), split_of(seen, "valid"), config.pretrain
    )
    checkpoint = CheckpointService.save(target / "base.ckpt", model, metadata={"kind": "base"})
    report = report.model_copy(update={"checkpoint_path": checkpoint.name})
    return {
        "checkpoint": checkpoint,
        "report": _write_json(target / "training_report.json", report.model_dump(mode="json")),
        "timing": _write_json(target / "timing.json", {"wall_time_seconds": report.wall_time_seconds}),
    }


def cmd_probe(config: ExperimentConfig, checkpoint_path: Path, corpus_dir: Path,
              group: str = "all", out: Optional[str] = None) -> Dict[str, Path]:
    """Per-layer probe profile of a base or adapted checkpoint (adapters applied)."""
    target = output_dir(config, out)
    model = CheckpointService.load(checkpoint_path).model
    before = model.params.snapshot()
    result = ProbeService.probe_profile(model, load_group(corpus_dir, group), config.probe)
    after = model.params.snapshot()
    if any(not (before[name] == after[name]).all() for name in before):
        raise ConfigurationError("probing modified backbone parameters")
    csv_path = target / "probe.csv"
    csv_path.write_text(result.to_csv())
    return {"csv": csv_path, "json": _write_json(target / "probe.json", result.model_dump(mode="json"))}


def cmd_adapt(config: ExperimentConfig, checkpoint_path: Path, corpus_dir: Path,
              budget_fraction: Optional[float] = None, out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    base = CheckpointService.load(checkpoint_path).model
    _check_model(base, config)
    unseen = load_group(corpus_dir, "unseen")
    run = ExperimentService.adapt(base, config.adaptation, unseen, config, budget_fraction)
    checkpoint = CheckpointService.save(
        target / "adapted.ckpt",
        run.model,
        adaptation=config.adaptation,
        metadata={"kind": "adapted", "base": Path(checkpoint_path).name, "n_train": run.n_train},
    )
    report = run.report.model_copy(update={"checkpoint_path": checkpoint.name})
    accounting = ScheduleService.accounting_report(config.adaptation, run.model.geometry())
    return {
        "checkpoint": checkpoint,
        "report": _write_json(target / "training_report.json", report.model_dump(mode="json")),
        "timing": _write_json(target / "timing.json", {"wall_time_seconds": report.wall_time_seconds}),
        "accounting": _write_json(target / "accounting.json", accounting.model_dump(mode="json")),
    }


def cmd_eval(config: ExperimentConfig, checkpoint_path: Path, corpus_dir: Path,
             group: str = "unseen", out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    model = CheckpointService.load(checkpoint_path).model
    test = split_of(load_group(corpus_dir, group), "test")
    report = EvaluationService.evaluate_model(model, test, config.max_new_tokens)
    csv_path = target / "eval.csv"
    csv_path.write_text(report.to_csv())
    return {"csv": csv_path, "json": _write_json(target / "eval.json", report.model_dump(mode="json"))}


def cmd_forget(config: ExperimentConfig, base_path: Path, adapted_paths: Sequence[Path],
               corpus_dir: Path, out: Optional[str] = None) -> Dict[str, Path]:
    """Seen-language WER of the base model, each adapted model, and each detached one."""
    target = output_dir(config, out)
    base = CheckpointService.load(base_path).model
    adapted = []
    for path in adapted_paths:
        checkpoint = CheckpointService.load(path)
        label = checkpoint.adaptation.label if checkpoint.adaptation else Path(path).stem
        adapted.append((label, checkpoint.model))
    seen_test = split_of(load_group(corpus_dir, "seen"), "test")
    unseen_test = split_of(load_group(corpus_dir, "unseen"), "test")
    report = EvaluationService.forgetting_report(
        base, adapted, seen_test, unseen_test, config.max_new_tokens
    )
    csv_path = target / "forgetting.csv"
    csv_path.write_text(report.to_csv())
    return {"csv": csv_path, "json": _write_json(target / "forgetting.json", report.model_dump(mode="json"))}


def count_configs(config: ExperimentConfig, geom: ModelGeometry) -> List[AdaptationConfig]:
    """fft, uniform LoRA (r=64) and the run's DAMA settings sized to ``geom``."""
    dama = config.adaptation
    if dama.mode != AdaptationMode.DAMA:
        dama = AdaptationConfig.dama(l_total=geom.layers)
    elif dama.schedule.l_total != geom.layers:
        dama = dama.model_copy(
            update={"schedule": dama.schedule.model_validate(
                {**dama.schedule.model_dump(), "l_total": geom.layers}
            )}
        )
    return [AdaptationConfig.fft(), AdaptationConfig.lora(l_total=geom.layers), dama]


def resolve_geometry(config: ExperimentConfig, preset: str = "whisper-large-v2",
                     geometry_file: Optional[Path] = None) -> ModelGeometry:
    if geometry_file is not None:
        return ModelGeometry.model_validate_json(Path(geometry_file).read_text())
    if preset == "whisper-large-v2":
        return ModelGeometry.whisper_large_v2()
    if preset == "toy":
        model_config = config.model
        return ModelGeometry.decoder(
            "toy",
            layers=model_config.decoder_layers,
            d_model=model_config.d_model,
            ffn_dim=model_config.ffn_dim,
            base_param_count=ToyTransformer.base_param_count_for(model_config),
        )
    raise ConfigurationError(f"unknown geometry preset '{preset}'")


def cmd_count(config: ExperimentConfig, preset: str = "whisper-large-v2",
              geometry_file: Optional[Path] = None, out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    geom = resolve_geometry(config, preset, geometry_file)
    reports = EvaluationService.accounting(geom, count_configs(config, geom))
    for report in reports:
        logger.info(
            f"{report.geometry} {report.label}: {report.totals.params:,} params, "
            f"{report.totals.extra_macs_per_token:,} extra MACs per token"
        )
    csv_path = target / "accounting.csv"
    csv_path.write_text(EvaluationService.accounting_csv(reports))
    return {
        "csv": csv_path,
        "json": _write_json(target / "accounting.json", [r.model_dump(mode="json") for r in reports]),
    }


def cmd_ablate(config: ExperimentConfig, checkpoint_path: Path, corpus_dir: Path,
               out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    base = CheckpointService.load(checkpoint_path).model
    _check_model(base, config)
    report = ExperimentService.ablate(base, load_group(corpus_dir, "unseen"), config)
    csv_path = target / "ablation.csv"
    csv_path.write_text(report.to_csv())
    geom = base.geometry()
    accounting = [
        ScheduleService.accounting_report(cell, geom).model_dump(mode="json")
        for cell in ExperimentService.ablation_grid(config.adaptation)
    ]
    return {
        "csv": csv_path,
        "json": _write_json(target / "ablation.json", report.model_dump(mode="json")),
        "accounting": _write_json(target / "ablation_accounting.json", accounting),
    }


def cmd_lowres(config: ExperimentConfig, checkpoint_path: Path, corpus_dir: Path,
               fractions: Sequence[float] = DEFAULT_LOWRES_FRACTIONS,
               modes: Sequence[str] = ("lora_uniform", "dama"),
               out: Optional[str] = None) -> Dict[str, Path]:
    target = output_dir(config, out)
    base = CheckpointService.load(checkpoint_path).model
    _check_model(base, config)
    report = ExperimentService.low_resource(
        base, load_group(corpus_dir, "unseen"), config, fractions, modes
    )
    csv_path = target / "lowres.csv"
    csv_path.write_text(report.to_csv())
    return {"csv": csv_path, "json": _write_json(target / "lowres.json", report.model_dump(mode="json"))}
