"""
Binary checkpoint format.

    offset 0   magic        b"DAMA"
    offset 4   version      uint32, little-endian
    offset 8   header_len   uint64, little-endian
    offset 16  header       UTF-8 JSON, ``header_len`` bytes
    then       payload      tensors back to back, in header order

Each tensor record in the header carries name, shape, dtype ("f64" or
"f32", little-endian), byte offset into the payload, byte count and the
trainable flag. The header also stores the model config, the adaptation
config (if any) and the adapter registry metadata.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import ValidationError

from dama.core.exceptions import CheckpointError, DamaError
from dama.models.adapter import AdapterRegistry, LoraAdapter, adapter_param_name
from dama.models.transformer import ToyTransformer
from dama.numcore import ParameterStore
from dama.schemas.model import ToyTransformerConfig
from dama.schemas.schedule import AdaptationConfig, InitMode, Segment

logger = logging.getLogger(__name__)

MAGIC = b"DAMA"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
DTYPES = {"f64": "<f8", "f32": "<f4"}
ADAPTER_FIELDS = ("layer", "site", "alpha", "a_frozen", "init_mode")


@dataclass
class Checkpoint:
    model: ToyTransformer
    adaptation: Optional[AdaptationConfig] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


class CheckpointService:
    """Bit-exact save and validated load of models with their adapters."""

    @staticmethod
    def to_bytes(model: ToyTransformer, adaptation: Optional[AdaptationConfig] = None,
                 metadata: Optional[Dict[str, Any]] = None) -> bytes:
        tensors = []
        chunks = []
        offset = 0
        for param in model.params:
            data = np.ascontiguousarray(param.value, dtype=DTYPES["f64"]).tobytes()
            tensors.append(
                {
                    "name": param.name,
                    "shape": list(param.value.shape),
                    "dtype": "f64",
                    "offset": offset,
                    "nbytes": len(data),
                    "trainable": param.trainable,
                }
            )
            chunks.append(data)
            offset += len(data)

        header = {
            "model_config": model.config.model_dump(mode="json"),
            "adaptation": adaptation.model_dump(mode="json") if adaptation is not None else None,
            "adapters": model.adapters.metadata() if model.adapters is not None else None,
            "metadata": metadata or {},
            "tensors": tensors,
            "payload_bytes": offset,
        }
        encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(encoded)) + encoded + b"".join(chunks)

    @staticmethod
    def save(path: Path, model: ToyTransformer, adaptation: Optional[AdaptationConfig] = None,
             metadata: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(CheckpointService.to_bytes(model, adaptation, metadata))
        logger.info(f"Saved checkpoint {path} ({len(model.params)} tensors)")
        return path

    @staticmethod
    def _read_header(blob: bytes) -> Dict[str, Any]:
        if len(blob) < PREAMBLE.size:
            raise CheckpointError(f"file is {len(blob)} bytes, shorter than the preamble", "magic")
        magic, version, header_len = PREAMBLE.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CheckpointError(f"expected {MAGIC!r}, found {magic!r}", "magic")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}", "version")
        if PREAMBLE.size + header_len > len(blob):
            raise CheckpointError(
                f"header length {header_len} runs past the end of the file", "header_length"
            )
        try:
            header = json.loads(blob[PREAMBLE.size:PREAMBLE.size + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"header is not valid JSON ({exc})", "header") from exc
        for key in ("model_config", "tensors", "payload_bytes"):
            if key not in header:
                raise CheckpointError("missing from header", key)
        header["_payload_start"] = PREAMBLE.size + header_len
        return header

    @staticmethod
    def _read_tensors(blob: bytes, header: Dict[str, Any]) -> Dict[str, tuple]:
        start = header["_payload_start"]
        payload_len = len(blob) - start
        if payload_len != header["payload_bytes"]:
            raise CheckpointError(
                f"payload is {payload_len} bytes, header declares {header['payload_bytes']}", "payload"
            )
        tensors: Dict[str, tuple] = {}
        expected_offset = 0
        for position, record in enumerate(header["tensors"]):
            missing = {"name", "shape", "dtype", "offset"} - set(record)
            if missing:
                raise CheckpointError(f"record lacks {sorted(missing)}", f"tensors[{position}]")
            name = record["name"]
            dtype = DTYPES.get(record.get("dtype"))
            if dtype is None:
                raise CheckpointError(f"unknown dtype {record.get('dtype')!r}", f"tensors[{name}].dtype")
            shape = tuple(record["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
            if record["offset"] != expected_offset:
                raise CheckpointError(
                    f"offset {record['offset']} does not follow the previous tensor ({expected_offset})",
                    f"tensors[{name}].offset",
                )
            if record.get("nbytes", nbytes) != nbytes or expected_offset + nbytes > payload_len:
                raise CheckpointError(
                    f"{nbytes} bytes at offset {expected_offset} exceed the payload",
                    f"tensors[{name}].nbytes",
                )
            begin = start + expected_offset
            value = np.frombuffer(blob[begin:begin + nbytes], dtype=dtype).astype(np.float64)
            tensors[name] = (value.reshape(shape), bool(record.get("trainable", True)))
            expected_offset += nbytes
        if expected_offset != payload_len:
            raise CheckpointError(
                f"tensors cover {expected_offset} of {payload_len} payload bytes", "payload"
            )
        return tensors

    @staticmethod
    def from_bytes(blob: bytes) -> Checkpoint:
        header = CheckpointService._read_header(blob)
        tensors = CheckpointService._read_tensors(blob, header)
        try:
            config = ToyTransformerConfig.model_validate(header["model_config"])
        except ValidationError as exc:
            raise CheckpointError(str(exc), "model_config") from exc
        adaptation = None
        if header.get("adaptation") is not None:
            try:
                adaptation = AdaptationConfig.model_validate(header["adaptation"])
            except ValidationError as exc:
                raise CheckpointError(str(exc), "adaptation") from exc

        adapter_meta = header.get("adapters")
        adapter_names = set()
        registry = None
        if adapter_meta is not None:
            registry = AdapterRegistry(label=adapter_meta.get("label", ""))
            for position, meta in enumerate(adapter_meta.get("adapters", [])):
                where = f"adapters[{position}]"
                missing = [key for key in ADAPTER_FIELDS if key not in meta]
                if missing:
                    raise CheckpointError(f"record lacks {missing}", f"{where}.{missing[0]}")
                a_name = adapter_param_name(meta["layer"], meta["site"], "a")
                b_name = adapter_param_name(meta["layer"], meta["site"], "b")
                if a_name not in tensors or b_name not in tensors:
                    raise CheckpointError(
                        f"adapter L{meta['layer']}.{meta['site']} has no tensors", "adapters"
                    )
                adapter_names.update((a_name, b_name))
                try:
                    registry.add(
                        LoraAdapter(
                            meta["layer"],
                            meta["site"],
                            a=tensors[a_name][0],
                            b=tensors[b_name][0],
                            alpha=meta["alpha"],
                            a_frozen=meta["a_frozen"],
                            init_mode=InitMode(meta["init_mode"]),
                            segment=Segment(meta["segment"]) if meta.get("segment") else None,
                        )
                    )
                except ValueError as exc:
                    raise CheckpointError(str(exc), where) from exc
                except DamaError as exc:
                    raise CheckpointError(exc.message, where) from exc

        layout = {name for name, _, _ in ToyTransformer.parameter_layout(config)}
        unexpected = sorted(set(tensors) - layout - adapter_names)
        if unexpected:
            raise CheckpointError(
                f"{len(unexpected)} tensors are not part of this model: {unexpected}",
                f"tensors[{unexpected[0]}]",
            )

        store = ParameterStore()
        for name, (value, trainable) in tensors.items():
            if name not in adapter_names:
                store.register(name, value, trainable)
        try:
            model = ToyTransformer(config, store)
            if registry is not None:
                model.attach_adapters(registry)
        except DamaError as exc:
            raise CheckpointError(exc.message, "tensors") from exc
        return Checkpoint(model=model, adaptation=adaptation, metadata=header.get("metadata", {}))

    @staticmethod
    def load(path: Path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"{path} does not exist", "path")
        checkpoint = CheckpointService.from_bytes(path.read_bytes())
        logger.info(f"Loaded checkpoint {path} ({len(checkpoint.model.params)} tensors)")
        return checkpoint
