import json

import pytest
import numpy as np

from dama.core.exceptions import CheckpointError
from dama.services.adapter_service import AdapterService
from dama.services.checkpoint_service import FORMAT_VERSION, MAGIC, PREAMBLE, CheckpointService


def split_blob(blob: bytes):
    _, _, header_len = PREAMBLE.unpack_from(blob, 0)
    header = json.loads(blob[PREAMBLE.size:PREAMBLE.size + header_len])
    return header, blob[PREAMBLE.size + header_len:]


def join_blob(header: dict, payload: bytes, magic=MAGIC, version=FORMAT_VERSION) -> bytes:
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(magic, version, len(encoded)) + encoded + payload


@pytest.fixture
def adapted_model(tiny_model, dama_config, rng):
    registry = AdapterService.inject_adapters(tiny_model, dama_config)
    for adapter in registry:
        adapter.b[...] = rng.normal(scale=0.1, size=adapter.b.shape)
    return tiny_model


class TestRoundTrip:
    """Test saving and loading models."""

    def test_resave_is_byte_identical(self, tmp_path, adapted_model, dama_config):
        """Test save, load and save again produce the same bytes."""
        first = CheckpointService.save(tmp_path / "a.ckpt", adapted_model, dama_config, {"kind": "adapted"})
        loaded = CheckpointService.load(first)
        second = CheckpointService.save(tmp_path / "b.ckpt", loaded.model, loaded.adaptation, loaded.metadata)
        assert first.read_bytes() == second.read_bytes()

    def test_loaded_model_reproduces_logits(self, tmp_path, adapted_model, dama_config, fixed_batch):
        """Test a loaded adapted model gives bit-identical logits."""
        path = CheckpointService.save(tmp_path / "m.ckpt", adapted_model, dama_config)
        loaded = CheckpointService.load(path)
        assert np.array_equal(loaded.model.logits(fixed_batch), adapted_model.logits(fixed_batch))

    def test_adapters_restored(self, tmp_path, adapted_model, dama_config):
        """Test adapter ranks, frozen flags, init modes and config survive."""
        path = CheckpointService.save(tmp_path / "m.ckpt", adapted_model, dama_config, {"n_train": 12})
        loaded = CheckpointService.load(path)

        assert loaded.adaptation == dama_config
        assert loaded.metadata == {"n_train": 12}
        assert loaded.model.adapters.label == dama_config.label
        for original in adapted_model.adapters:
            restored = loaded.model.adapters.get(original.layer, original.site)
            assert restored.rank == original.rank
            assert restored.a_frozen == original.a_frozen
            assert restored.init_mode == original.init_mode
            assert restored.segment == original.segment
        assert loaded.model.params.count(trainable_only=True) == adapted_model.params.count(trainable_only=True)

    def test_loaded_adapters_stay_shared(self, tmp_path, adapted_model, dama_config):
        """Test loaded adapter arrays are the store's writable arrays."""
        loaded = CheckpointService.load(CheckpointService.save(tmp_path / "m.ckpt", adapted_model, dama_config))
        adapter = loaded.model.adapters.get(1, "self_q")
        assert loaded.model.params[adapter.b_param.name].value is adapter.b
        adapter.b[0, 0] = 42.0
        assert loaded.model.params[adapter.b_param.name].value[0, 0] == 42.0

    def test_base_model_without_adapters(self, tmp_path, tiny_model):
        """Test a plain base checkpoint loads with no adapters or adaptation."""
        loaded = CheckpointService.load(CheckpointService.save(tmp_path / "base.ckpt", tiny_model))
        assert loaded.model.adapters is None
        assert loaded.adaptation is None
        assert loaded.model.config == tiny_model.config


class TestCorruption:
    """Test rejected checkpoints name the failing field."""

    def test_bad_magic(self, tiny_model):
        """Test a wrong magic number."""
        blob = CheckpointService.to_bytes(tiny_model)
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(b"XXXX" + blob[4:])
        assert info.value.field == "magic"

    def test_short_file(self):
        """Test a file shorter than the preamble."""
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(b"DAM")
        assert info.value.field == "magic"

    def test_unsupported_version(self, tiny_model):
        """Test an unknown format version."""
        header, payload = split_blob(CheckpointService.to_bytes(tiny_model))
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload, version=FORMAT_VERSION + 1))
        assert info.value.field == "version"

    def test_header_length_past_end(self, tiny_model):
        """Test a header length beyond the file."""
        blob = CheckpointService.to_bytes(tiny_model)
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob[PREAMBLE.size:])
        assert info.value.field == "header_length"

    def test_header_not_json(self):
        """Test an unparseable header."""
        blob = PREAMBLE.pack(MAGIC, FORMAT_VERSION, 5) + b"{oops"
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(blob)
        assert info.value.field == "header"

    def test_truncated_payload(self, tiny_model):
        """Test a payload shorter than declared."""
        blob = CheckpointService.to_bytes(tiny_model)
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(blob[:-8])
        assert info.value.field == "payload"

    def test_shifted_offset(self, tiny_model):
        """Test a tensor offset that does not follow its predecessor."""
        header, payload = split_blob(CheckpointService.to_bytes(tiny_model))
        header["tensors"][1]["offset"] += 8
        name = header["tensors"][1]["name"]
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload))
        assert info.value.field == f"tensors[{name}].offset"

    def test_unknown_dtype(self, tiny_model):
        """Test an unsupported tensor dtype."""
        header, payload = split_blob(CheckpointService.to_bytes(tiny_model))
        header["tensors"][0]["dtype"] = "i8"
        name = header["tensors"][0]["name"]
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload))
        assert info.value.field == f"tensors[{name}].dtype"

    def test_invalid_model_config(self, tiny_model):
        """Test a model config that fails validation."""
        header, payload = split_blob(CheckpointService.to_bytes(tiny_model))
        header["model_config"]["n_heads"] = 3
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload))
        assert info.value.field == "model_config"

    def test_missing_tensor(self, tiny_model):
        """Test a checkpoint lacking a parameter the config needs."""
        header, payload = split_blob(CheckpointService.to_bytes(tiny_model))
        last = header["tensors"].pop()
        header["payload_bytes"] -= last["nbytes"]
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload[: -last["nbytes"]]))
        assert info.value.field == "tensors"

    def test_missing_file(self, tmp_path):
        """Test loading a path that does not exist."""
        with pytest.raises(CheckpointError) as info:
            CheckpointService.load(tmp_path / "absent.ckpt")
        assert info.value.field == "path"

    def test_adapter_record_missing_field(self, adapted_model, dama_config):
        """Test an adapter record without alpha names that field."""
        header, payload = split_blob(CheckpointService.to_bytes(adapted_model, dama_config))
        del header["adapters"]["adapters"][0]["alpha"]
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload))
        assert info.value.field == "adapters[0].alpha"

    def test_adapter_record_bad_init_mode(self, adapted_model, dama_config):
        """Test an unknown init mode in an adapter record."""
        header, payload = split_blob(CheckpointService.to_bytes(adapted_model, dama_config))
        header["adapters"]["adapters"][3]["init_mode"] = "orthogonal"
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload))
        assert info.value.field == "adapters[3]"

    def test_unexpected_tensor(self, tiny_model):
        """Test a tensor the model layout does not know is rejected by name."""
        header, payload = split_blob(CheckpointService.to_bytes(tiny_model))
        extra = np.arange(2, dtype="<f8").tobytes()
        header["tensors"].append(
            {"name": "dec.extra", "shape": [2], "dtype": "f64", "offset": header["payload_bytes"],
             "nbytes": len(extra), "trainable": True}
        )
        header["payload_bytes"] += len(extra)
        with pytest.raises(CheckpointError) as info:
            CheckpointService.from_bytes(join_blob(header, payload + extra))
        assert info.value.field == "tensors[dec.extra]"
