import pytest
import numpy as np

from dama.models.corpus import Batch, Utterance, split_of
from dama.models.transformer import ToyTransformer
from dama.schemas.data import DataConfig
from dama.schemas.model import ToyTransformerConfig, lang_token
from dama.schemas.schedule import AdaptationConfig, AdaptationMode, RankSchedule
from dama.schemas.training import TrainingConfig
from dama.services.data_service import DataService
from dama.services.training_service import TrainingService


# Six decoder layers with theta (0.3, 0.7) give l_early=1, l_late=4: layers 2-3 are mid
TINY_LAYERS = 6

TINY_OVERRIDES = {
    "MODEL__ENCODER_LAYERS": "1",
    "MODEL__DECODER_LAYERS": str(TINY_LAYERS),
    "MODEL__D_MODEL": "16",
    "MODEL__N_HEADS": "2",
    "MODEL__FFN_DIM": "32",
    "MODEL__VOCAB_SIZE": "24",
    "MODEL__MAX_LEN": "16",
    "MODEL__D_FEAT": "8",
    "MODEL__N_LANGUAGES": "4",
    "DATA__N_SEEN": "2",
    "DATA__N_UNSEEN": "2",
    "DATA__VOCAB_SIZE": "24",
    "DATA__D_FEAT": "8",
    "DATA__UTTERANCES_PER_LANGUAGE": "40",
    "DATA__MIN_LEN": "3",
    "DATA__MAX_LEN": "8",
    "ADAPTATION__SCHEDULE__R_HIGH": "8",
    "ADAPTATION__SCHEDULE__R_LOW": "2",
    "ADAPTATION__ALPHA": "8",
    "TRAINING__EPOCHS": "1",
    "TRAINING__BATCH_SIZE": "8",
    "PRETRAIN__EPOCHS": "1",
    "PRETRAIN__BATCH_SIZE": "16",
    "MAX_NEW_TOKENS": "10",
}


@pytest.fixture(scope="session")
def tiny_model_config():
    """Toy transformer small enough for finite differences."""
    return ToyTransformerConfig(
        encoder_layers=1,
        decoder_layers=TINY_LAYERS,
        d_model=16,
        n_heads=2,
        ffn_dim=32,
        vocab_size=24,
        max_len=16,
        d_feat=8,
        n_languages=4,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_data_config():
    """Two seen and two unseen languages over the tiny vocabulary."""
    return DataConfig(
        n_seen=2,
        n_unseen=2,
        vocab_size=24,
        d_feat=8,
        utterances_per_language=40,
        min_len=3,
        max_len=8,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_data_config):
    """(languages, seen, unseen) for the tiny data config."""
    return DataService.build(tiny_data_config)


@pytest.fixture(scope="session")
def seen_corpus(tiny_corpus):
    return tiny_corpus[1]


@pytest.fixture(scope="session")
def unseen_corpus(tiny_corpus):
    return tiny_corpus[2]


@pytest.fixture
def tiny_model(tiny_model_config):
    """Freshly initialized (untrained) toy model."""
    return ToyTransformer(tiny_model_config)


@pytest.fixture
def fixed_batch(unseen_corpus):
    """First eight unseen training utterances as one batch."""
    return Batch.from_utterances(split_of(unseen_corpus, "train")[:8])


@pytest.fixture
def dama_config():
    """DAMA scaled to the tiny decoder (r_high 8, r_low 2)."""
    return AdaptationConfig(
        mode=AdaptationMode.DAMA,
        schedule=RankSchedule(l_total=TINY_LAYERS, r_high=8, r_low=2),
        alpha=8.0,
    )


@pytest.fixture
def lora_config():
    """Uniform LoRA at rank 4 on the tiny decoder."""
    return AdaptationConfig.lora(rank=4, alpha=4.0, l_total=TINY_LAYERS)


@pytest.fixture
def fast_training():
    """A handful of optimizer steps with a high rate so parameters visibly move."""
    return TrainingConfig(epochs=1, batch_size=8, learning_rate=1e-2, max_steps=6, seed=0)


@pytest.fixture
def rng():
    """numpy generator for test-side random inputs only."""
    return np.random.default_rng(1234)


COPY_LENGTH = 4


@pytest.fixture(scope="session")
def copy_model_config():
    """One language whose features are one-hot codes of the target tokens."""
    return ToyTransformerConfig(
        encoder_layers=1,
        decoder_layers=2,
        d_model=32,
        n_heads=4,
        ffn_dim=64,
        vocab_size=48,
        max_len=8,
        d_feat=44,
        n_languages=1,
        seed=0,
    )


@pytest.fixture(scope="session")
def copy_task(copy_model_config):
    """(train, held_out) fixed-length copy sequences with noiseless features."""
    first = lang_token(0) + 1
    n_symbols = copy_model_config.vocab_size - first
    generator = np.random.default_rng(7)
    codes = np.eye(n_symbols)

    def draw(n, split):
        tokens = generator.integers(first, copy_model_config.vocab_size, size=(n, COPY_LENGTH))
        return [
            Utterance(lang=0, features=codes[row - first], tokens=row, split=split, index=i)
            for i, row in enumerate(tokens)
        ]

    return draw(600, "train"), draw(120, "test")


@pytest.fixture(scope="session")
def copy_model(copy_model_config, copy_task):
    """Model trained on the copy task; shared read-only by the slow tests."""
    model = ToyTransformer(copy_model_config)
    config = TrainingConfig(epochs=50, batch_size=16, learning_rate=3e-3, weight_decay=0.0, seed=0)
    TrainingService.pretrain(model, copy_task[0], [], config)
    return model
