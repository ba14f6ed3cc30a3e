import logging
from typing import Optional

import numpy as np

from dama.core.exceptions import AdapterError, ConfigurationError, ShapeMismatchError
from dama.models.adapter import AdapterRegistry, LoraAdapter
from dama.models.transformer import DECODER_SITES, ToyTransformer
from dama.numcore import Matrix, Rng, as_matrix, matmul, svd
from dama.schemas.schedule import (
    AdaptationConfig,
    AdaptationMode,
    InitMode,
    Segment,
)
from dama.services.schedule_service import ScheduleService

logger = logging.getLogger(__name__)


class AdapterService:
    """Adapter arithmetic, initialization and injection into a model."""

    @staticmethod
    def _check_bound(w0: Matrix, adapter: LoraAdapter):
        if w0.shape != (adapter.d_out, adapter.d_in):
            raise ShapeMismatchError(
                f"adapter {adapter.key} expects W0 of shape {adapter.d_out}x{adapter.d_in}, "
                f"got {w0.shape[0]}x{w0.shape[1]}"
            )

    @staticmethod
    def adapter_forward(w0: Matrix, adapter: LoraAdapter, x: Matrix) -> Matrix:
        """W0 x + (alpha / r) B (A x) for column inputs x (k x n); W0 is not modified."""
        w0 = as_matrix(w0, "W0")
        AdapterService._check_bound(w0, adapter)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != adapter.d_in:
            raise ShapeMismatchError(
                f"adapter {adapter.key}: input has {x.shape[0]} rows, expected {adapter.d_in}"
            )
        base = matmul(w0, x)
        update = matmul(adapter.b, matmul(adapter.a, x))
        return base + adapter.scaling * update

    @staticmethod
    def merge(w0: Matrix, adapter: LoraAdapter) -> Matrix:
        """W0 + (alpha / r) B A."""
        w0 = as_matrix(w0, "W0")
        AdapterService._check_bound(w0, adapter)
        return w0 + adapter.scaling * matmul(adapter.b, adapter.a)

    @staticmethod
    def svd_init(w0: Matrix, rank: int) -> Matrix:
        """A = the bottom-``rank`` right singular vectors of W0, as rows."""
        w0 = as_matrix(w0, "W0")
        k0 = min(w0.shape)
        if not 1 <= rank <= k0:
            raise AdapterError(f"svd_init rank {rank} must be in 1..{k0} for W0 of shape {w0.shape}")
        result = svd(w0)
        return result.right_vectors(k0 - rank, k0)

    @staticmethod
    def random_init(rank: int, k: int, rng: Rng) -> Matrix:
        """Gaussian A with standard deviation 1/sqrt(rank)."""
        if rank < 1 or k < 1:
            raise ShapeMismatchError(f"random_init needs positive shape, got {rank}x{k}")
        return rng.normal((rank, k), std=1.0 / np.sqrt(rank))

    @staticmethod
    def init_mode_for(config: AdaptationConfig, segment: Optional[Segment]) -> InitMode:
        """SVD init belongs to the mid segment under DAMA; ``init_mode=random`` disables it."""
        if config.mode != AdaptationMode.DAMA or config.init_mode == InitMode.RANDOM:
            return InitMode.RANDOM
        return InitMode.SVD if segment == Segment.MID else InitMode.RANDOM

    @staticmethod
    def build_registry(model: ToyTransformer, config: AdaptationConfig, seed: int) -> AdapterRegistry:
        """One zero-B adapter per decoder site with the schedule's rank."""
        if config.mode == AdaptationMode.FFT:
            raise ConfigurationError("fft mode does not use adapters")
        geom = model.geometry()
        ranks = ScheduleService.ranks(config, geom)
        segments = ScheduleService.segments(config, geom)
        rng = Rng(seed)

        registry = AdapterRegistry(label=config.label)
        for layer, (rank, segment) in enumerate(zip(ranks, segments), start=1):
            init_mode = AdapterService.init_mode_for(config, segment)
            frozen = ScheduleService.a_frozen(config, segment)
            for site in DECODER_SITES:
                w0 = model.base_weight(layer, site)
                if init_mode == InitMode.SVD:
                    a = AdapterService.svd_init(w0, rank)
                else:
                    a = AdapterService.random_init(rank, w0.shape[1], rng)
                registry.add(
                    LoraAdapter(
                        layer,
                        site,
                        a=a,
                        b=np.zeros((w0.shape[0], rank)),
                        alpha=config.alpha,
                        a_frozen=frozen,
                        init_mode=init_mode,
                        segment=segment,
                    )
                )
        return registry

    @staticmethod
    def inject_adapters(model: ToyTransformer, config: AdaptationConfig, seed: int = 0) -> Optional[AdapterRegistry]:
        """
        Prepare ``model`` for adaptation in ``config.mode``.

        fft makes every base parameter trainable and attaches nothing; adapter
        modes freeze the base model and attach a fresh registry.
        """
        if model.adapters is not None:
            raise AdapterError("adapters are already attached; detach before injecting again")
        if config.mode == AdaptationMode.FFT:
            model.set_base_trainable(True)
            return None

        registry = AdapterService.build_registry(model, config, seed)
        model.set_base_trainable(False)
        model.attach_adapters(registry)
        logger.info(
            f"Injected {len(registry)} adapters ({config.label}), "
            f"ranks per layer {list(registry.ranks_by_layer().values())}, "
            f"{registry.trainable_count()} trainable parameters"
        )
        return registry

    @staticmethod
    def detach(model: ToyTransformer) -> Optional[AdapterRegistry]:
        """Restore the base model view; a no-op on a model without adapters."""
        registry = model.detach_adapters()
        if registry is not None:
            logger.info(f"Detached {len(registry)} adapters ({registry.label})")
        return registry

    @staticmethod
    def merged_weights(model: ToyTransformer) -> dict:
        """Base weights with every attached adapter folded in, keyed by parameter name."""
        if model.adapters is None:
            return {}
        return {
            f"dec.{adapter.layer}.{adapter.site}.weight": AdapterService.merge(
                model.base_weight(adapter.layer, adapter.site), adapter
            )
            for adapter in model.adapters
        }
