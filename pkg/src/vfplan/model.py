"""Parameter container tying encoder, decoder, field head and cost weights together."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cost import effective_weights, init_cost
from .dynamics import VehicleParams
from .encoder import EncoderConfig, init_decoder, init_encoder
from .field import FieldConfig, init_field


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    field_mode: str = "vf"

    @property
    def field(self) -> FieldConfig:
        return FieldConfig(self.field_mode, self.encoder.embed_dim, self.encoder.attn_heads)


class PlanningModel:
    """All learnable parameters in one ParamStore plus the configs to interpret them."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, store: ad.ParamStore | None = None):
        self.cfg = cfg
        if store is None:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
            store = ad.ParamStore()
            init_encoder(store, cfg.encoder, rng)
            init_decoder(store, cfg.encoder, rng)
            init_field(store, cfg.field, rng)
            init_cost(store)
        self.store = store

    @property
    def encoder_cfg(self) -> EncoderConfig:
        return self.cfg.encoder

    @property
    def field_cfg(self) -> FieldConfig:
        return self.cfg.field

    @property
    def vehicle(self) -> VehicleParams:
        return self.cfg.vehicle

    def cost_weights(self) -> np.ndarray:
        return effective_weights(self.store)

    def save(self, path, meta: dict | None = None, optimizer_state: bool = True) -> None:
        m = dict(meta or {})
        m["model"] = {"encoder": dataclasses.asdict(self.cfg.encoder),
                      "vehicle": dataclasses.asdict(self.cfg.vehicle),
                      "field_mode": self.cfg.field_mode}
        ad.save_checkpoint(path, self.store, m, optimizer_state=optimizer_state)

    @classmethod
    def load(cls, path) -> tuple["PlanningModel", dict]:
        store, meta = ad.load_checkpoint(path)
        mc = meta.get("model")
        if mc is None:
            raise ad.CheckpointError("checkpoint has no model configuration")
        cfg = ModelConfig(EncoderConfig(**mc["encoder"]), VehicleParams(**mc["vehicle"]), mc["field_mode"])
        return cls(cfg, store=store), meta
