from .base import (INTEGRATORS, MODEL_KINDS, Batch, ForwardOutput, ModelConfig, RoutingTrace,
                   SequenceRecommender, route, routing_phase, routing_update, score_items)
from .dymus import DyMuS, GRUBaseline, gru_sequence, make_candidate_capsules
from .dymus_plus import (DyMuSPlus, candidate_capsules_plus, capsule_multiply, dynamic_gru_step,
                         dynamic_sequence, update_adjusting_state)

_KINDS = {"dymus": DyMuS, "dymus_plus": DyMuSPlus, "gru_baseline": GRUBaseline}


def build_model(config: ModelConfig, rng=None) -> SequenceRecommender:
    return _KINDS[config.kind](config, rng)


__all__ = [
    "INTEGRATORS", "MODEL_KINDS", "Batch", "DyMuS", "DyMuSPlus", "ForwardOutput", "GRUBaseline",
    "ModelConfig", "RoutingTrace", "SequenceRecommender", "build_model", "candidate_capsules_plus",
    "capsule_multiply", "dynamic_gru_step", "dynamic_sequence", "gru_sequence", "make_candidate_capsules",
    "route", "routing_phase", "routing_update", "score_items", "update_adjusting_state",
]
