from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edgenorm.corpus import ConceptDictionary, EntityRecord
from edgenorm.encoder import Encoder

settings.register_profile(
    "suite",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


class LookupEncoder(Encoder):
    """Test double: embeddings come from a fixed surface-to-vector table."""

    kind = "lookup-test"

    def __init__(self, table: dict[str, np.ndarray | list[float]]):
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape[0] for v in self._table.values()}
        if len(dims) != 1:
            raise ValueError("lookup table vectors must share one dimension")
        super().__init__(dim=dims.pop())

    def _forward_numpy(self, surfaces):
        return np.stack([self._table[s] for s in surfaces])

    def parameters(self):
        return []

    def state_dict(self):
        return {}

    def load_state_dict(self, state):
        del state

    def metadata(self):
        return {"kind": self.kind, "dim": self.dim}


@pytest.fixture
def lookup_encoder_cls():
    return LookupEncoder


@pytest.fixture
def drug_dictionary() -> ConceptDictionary:
    return ConceptDictionary(
        [
            ("acetylsalicylic acid", {"C01"}),
            ("aspirin", {"C01"}),
            ("ibuprofen", {"C02"}),
            ("paracetamol", {"C03", "C04"}),
            ("acetaminophen", {"C03"}),
        ]
    )


@pytest.fixture
def drug_queries() -> list[EntityRecord]:
    return [
        EntityRecord("aspirin", {"C01"}, "test"),
        EntityRecord("advil", {"C02"}, "test"),
        EntityRecord("tylenol", {"C04"}, "test"),
    ]
