"""Knowledge-graph refinement by triplet-trained partial-fact embeddings."""

from kgrefine.estimators import RelationPredictor, TripleClassifier
from kgrefine.store import KgStore, from_labeled_triples, ingest

__all__ = ["KgStore", "RelationPredictor", "TripleClassifier", "from_labeled_triples", "ingest"]
__version__ = "0.1.0"
