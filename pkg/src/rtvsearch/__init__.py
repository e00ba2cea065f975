"""Real-time IVF similarity search over product image features."""

from .core import (DimensionMismatchError, MessageKind, ProductAttributes, SearchHit,
                   UpdateMessage, euclidean_distance, merge_top_k)
from .features import FeatureStore, SyntheticProvider, fnv1a_64, synthetic_extract
from .forward import ForwardIndex
from .indexer import IndexPartition, partition_of
from .inverted import InvertedIndex
from .quantizer import Codebook, KMeansQuantizer, train
from .search import Blender, Broker, QueryRequest, RankWeights, Searcher, rank, searcher_query

__version__ = "0.1.0"
