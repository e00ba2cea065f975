"""scikit-learn style front end over a single in-memory partition."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import check_vectors
from .features import FeatureStore
from .indexer import IndexPartition
from .inverted import DEFAULT_LIST_CAPACITY
from .quantizer import KMeansQuantizer
from .search import searcher_query


class RealtimeIVFIndex(BaseEstimator):
    """IVF nearest-neighbour index that accepts inserts and deletes after ``fit``.

    Rows are numbered in insertion order. ``fit`` trains the codebook on ``X``
    and indexes it; ``add`` appends rows; ``remove`` hides rows from results
    (``restore`` brings them back). Deleted rows keep their numbers.
    """

    def __init__(self, n_lists=None, nprobe=1, max_iter=25, random_state=0,
                 list_capacity=DEFAULT_LIST_CAPACITY):
        self.n_lists = n_lists
        self.nprobe = nprobe
        self.max_iter = max_iter
        self.random_state = random_state
        self.list_capacity = list_capacity

    def fit(self, X, y=None):
        X = check_vectors(X)
        self.quantizer_ = KMeansQuantizer(self.n_lists, self.max_iter, self.random_state).fit(X)
        self.partition_ = IndexPartition(self.quantizer_.codebook_, FeatureStore(X.shape[1]),
                                         list_capacity=self.list_capacity)
        self.n_features_in_ = X.shape[1]
        self.add(X)
        return self

    def add(self, X) -> np.ndarray:
        """Index new rows; returns their row numbers."""
        check_is_fitted(self, "partition_")
        X = check_vectors(X, self.n_features_in_)
        st = self.partition_
        start = len(st.forward)
        for i, row in enumerate(X, start):
            url = f"row:{i}"
            st.store.put(url, row)
            st.handle_insert(i + 1, 0, 0, 0, [url])
        return np.arange(start, start + len(X))

    def _set(self, rows, valid: bool) -> None:
        check_is_fitted(self, "partition_")
        st = self.partition_
        for r in np.atleast_1d(rows):
            r = int(r)
            if not 0 <= r < len(st.forward):
                raise IndexError(f"row {r} is not indexed")
            # one product per row; re-adding a known product only flips its bit
            if valid:
                st.handle_insert(r + 1, 0, 0, 0, [f"row:{r}"])
            else:
                st.handle_delete(r + 1)

    def remove(self, rows) -> None:
        self._set(rows, False)

    def restore(self, rows) -> None:
        self._set(rows, True)

    def kneighbors(self, X, n_neighbors=5, return_distance=True, nprobe=None):
        """``n_neighbors`` nearest valid rows per query, padded with -1 / inf."""
        check_is_fitted(self, "partition_")
        X = check_vectors(X, self.n_features_in_)
        nprobe = nprobe or self.nprobe
        ind = np.full((len(X), n_neighbors), -1, dtype=np.int64)
        dist = np.full((len(X), n_neighbors), np.inf)
        for qi, q in enumerate(X):
            for j, h in enumerate(searcher_query(self.partition_, q, n_neighbors, nprobe)):
                ind[qi, j] = h.image_index
                dist[qi, j] = h.distance
        return (dist, ind) if return_distance else ind
