"""Feature datasets: labeled image-feature records plus category metadata."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

NORM_TOLERANCE = 1e-3


@dataclass
class FeatureDataset:
    """Records of (item id, label index, feature vector) plus category names.

    Features are unit-L2 rows; loaders renormalize (with a warning) when a
    stored row's norm deviates by more than NORM_TOLERANCE.
    """

    item_ids: np.ndarray          # (N,) uint64
    labels: np.ndarray            # (N,) int64, each < len(class_names)
    features: np.ndarray          # (N, d_feat) float64, unit rows
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.uint64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.item_ids.shape[0]
        if self.labels.shape != (n,) or self.features.shape[0] != n:
            raise DataError("item_ids, labels and features disagree on record count")
        if len(np.unique(self.item_ids)) != n:
            raise DataError("duplicate item ids in dataset")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index out of range for category table")
        self._index = {int(i): pos for pos, i in enumerate(self.item_ids)}

    @property
    def n_items(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def d_feat(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def position_of(self, item_id: int) -> int:
        try:
            return self._index[int(item_id)]
        except KeyError:
            raise DataError(f"unknown item id {item_id}") from None

    def ids_for_class(self, label: int) -> np.ndarray:
        """Item ids of one class, ascending (the canonical sampling order)."""
        ids = self.item_ids[self.labels == label]
        return np.sort(ids)

    def restrict_to_classes(self, class_indices: list[int]) -> "FeatureDataset":
        """Subset to the given classes, remapping labels to 0..len-1."""
        class_indices = list(class_indices)
        remap = {old: new for new, old in enumerate(class_indices)}
        mask = np.isin(self.labels, class_indices)
        return FeatureDataset(
            item_ids=self.item_ids[mask].copy(),
            labels=np.array([remap[int(l)] for l in self.labels[mask]], dtype=np.int64),
            features=self.features[mask].copy(),
            class_names=[self.class_names[i] for i in class_indices],
        )


class ImageFeatureProvider:
    """Lookup from item id to a unit-norm image feature vector.

    Never differentiable: returned vectors are plain arrays the caller
    wraps as constants.
    """

    def __init__(self, dataset: FeatureDataset, source: str = "feature-file"):
        self.source = source
        self.dataset = dataset
        norms = np.linalg.norm(dataset.features, axis=1)
        if np.any(norms == 0.0):
            raise DataError("dataset contains a zero-norm feature vector")
        off = np.abs(norms - 1.0) > NORM_TOLERANCE
        if np.any(off):
            warnings.warn(
                f"{int(off.sum())} feature rows deviate from unit norm by more "
                f"than {NORM_TOLERANCE}; renormalizing",
                stacklevel=2,
            )
        self._features = dataset.features / norms[:, None]

    @property
    def d_feat(self) -> int:
        return self.dataset.d_feat

    def get(self, item_id: int) -> np.ndarray:
        return self._features[self.dataset.position_of(item_id)]

    def get_many(self, item_ids) -> np.ndarray:
        rows = [self.dataset.position_of(i) for i in np.asarray(item_ids).tolist()]
        return self._features[rows]
