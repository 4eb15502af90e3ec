"""Edge/cloud split system: backbone halves with an optional SC link in between."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .backbone import SplitClassifier, images_to_input
from .baselines import CnnQuantSc
from .layers import no_grad
from .model import SnnSc

BitChannel = Callable[[np.ndarray], np.ndarray]


class SplitSystem:
    """Backbone edge -> [SC encoder -> channel -> SC decoder] -> backbone cloud."""

    def __init__(self, backbone: SplitClassifier, sc: SnnSc | CnnQuantSc | None = None):
        self.backbone = backbone
        self.sc = sc
        if sc is not None and tuple(sc.geometry.feature_shape) != tuple(backbone.feature_shape):
            raise ValueError(f"SC geometry {sc.geometry.feature_shape} does not match backbone "
                             f"feature {backbone.feature_shape}")

    def features(self, images: np.ndarray) -> np.ndarray:
        return self.backbone.edge(images_to_input(images, self.backbone.dtype))

    def logits_from_feature(self, feature: np.ndarray, channel: BitChannel | None = None):
        """Returns ``(logits, codes)``; codes is empty without an SC link."""
        if self.sc is None:
            return self.backbone.cloud(feature), []
        recon, codes = self.sc(feature, channel)
        return self.backbone.cloud(recon), codes

    def backward_to_feature(self, dlogits: np.ndarray, code_grads=None) -> np.ndarray:
        g = self.backbone.cloud.backward(dlogits)
        if self.sc is None:
            return g
        return self.sc.backward(g, code_grads)

    def predict(self, images: np.ndarray, channel: BitChannel | None = None,
                batch_size: int = 250) -> np.ndarray:
        """Logits for a dataset in eval mode, processed in fixed-order batches."""
        self.eval()
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                f = self.features(images[i:i + batch_size])
                out.append(self.logits_from_feature(f, channel)[0])
        return np.concatenate(out)

    def eval(self) -> None:
        self.backbone.eval()
        if self.sc is not None:
            self.sc.eval()
