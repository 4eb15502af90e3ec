"""Small split classifier standing in for the large CNN backbones.

Four conv layers; the split sits after layer 2. The edge half ends in a
sigmoid so the transmitted feature lies in (0, 1), which is also the range
the sigmoid converter reproduces on the cloud side.
"""

from __future__ import annotations

import numpy as np

from .layers import AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU, Sequential, Sigmoid


class SplitClassifier(Module):
    def __init__(self, in_channels: int = 3, image_size: int = 16, num_classes: int = 10,
                 width: int = 16, feature_channels: int = 64, cloud_width: int = 32,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.in_channels, self.image_size, self.num_classes = in_channels, image_size, num_classes
        self.width, self.feature_channels, self.cloud_width = width, feature_channels, cloud_width
        self.edge = Sequential(
            Conv2d(in_channels, width, rng=rng, dtype=dtype), BatchNorm2d(width, dtype=dtype), ReLU(),
            AvgPool2d(2),
            Conv2d(width, feature_channels, rng=rng, dtype=dtype), BatchNorm2d(feature_channels, dtype=dtype),
            Sigmoid(),
        )
        self.edge[0].input_grad = False  # raw images need no gradient
        self.cloud = Sequential(
            Conv2d(feature_channels, cloud_width, rng=rng, dtype=dtype), BatchNorm2d(cloud_width, dtype=dtype),
            ReLU(), AvgPool2d(2),
            Conv2d(cloud_width, cloud_width, rng=rng, dtype=dtype), BatchNorm2d(cloud_width, dtype=dtype),
            ReLU(), GlobalAvgPool(),
            Linear(cloud_width, num_classes, rng=rng, dtype=dtype),
        )

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        s = self.image_size // 2
        return (self.feature_channels, s, s)

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "image_size": self.image_size,
                "num_classes": self.num_classes, "width": self.width,
                "feature_channels": self.feature_channels, "cloud_width": self.cloud_width}

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.cloud(self.edge(x))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.edge.backward(self.cloud.backward(grad))


def images_to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """u8 (N, C, H, W) -> centered floats."""
    return (images.astype(np.float64) / 255.0 - 0.5).astype(dtype)
