"""Spiking semantic communication for edge/cloud split inference.

A split image classifier sends its intermediate feature from the edge to
the cloud over a noisy binary channel. The spiking SC model encodes the
feature into a few binary spike maps per time step, and the cloud side
rebuilds a float feature from spikes and membrane potentials.
"""

from .channel import Channel, ChannelConfig, ChannelKind, derive_seed
from .model import Geometry, Readout, SnnSc
from .neurons import IFNode, IHFNode, MembraneState, MPNode, ResetMode, SurrogateConfig
from .pipeline import SplitSystem

__version__ = "0.1.0"

__all__ = [
    "Channel", "ChannelConfig", "ChannelKind", "derive_seed", "Geometry", "Readout", "SnnSc",
    "IFNode", "IHFNode", "MPNode", "MembraneState", "ResetMode", "SurrogateConfig", "SplitSystem",
]
