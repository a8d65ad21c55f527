"""Two-tier cluster topology: nodes of accelerators joined by a slower network.

Devices are identified by plain integer indices in [0, D); a device's node is
derived by integer division, so device d lives on node d // devices_per_node.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ClusterTopology:
    """A homogeneous cluster of `nodes` nodes with `devices_per_node` devices each.

    Bandwidths are in bytes/second: `intra_bw` between two devices of the same
    node, `inter_bw` through one node's network interface.  `alpha` is the
    fixed launch cost (seconds) charged once per collective that moves data.
    """

    nodes: int
    devices_per_node: int
    intra_bw: float
    inter_bw: float
    alpha: float = 10e-6

    def __post_init__(self) -> None:
        if self.nodes <= 0 or self.devices_per_node <= 0:
            raise ConfigError(
                f"topology needs positive dimensions, got {self.nodes} nodes x "
                f"{self.devices_per_node} devices"
            )
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise ConfigError("bandwidths must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")

    @property
    def num_devices(self) -> int:
        return self.nodes * self.devices_per_node

    def node_of(self, device: int) -> int:
        return device // self.devices_per_node

    def devices_in_node(self, node: int) -> range:
        start = node * self.devices_per_node
        return range(start, start + self.devices_per_node)
