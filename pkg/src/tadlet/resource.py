"""Runtime resources of a run, built lazily from the configuration sections."""

from __future__ import annotations

import logging

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Self, Type, TypeVar, cast

from .anchors import AnchorSet, generate_anchors
from .checkpoint import load_checkpoint
from .config import AnchorConfig, NetConfig, SectionAbstract
from .errors import ConfigurationError
from .network import TEMPORAL_POOL, Detector
from .registrant import RegistrantAbstract
from .registry import Registry
from .types import RegistrantKind


logger = logging.getLogger(__name__)

SectionT = TypeVar("SectionT", bound=SectionAbstract)


class ResourceAbstract(RegistrantAbstract, ABC):
    """Base class for all resources within the Bootstrap."""

    def __init__(self, registry: Registry[Any]) -> None:
        self.registry = registry

    @classmethod
    def kind(cls) -> RegistrantKind:
        return "resource"

    @classmethod
    def build(cls, registry: Registry[Any]) -> Self:
        return cls(registry).initialize()

    @abstractmethod  # explicit propagation of abstractmethod
    def initialize(self) -> Self:
        """Initialize the resource. This is called by the associated Registry[self.__class__]."""
        return self

    def options(self) -> Dict[str, Any]:
        """Get the options for this resource instance."""
        return dict(self.registry.get_registrant_options(self.identity()) or {})

    def section(self, klass: Type[SectionT]) -> SectionT:
        """Read a configuration section through the owning registrar."""
        if self.registry.registrar is None:
            raise ConfigurationError(f"resource '{self.identity()}' is not attached to a registrar")
        return cast(SectionT, self.registry.registrar.get(SectionAbstract.kind(), klass))


class ResourceRegistry(Registry[ResourceAbstract]):
    """A registry specifically for ResourceAbstract subclasses."""

    @classmethod
    def kind(cls) -> str:
        return ResourceAbstract.kind()


class AnchorsResource(ResourceAbstract):
    """Anchor sets of the configured layout, one per clip length."""

    def initialize(self) -> Self:
        self.config = self.section(AnchorConfig)
        self._sets: Dict[int, AnchorSet] = {}
        return self

    def for_length(self, clip_len: int) -> AnchorSet:
        if clip_len not in self._sets:
            self._sets[clip_len] = generate_anchors(self.config, clip_len)
        return self._sets[clip_len]


class DetectorResource(ResourceAbstract):
    """The detector, checked against the anchor layout; option `checkpoint` loads weights."""

    def initialize(self) -> Self:
        net = self.section(NetConfig)
        anchor = self.section(AnchorConfig)
        expected = tuple(TEMPORAL_POOL * 2 ** level for level in range(net.num_levels))
        if tuple(anchor.strides) != expected:
            raise ConfigurationError(f"[anchor] strides {tuple(anchor.strides)} must be {expected} for {net.num_levels} pyramid levels")
        if net.anchors_per_position != anchor.num_scales:
            raise ConfigurationError(
                f"[net] anchors_per_position {net.anchors_per_position} must equal the {anchor.num_scales} anchor scales")
        self.model = Detector(net)
        checkpoint = self.options().get("checkpoint")
        if checkpoint:
            load_checkpoint(self.model, Path(checkpoint))
        logger.debug("detector ready: %d parameter arrays", len(self.model.parameters()))
        return self


RESOURCES = (AnchorsResource, DetectorResource)
