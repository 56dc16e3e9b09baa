"""Composition root of a run: configuration sections and resources behind one Registrar."""

from __future__ import annotations

import copy
import logging
import os

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Type, TypeVar, Union, cast

import yaml

from .config import SECTIONS, AnchorConfig, NetConfig, SectionAbstract, SectionRegistry, TrainConfig
from .errors import ConfigurationError
from .helpers import Resolve
from .registrar import Registrar
from .resource import RESOURCES, AnchorsResource, DetectorResource, ResourceAbstract, ResourceRegistry


logger = logging.getLogger(__name__)

SEED_ENV = "TAD_SEED"
SEEDED_SECTIONS = ("net", "train", "augment", "synth")
RUN_KEYS = ("seed", "deterministic")

SectionT = TypeVar("SectionT", bound=SectionAbstract)
ResourceT = TypeVar("ResourceT", bound=ResourceAbstract)


def env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


@dataclass(init=False)
class Bootstrap(Registrar):
    """Registrar for the `section` and `resource` registries of one run.

    Options:
        document: Mapping[str, Any] - the run configuration as written in YAML
        {
            SECTION.identity(): { OPTION_KEY: OPTION_VALUE },
            "seed": int,               # copied into every seeded section
            "deterministic": bool,
            "resource": { RESOURCE.identity(): { OPTION_KEY: OPTION_VALUE } },
        }
    """

    def __init__(
        self,
        document: Optional[Mapping[str, Any]] = None,
        *,
        sections: Sequence[Type[SectionAbstract]] = SECTIONS,
        resources: Sequence[Type[ResourceAbstract]] = RESOURCES,
    ) -> None:
        super().__init__({}, {})

        # Register Typed Registries
        self.register_registry(SectionRegistry)
        self.register_registry(ResourceRegistry)
        self.register(*sections, *resources)

        self.configure(document or {})

    # == Options ==========================================================

    def configure(self, document: Mapping[str, Any]) -> None:
        """Translate a configuration document into the nested options tree."""
        if not isinstance(document, Mapping):
            raise ConfigurationError(f"configuration must be a mapping, got {type(document).__name__}")
        sections = self.get_registry(SectionAbstract.kind())
        known = set(sections.registered) | set(RUN_KEYS) | {ResourceAbstract.kind()}
        unknown = sorted(set(document) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration key(s): {', '.join(unknown)}")

        tree: Dict[str, Any] = {}
        for identity in sections.registered:
            subtree = document.get(identity) or {}
            if not isinstance(subtree, Mapping):
                raise ConfigurationError(f"[{identity}] must be a mapping, got {type(subtree).__name__}")
            tree[identity] = dict(copy.deepcopy(subtree))

        seed = env_seed()
        if seed is not None:
            logger.info("%s=%d overrides configured seeds", SEED_ENV, seed)
            for identity in SEEDED_SECTIONS:
                if identity in tree:
                    tree[identity]["seed"] = seed
        elif document.get("seed") is not None:
            for identity in SEEDED_SECTIONS:
                if identity in tree:
                    tree[identity].setdefault("seed", int(document["seed"]))
        if document.get("deterministic") and "train" in tree:
            tree["train"]["deterministic"] = True

        self.set_options({
            SectionAbstract.kind(): tree,
            ResourceAbstract.kind(): dict(copy.deepcopy(document.get(ResourceAbstract.kind()) or {})),
        })

    @classmethod
    def from_file(cls, path: str | Path) -> Bootstrap:
        source = Path(path)
        try:
            text = source.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read configuration {source}: {exc}") from exc
        try:
            document = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1} column {mark.column + 1}" if mark is not None else ""
            raise ConfigurationError(f"{source}: invalid YAML{where}: {exc}") from exc
        logger.debug("configuration loaded from %s", source)
        return cls(document or {})

    def override(self, identity: str, **values: Any) -> None:
        """Replace options of one section; every built section and resource is rebuilt on next access."""
        tree = copy.deepcopy(self.get_registry_options(SectionAbstract.kind()))
        tree.setdefault(identity, {}).update(values)
        options = dict(self.options)
        options[SectionAbstract.kind()] = tree
        self.set_options(options)

    def set_resource_option(self, identity: str, key: str, value: Any) -> None:
        tree = copy.deepcopy(self.get_registry_options(ResourceAbstract.kind()))
        tree.setdefault(identity, {})[key] = value
        self.set_registry_options(ResourceAbstract.kind(), tree)

    def to_document(self) -> Dict[str, Any]:
        """Every section with its effective values, as a YAML-ready mapping."""
        registry = self.get_registry(SectionAbstract.kind())
        return {identity: self.section(klass).to_options() for identity, klass in registry.registered.items()}

    # == Access ===========================================================

    def section(self, ident_or_type: Union[str, Type[SectionT]]) -> SectionT:
        """Get a configuration section by identity or type."""
        section = self.get(SectionAbstract.kind(), Resolve(ident_or_type).identity)
        if isinstance(ident_or_type, type) and not isinstance(section, ident_or_type):
            raise TypeError(f"Ident('{Resolve(ident_or_type).identity}') is not an instance of {ident_or_type.__name__}")
        return cast(SectionT, section)

    def get_resource(self, ident_or_type: Union[str, Type[ResourceT]]) -> ResourceT:
        """Get a resource by ident or type ensuring the correct type is returned."""
        resolve = Resolve(ident_or_type)
        resource = self.get(ResourceAbstract.kind(), resolve.identity)
        expected_type = ident_or_type if isinstance(ident_or_type, type) else ResourceAbstract
        if not isinstance(resource, expected_type):
            raise TypeError(f"Ident('{resolve.identity}') is not an instance of {expected_type.__name__}")
        return cast(ResourceT, resource)

    @property
    def anchors(self) -> AnchorsResource:
        return self.get_resource(AnchorsResource)

    def detector(self, checkpoint: Optional[str | Path] = None) -> DetectorResource:
        if checkpoint is not None:
            self.set_resource_option(DetectorResource.identity(), "checkpoint", str(checkpoint))
        return self.get_resource(DetectorResource)

    @property
    def seed(self) -> int:
        return self.section(TrainConfig).seed

    @property
    def deterministic(self) -> bool:
        return self.section(TrainConfig).deterministic

    def summary(self) -> str:
        net, anchor = self.section(NetConfig), self.section(AnchorConfig)
        return (f"net C_b={net.backbone_channels} tdm={net.tdm_channels} fpn={net.fpn_channels} "
                f"K={net.num_classes} A={net.anchors_per_position} srm={net.srm_mode}; "
                f"anchors strides={list(anchor.strides)} scales={anchor.num_scales}")
