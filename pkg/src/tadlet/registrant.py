"""Abstract base class for everything a run registers: config sections and resources."""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Any, Dict, Self

from .helpers import snake_case
from .types import RegistrantIdentity, RegistrantKind


if TYPE_CHECKING:
    from .registry import Registry


class RegistrantAbstract(ABC):
    """Base class for all registrants managed by a `Registrar`.

    A registrant is addressed by `(kind, identity)`, and is built from the
    options subtree `options[kind][identity]` of its registrar.
    """

    # == Class Methods =========================================================

    @classmethod
    @abstractmethod
    def kind(cls) -> RegistrantKind:
        """Returns the _kind_ of this registrant as a string. (ex. 'section', 'resource')"""
        raise NotImplementedError()

    @classmethod
    def identity(cls) -> RegistrantIdentity:
        """Derive identity from class name by converting to snake_case and stripping kind suffix."""
        kind_suffix = f"_{cls.kind()}"
        class_name_snake = snake_case(cls.__name__)
        if class_name_snake.endswith(kind_suffix):
            return class_name_snake[:-len(kind_suffix)]
        return class_name_snake

    @classmethod
    @abstractmethod
    def build(cls, registry: Registry[Any]) -> Self:
        """Create the single instance the registry memoizes for this identity."""
        raise NotImplementedError()

    @classmethod
    def options_from(cls, registry: Registry[Any]) -> Dict[str, Any]:
        """The options subtree for this registrant, `{}` when none was configured."""
        return dict(registry.get_registrant_options(cls.identity()) or {})
