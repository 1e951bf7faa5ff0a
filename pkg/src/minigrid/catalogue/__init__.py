from .namespace import (
    DEFAULT_SHARD,
    DIRECTORY,
    FILE,
    PROC,
    SYMLINK,
    Catalogue,
    CatalogueEntry,
    DirectoryShard,
    PhysicalLocation,
    TagTable,
    allowed,
    normpath,
)
from .query import Comparison, LfnQuery, Predicate, parse_predicate, parse_query

__all__ = [
    "Catalogue",
    "CatalogueEntry",
    "Comparison",
    "DEFAULT_SHARD",
    "DIRECTORY",
    "DirectoryShard",
    "FILE",
    "LfnQuery",
    "PROC",
    "PhysicalLocation",
    "Predicate",
    "SYMLINK",
    "TagTable",
    "allowed",
    "normpath",
    "parse_predicate",
    "parse_query",
]
