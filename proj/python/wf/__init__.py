"""Python access to the weight-space toolkit core."""

from importlib import resources

from ._core import (
    TokenSequence,
    WfError,
    infer_architecture,
    load_keywords,
    parse,
    read_file,
    serialize,
    tokenize,
    write_file,
)

__all__ = [
    "TokenSequence",
    "WfError",
    "infer_architecture",
    "keywords",
    "keywords_path",
    "load_keywords",
    "parse",
    "read_file",
    "serialize",
    "tokenize",
    "write_file",
]


def keywords_path():
    """Path of the shipped keyword vocabulary."""
    return resources.files(__name__) / "data" / "keywords.txt"


def keywords():
    return load_keywords(str(keywords_path()))
