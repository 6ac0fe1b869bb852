"""Helpers for arbitrarily nested structures of tensors (dict/list/tuple leaves)."""

from __future__ import annotations


def is_leaf(obj) -> bool:
    return not isinstance(obj, (dict, list, tuple))


def flatten(structure) -> list:
    """Depth-first leaves; dict entries ordered by sorted key."""
    out = []
    _flatten_into(structure, out)
    return out


def _flatten_into(structure, out: list):
    if isinstance(structure, dict):
        for key in sorted(structure):
            _flatten_into(structure[key], out)
    elif isinstance(structure, (list, tuple)):
        for item in structure:
            _flatten_into(item, out)
    else:
        out.append(structure)


def unflatten(template, leaves: list):
    """Rebuild a structure shaped like `template` from a flat leaf list."""
    it = iter(leaves)
    result = _unflatten_from(template, it)
    try:
        next(it)
    except StopIteration:
        return result
    raise ValueError("unflatten: more leaves than template positions")


def _unflatten_from(template, it):
    if isinstance(template, dict):
        return {key: _unflatten_from(template[key], it) for key in sorted(template)}
    if isinstance(template, (list, tuple)):
        seq = [_unflatten_from(item, it) for item in template]
        return type(template)(seq) if isinstance(template, tuple) else seq
    try:
        return next(it)
    except StopIteration:
        raise ValueError("unflatten: fewer leaves than template positions") from None


def map_structure(fn, structure):
    return unflatten(structure, [fn(leaf) for leaf in flatten(structure)])


def assert_same_structure(a, b, what: str = "structure"):
    if _signature(a) != _signature(b):
        raise ValueError(f"{what}: nesting mismatch ({_signature(a)} vs {_signature(b)})")


def _signature(structure):
    if isinstance(structure, dict):
        return ("d", tuple((k, _signature(v)) for k, v in sorted(structure.items())))
    if isinstance(structure, (list, tuple)):
        return ("l", tuple(_signature(v) for v in structure))
    return "*"
