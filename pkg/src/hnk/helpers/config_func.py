"""
Strict conversion between config sections (plain mappings) and the typed config dataclasses.
Unknown keys and wrongly typed values are rejected, naming the offending key.
"""
import dataclasses
import typing
from typing import Any, Mapping, Type, TypeVar

from ..exception import HnkExceptBadConfig

ConfigT = TypeVar("ConfigT")


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is Any:
        return value
    if dataclasses.is_dataclass(hint):
        return from_mapping(hint, value, where)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        for option in args:
            if option is type(None):
                continue
            try:
                return _coerce(value, option, where)
            except HnkExceptBadConfig:
                continue
        raise HnkExceptBadConfig(f"Config value {where} = {value!r} does not match any of {args}")
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise HnkExceptBadConfig(f"Config value {where} must be a list, got {value!r}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(args) != len(value):
                raise HnkExceptBadConfig(f"Config value {where} must have {len(args)} entries, got {len(value)}")
            return tuple(_coerce(item, arg, f"{where}[{i}]") for i, (item, arg) in enumerate(zip(value, args)))
        item_hint = args[0] if args else Any
        items = [_coerce(item, item_hint, f"{where}[{i}]") for i, item in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, Mapping):
            raise HnkExceptBadConfig(f"Config value {where} must be a table, got {value!r}")
        key_hint, value_hint = args if args else (Any, Any)
        return {_coerce(k, key_hint, where): _coerce(v, value_hint, f"{where}.{k}") for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise HnkExceptBadConfig(f"Config value {where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise HnkExceptBadConfig(f"Config value {where} must be an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise HnkExceptBadConfig(f"Config value {where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise HnkExceptBadConfig(f"Config value {where} must be a string, got {value!r}")
        return str(value)
    raise HnkExceptBadConfig(f"Config value {where} has unsupported type {hint}")


def from_mapping(cls: Type[ConfigT], mapping: Mapping, section: str, check: bool = True) -> ConfigT:
    """Build a config dataclass from one config section. With check, its validate() runs as well"""
    if not isinstance(mapping, Mapping):
        raise HnkExceptBadConfig(f"Config section [{section}] must be a table")
    hints = typing.get_type_hints(cls)
    allowed = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise HnkExceptBadConfig(f"Unknown key(s) {', '.join(unknown)} in section [{section}]. "
                                 f"Allowed keys: {', '.join(sorted(allowed))}")
    kwargs = {name: _coerce(value, hints[name], f"{section}.{name}") for name, value in mapping.items()}
    config = cls(**kwargs)
    if check:
        config.validate()
    return config


def to_mapping(config) -> dict:
    """Plain nested dict with lists instead of tuples, ready for TOML or JSON. Unset optionals are left out"""
    def plain(value):
        if dataclasses.is_dataclass(value):
            return to_mapping(value)
        if isinstance(value, (list, tuple)):
            return [plain(item) for item in value]
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        return value

    return {f.name: plain(getattr(config, f.name)) for f in dataclasses.fields(config)
            if f.init and getattr(config, f.name) is not None}
