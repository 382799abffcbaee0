import hashlib
import json
import os

import torch
import yaml


def get_obj_path(target: any, path: tuple, missing=None):
    """
    Traverse a nested object using a tuple of keys, returning the last resolved
    value in the path. If any key is not found, return 'missing' (default None).

    >>> get_obj_path({'a': {'b': {'c': 1}}}, ('a', 'b', 'c'))
    1
    >>> get_obj_path({'a': {'b': {'c': 1}}}, ('a', 'b', 'd')) is None
    True
    >>> get_obj_path({'a': {'b': {'c': 1}}}, ('a', 'b', 'd'), missing=2)
    2
    >>> get_obj_path({'a': [100, {'c': 1}]}, ('a', 1, 'c'))
    1
    """
    try:
        for key in path:
            target = target[key]
    except (KeyError, IndexError, TypeError):
        return missing

    return target


def set_obj_path(target: dict, path: tuple, value) -> dict:
    """
    Sets 'value' in a nested dictionary, creating intermediate dictionaries
    when needed. Returns the (mutated) target.

    >>> set_obj_path({}, ('train', 'seed'), 7)
    {'train': {'seed': 7}}
    """
    node = target
    for key in path[:-1]:
        if not isinstance(node.get(key), dict):
            node[key] = {}
        node = node[key]
    node[path[-1]] = value
    return target


def parse_override(text: str) -> tuple[tuple, any]:
    """
    Parses a command-line override such as 'train.seed=7' into a key path and
    a value. The value is parsed as YAML, so numbers, booleans and lists work.

    >>> parse_override("mask.r_p=0.75")
    (('mask', 'r_p'), 0.75)
    >>> parse_override("mask.strategy=dcp")
    (('mask', 'strategy'), 'dcp')
    """
    if "=" not in text:
        raise ValueError(f"Override '{text}' must have the form key.path=value")

    key, raw_value = text.split("=", 1)
    path = tuple(k for k in key.strip().split(".") if k != "")
    if len(path) == 0:
        raise ValueError(f"Override '{text}' has an empty key")

    return path, yaml.safe_load(raw_value)


def config_hash(config: dict) -> str:
    """
    Returns a short, stable hash of a configuration dictionary.
    """
    payload = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def configure_torch(num_threads: int = 1, deterministic: bool = True) -> None:
    """
    Applies the single-threaded deterministic execution mode that training
    and evaluation runs rely on for bit-identical results.
    """
    torch.set_num_threads(num_threads)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
