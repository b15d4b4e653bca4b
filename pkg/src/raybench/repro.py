"""Reproducibility headers written into every output file."""
from __future__ import annotations

import hashlib
import json
import os
import platform

import numpy as np

from . import __version__


def hardware_descriptor() -> str:
    return (
        f"{platform.system()} {platform.machine()}; cpus={os.cpu_count()}; "
        f"python={platform.python_version()}; numpy={np.__version__}"
    )


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def param_hash(params: dict) -> str:
    blob = json.dumps(_plain(params), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header_lines(params: dict) -> list[str]:
    return [
        f"engine: raybench {__version__}",
        f"param_hash: {param_hash(params)}",
        f"hardware: {hardware_descriptor()}",
    ]


def header_dict(params: dict) -> dict:
    return {
        "engine": f"raybench {__version__}",
        "param_hash": param_hash(params),
        "hardware": hardware_descriptor(),
    }


def write_header(fh, params: dict, prefix: str = "# ") -> None:
    for line in header_lines(params):
        fh.write(prefix + line + "\n")
