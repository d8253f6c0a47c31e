"""Checkpoint files: one .npz with named float64 parameter arrays plus a
JSON metadata entry (format version and the full config echo). Arrays are
stored and restored bit-exactly."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import SeededRng
from .config import RunConfig
from .flow import FlowParams, init_flow
from .spherenet import SphereNetParams, init_spherenet

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path, config: RunConfig, flow_params: FlowParams,
                    sphere_params: SphereNetParams | None = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "has_spherenet": sphere_params is not None,
    }
    arrays = {name: arr for name, arr in flow_params.named_params()}
    if sphere_params is not None:
        arrays.update({name: arr for name, arr in sphere_params.named_params()})
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                                      dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[RunConfig, FlowParams, SphereNetParams | None]:
    with np.load(Path(path)) as data:
        if _META_KEY not in data:
            raise ValueError(f"{path} is not a molflow checkpoint")
        meta = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        config = RunConfig.from_dict(meta["config"])
        flow_params = init_flow(config.flow_config(), SeededRng(0))
        for name, arr in flow_params.named_params():
            stored = data[name]
            if stored.shape != arr.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            flow_params.set_param(name, stored.astype(np.float64))
        sphere_params = None
        if meta["has_spherenet"]:
            sphere_params = init_spherenet(config.sphere_config(), SeededRng(0))
            for name, arr in sphere_params.named_params():
                stored = data[name]
                if stored.shape != arr.shape:
                    raise ValueError(f"checkpoint shape mismatch for {name}")
                sphere_params.set_param(name, stored.astype(np.float64))
    return config, flow_params, sphere_params
