"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MOBICKPT"                      8-byte magic
    uint32 format_version
    uint32 header_length
    header                           UTF-8 JSON, sorted keys; lists section
                                     names and shapes in file order
    per section:
        uint16 name_length, name     UTF-8
        uint64 count
        count x float32              row-major (C order) values

VAE weights live in sections prefixed ``vae.``; denoiser weights in ``model.``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MOBICKPT"
FORMAT_VERSION = 1


def save_container(path, header: dict, sections: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["sections"] = [[name, list(np.shape(arr))] for name, arr in sections.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name, arr in sections.items():
            raw = name.encode("utf-8")
            flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())
    tmp.replace(path)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint container")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    sections = {}
    for name, shape in header["sections"]:
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        stored = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if stored != name:
            raise ValueError(f"section order mismatch: expected {name!r}, found {stored!r}")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        sections[name] = arr.copy()
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes in {path}")
    return header, sections


def module_sections(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().to(torch.float32).numpy()
            for k, v in module.state_dict().items()}


def load_module_sections(prefix: str, module: torch.nn.Module, sections: dict[str, np.ndarray]) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(np.array(v)) for k, v in sections.items()
             if k.startswith(prefix + ".")}
    if not state:
        raise KeyError(f"checkpoint has no {prefix!r} sections")
    module.load_state_dict(state)
