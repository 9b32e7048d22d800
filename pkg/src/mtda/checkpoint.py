"""Checkpoint container.

Layout::

    b"MTDACKPT" | u32 version | u64 header length | header JSON | tensor payload

The header (UTF-8 JSON, sorted keys) lists every tensor with dtype, shape,
offset and size, together with the run configuration, counters, history, and
the preset/seed/shape metadata needed to rebuild the networks. A SHA-256 of
the payload guards against truncation and corruption. Writing the same state
twice produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .models import ClassifierNetwork, DomainClassifier, build_backbone
from .trainer import RunState, Slot, TrainConfig, make_optimizer

MAGIC = b"MTDACKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _module_tensors(prefix: str, module: torch.nn.Module, out: dict) -> None:
    for name, t in module.state_dict().items():
        out[f"{prefix}.{name}"] = t


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer, out: dict) -> None:
    state = opt.state_dict()["state"]
    for idx in sorted(state):
        buf = state[idx].get("momentum_buffer")
        if buf is not None:
            out[f"{prefix}.{idx}.momentum_buffer"] = buf


def _slot_meta(slot: Slot) -> dict:
    return {"net": slot.net.describe(), "dclf": {"feature_dim": slot.dclf.feature_dim,
                                                 "grl_coefficient": slot.dclf.grl_coefficient,
                                                 "seed": slot.dclf.seed}}


def checkpoint_bytes(state: RunState) -> bytes:
    tensors: dict = {}
    slots = [("student", state.student)] + [(f"teacher.{i}", t) for i, t in enumerate(state.teachers)]
    for name, slot in slots:
        _module_tensors(f"{name}.net", slot.net, tensors)
        _module_tensors(f"{name}.dclf", slot.dclf, tensors)
        _optimizer_tensors(f"{name}.opt", slot.optimizer, tensors)
    table, chunks, offset = [], [], 0
    for key in tensors:
        arr = tensors[key].detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": key, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "da_steps": state.da_steps,
        "kd_steps": state.kd_steps,
        "beta": state.beta,
        "history": state.history,
        "target_ids": state.target_ids,
        "student": _slot_meta(state.student),
        "teachers": [_slot_meta(t) for t in state.teachers],
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def checkpoint_save(state: RunState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def _parse(raw: bytes, path) -> tuple:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[start:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, expected {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiu" else entry["dtype"],
                            count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, tensors


def _rebuild_slot(prefix, meta, tensors, lr, config: TrainConfig) -> Slot:
    n = meta["net"]
    net: ClassifierNetwork = build_backbone(n["preset"], n["input_shape"], n["num_classes"], seed=n["seed"])
    d = meta["dclf"]
    dclf = DomainClassifier(d["feature_dim"], d["grl_coefficient"], seed=d["seed"])
    for module, sub in ((net, "net"), (dclf, "dclf")):
        own = {k[len(prefix) + len(sub) + 2:]: v for k, v in tensors.items() if k.startswith(f"{prefix}.{sub}.")}
        expected = module.state_dict()
        if set(own) != set(expected):
            raise CheckpointError(f"{prefix}.{sub}: tensor names do not match preset {n['preset']!r}")
        for k, v in own.items():
            if v.dtype != expected[k].dtype:
                raise CheckpointError(
                    f"{prefix}.{sub}.{k} stored as {v.dtype}, runtime uses {expected[k].dtype}; "
                    "check MTDA_DETERMINISTIC"
                )
        module.load_state_dict(own)
    opt = make_optimizer(list(net.parameters()) + list(dclf.parameters()), lr, config.momentum, config.weight_decay)
    sd = opt.state_dict()
    mom = f"{prefix}.opt."
    for k, v in tensors.items():
        if k.startswith(mom):
            idx = int(k[len(mom):].split(".")[0])
            sd["state"][idx] = {"momentum_buffer": v}
    opt.load_state_dict(sd)
    return Slot(net, dclf, opt)


def checkpoint_load(path) -> RunState:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    header, tensors = _parse(raw, path)
    config = TrainConfig.from_dict(header["config"])
    student = _rebuild_slot("student", header["student"], tensors, config.kd_learning_rate, config)
    teachers = [_rebuild_slot(f"teacher.{i}", m, tensors, config.uda_learning_rate, config)
                for i, m in enumerate(header["teachers"])]
    return RunState(config=config, student=student, teachers=teachers, target_ids=header["target_ids"],
                    epoch=header["epoch"], da_steps=header["da_steps"], kd_steps=header["kd_steps"],
                    beta=header["beta"], history=header["history"])
