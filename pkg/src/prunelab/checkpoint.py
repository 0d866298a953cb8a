"""Bit-exact persistence and plug-and-play module swapping.

A checkpoint never stores the frozen backbone: the dense base is a pure
function of (model config, base seed), so saving the pruning plan plus the
kept mask values is enough to rebuild the pruned backbone exactly.  What
does get stored raw is everything training produced: module factors, the
classifier, and the masks.

Wire format, all little-endian:

    magic "LPFT" | u32 version | u64 header length | JSON header
    | float64 tensor payloads in manifest order | 8-byte checksum

The checksum is the leading 8 bytes of SHA-256 over everything before it,
so truncation and single-byte corruption both surface as checksum errors.
Files are written to a temp name and atomically renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import hashlib
import numpy as np

from .errors import (BadChecksumError, BadMagicError, BadVersionError,
                     CheckpointError, CompatibilityError)
from .masks import MaskSet
from .model import FoundationModel, ModelConfig
from .peft import AttachPoint, PeftModule, PeftSet
from .plan import PruningPlan
from .tensor import Tensor

MAGIC = b"LPFT"
FORMAT_VERSION = 1

ModuleKey = Tuple[int, str]


@dataclass
class Checkpoint:
    base_seed: int
    model_config: ModelConfig
    plan: PruningPlan
    mask_head_values: List[np.ndarray]
    mask_ffn_values: List[np.ndarray]
    peft_kind: str
    peft_rank: int
    peft_scale: float
    peft_activation: str
    peft_weights: Dict[ModuleKey, Dict[str, object]]
    classifier: np.ndarray


def build_checkpoint(base_seed: int, model: FoundationModel, plan: PruningPlan,
                     masks: MaskSet, peft: PeftSet) -> Checkpoint:
    """Snapshot a trained assembly; mask values are taken for kept units only."""
    head_vals = [masks.head[li].data[sorted(plan.keep_heads[li])].copy()
                 for li in range(len(masks.head))]
    ffn_vals = [masks.ffn[li].data[sorted(plan.keep_ffn[li])].copy()
                for li in range(len(masks.ffn))]
    weights: Dict[ModuleKey, Dict[str, object]] = {}
    rank = 1
    scale = 1.0
    activation = model.config.activation
    for key, m in peft.modules.items():
        weights[key] = {
            "w_down": m.w_down.data.copy(),
            "w_up": m.w_up.data.copy(),
            "active_ranks": list(m.active_ranks),
        }
        rank, scale, activation = m.rank, m.scale, m.activation
    return Checkpoint(
        base_seed=base_seed, model_config=model.config, plan=plan,
        mask_head_values=head_vals, mask_ffn_values=ffn_vals,
        peft_kind=peft.kind, peft_rank=rank, peft_scale=scale,
        peft_activation=activation, peft_weights=weights,
        classifier=model.w_cls.data.copy())


def _encode(ckpt: Checkpoint) -> bytes:
    names: List[str] = []
    arrays: List[np.ndarray] = []
    for li, arr in enumerate(ckpt.mask_head_values):
        names.append(f"mask_head.{li}")
        arrays.append(arr)
    for li, arr in enumerate(ckpt.mask_ffn_values):
        names.append(f"mask_ffn.{li}")
        arrays.append(arr)
    module_meta = []
    for (layer, site), w in ckpt.peft_weights.items():
        names.append(f"peft.{layer}.{site}.w_down")
        arrays.append(w["w_down"])
        names.append(f"peft.{layer}.{site}.w_up")
        arrays.append(w["w_up"])
        module_meta.append([layer, site, list(w["active_ranks"])])
    names.append("classifier")
    arrays.append(ckpt.classifier)

    header = {
        "format_version": FORMAT_VERSION,
        "base_seed": ckpt.base_seed,
        "model": asdict(ckpt.model_config),
        "plan": {
            "keep_heads": ckpt.plan.keep_heads,
            "keep_ffn": ckpt.plan.keep_ffn,
            "keep_modules": [[l, s] for l, s in ckpt.plan.keep_modules],
            "keep_ranks": [[l, s, list(r)] for (l, s), r in ckpt.plan.keep_ranks.items()],
        },
        "peft": {
            "kind": ckpt.peft_kind,
            "rank": ckpt.peft_rank,
            "scale": ckpt.peft_scale,
            "activation": ckpt.peft_activation,
            "modules": module_meta,
        },
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<Q", len(header_bytes)), header_bytes]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()[:8]


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    blob = _encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(blob) < 8:
        raise BadChecksumError(f"{path}: truncated before version field")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 24:
        raise BadChecksumError(f"{path}: truncated header")
    if hashlib.sha256(blob[:-8]).digest()[:8] != blob[-8:]:
        raise BadChecksumError(f"{path}: checksum mismatch")

    header_len = struct.unpack("<Q", blob[8:16])[0]
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None

    offset = 16 + header_len
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        tensors[entry["name"]] = np.frombuffer(
            blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob) - 8:
        raise CheckpointError(f"{path}: payload size disagrees with manifest")

    model_config = ModelConfig(**header["model"])
    plan = PruningPlan(
        keep_heads=[list(h) for h in header["plan"]["keep_heads"]],
        keep_ffn=[list(f) for f in header["plan"]["keep_ffn"]],
        keep_modules=[(int(l), str(s)) for l, s in header["plan"]["keep_modules"]],
        keep_ranks={(int(l), str(s)): list(r)
                    for l, s, r in header["plan"]["keep_ranks"]},
    )
    pf = header["peft"]
    weights: Dict[ModuleKey, Dict[str, object]] = {}
    for layer, site, active in pf["modules"]:
        key = (int(layer), str(site))
        weights[key] = {
            "w_down": tensors[f"peft.{layer}.{site}.w_down"],
            "w_up": tensors[f"peft.{layer}.{site}.w_up"],
            "active_ranks": [int(r) for r in active],
        }
    L = model_config.num_layers
    return Checkpoint(
        base_seed=int(header["base_seed"]),
        model_config=model_config,
        plan=plan,
        mask_head_values=[tensors[f"mask_head.{li}"] for li in range(L)],
        mask_ffn_values=[tensors[f"mask_ffn.{li}"] for li in range(L)],
        peft_kind=pf["kind"], peft_rank=int(pf["rank"]),
        peft_scale=float(pf["scale"]), peft_activation=pf["activation"],
        peft_weights=weights, classifier=tensors["classifier"])


def rebuild_masks(ckpt: Checkpoint) -> MaskSet:
    """Full-length mask vectors: stored values at kept units, zero elsewhere."""
    cfg = ckpt.model_config
    masks = MaskSet([cfg.num_heads] * cfg.num_layers, [cfg.ffn_dim] * cfg.num_layers)
    for li in range(cfg.num_layers):
        masks.head[li].data[:] = 0.0
        masks.head[li].data[sorted(ckpt.plan.keep_heads[li])] = ckpt.mask_head_values[li]
        masks.ffn[li].data[:] = 0.0
        masks.ffn[li].data[sorted(ckpt.plan.keep_ffn[li])] = ckpt.mask_ffn_values[li]
    masks.set_trainable(False)
    return masks


def instantiate(ckpt: Checkpoint) -> Tuple[FoundationModel, PeftSet]:
    """Rebuild the runnable pruned assembly from the dense base recipe."""
    dense = FoundationModel(ckpt.model_config, seed=ckpt.base_seed)
    masks = rebuild_masks(ckpt)
    model = dense.materialize(ckpt.plan, masks)
    model.w_cls = Tensor(ckpt.classifier.copy(), requires_grad=True)
    modules: Dict[ModuleKey, PeftModule] = {}
    for key, w in ckpt.peft_weights.items():
        layer, site = key
        modules[key] = PeftModule(
            kind=ckpt.peft_kind, attach=AttachPoint(layer, site),
            w_down=Tensor(w["w_down"].copy(), requires_grad=True),
            w_up=Tensor(w["w_up"].copy(), requires_grad=True),
            rank=ckpt.peft_rank, scale=ckpt.peft_scale,
            activation=ckpt.peft_activation,
            active_ranks=list(w["active_ranks"]))
    return model, PeftSet(ckpt.peft_kind, modules)


def check_foundation_compat(base: Checkpoint, adapter: Checkpoint) -> None:
    """Adapters are interchangeable only over an identical pruned backbone."""
    if asdict(base.model_config) != asdict(adapter.model_config):
        raise CompatibilityError("model configurations differ")
    if base.base_seed != adapter.base_seed:
        raise CompatibilityError(
            f"base seeds differ: {base.base_seed} vs {adapter.base_seed}")
    for li, (a, b) in enumerate(zip(base.plan.keep_heads, adapter.plan.keep_heads)):
        if list(a) != list(b):
            first = next(i for i, (x, y) in enumerate(
                zip(list(a) + [None], list(b) + [None])) if x != y)
            raise CompatibilityError(
                f"head keep-sets differ at layer {li}, position {first}: "
                f"{a} vs {b}")
    for li, (a, b) in enumerate(zip(base.plan.keep_ffn, adapter.plan.keep_ffn)):
        if list(a) != list(b):
            first = next(i for i, (x, y) in enumerate(
                zip(list(a) + [None], list(b) + [None])) if x != y)
            raise CompatibilityError(
                f"FFN keep-sets differ at layer {li}, position {first}")
    for li, (a, b) in enumerate(zip(base.mask_head_values, adapter.mask_head_values)):
        if not np.array_equal(a, b):
            raise CompatibilityError(f"kept head mask values differ at layer {li}")
    for li, (a, b) in enumerate(zip(base.mask_ffn_values, adapter.mask_ffn_values)):
        if not np.array_equal(a, b):
            raise CompatibilityError(f"kept FFN mask values differ at layer {li}")


def swap_adapter(base: Checkpoint, adapter: Checkpoint) -> Tuple[FoundationModel, PeftSet]:
    """Serve the adapter's task over the base checkpoint's pruned backbone."""
    check_foundation_compat(base, adapter)
    return instantiate(adapter)
