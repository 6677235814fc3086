import os
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .config import MODEL_KINDS, ModelConfig
from .data import Vocab, dump_names, parse_names
from .errors import ModelFormatError
from .model import DTYPE, KGEModel
from .observer import Observer

MAGIC = b"KGEM"
FORMAT_VERSION = 1
# magic, version, model kind, m, n, |E|, |R|
_HEADER = struct.Struct("<4sIBIIQQ")
_LENGTH = struct.Struct("<Q")

MODEL_FILE = "model.kgem"
STATE_FILE = "trainer_state.safetensors"


def _table_bytes(table: torch.Tensor) -> bytes:
    return np.ascontiguousarray(table.detach().cpu().numpy(), dtype="<f8").tobytes()


def save_model(path: str | Path, model: KGEModel, vocab: Vocab):
    if vocab.num_entities != model.num_entities or vocab.num_relations != model.num_relations:
        raise ModelFormatError(
            f"vocabulary ({vocab.num_entities}, {vocab.num_relations}) does not match "
            f"model tables ({model.num_entities}, {model.num_relations})"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        MODEL_KINDS.index(model.kind),
        model.config.dim,
        model.n,
        model.num_entities,
        model.num_relations,
    )
    entity_dump = dump_names(vocab.entity_names).encode("utf-8")
    relation_dump = dump_names(vocab.relation_names).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(_table_bytes(model.entity))
        f.write(_table_bytes(model.relation))
        for dump in (entity_dump, relation_dump):
            f.write(_LENGTH.pack(len(dump)))
            f.write(dump)
    os.replace(tmp, path)


def _read_exact(f, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return data


def load_model(path: str | Path) -> tuple[KGEModel, Vocab]:
    path = Path(path)
    if not path.is_file():
        raise ModelFormatError(f"model file not found: {path}")
    with open(path, "rb") as f:
        magic, version, kind_id, m, n, num_entities, num_relations = _HEADER.unpack(
            _read_exact(f, _HEADER.size, "header")
        )
        if magic != MAGIC:
            raise ModelFormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"{path}: unsupported format version {version}")
        if kind_id >= len(MODEL_KINDS):
            raise ModelFormatError(f"{path}: unknown model kind id {kind_id}")
        tables = []
        for rows, what in ((num_entities, "entity table"), (num_relations, "relation table")):
            raw = _read_exact(f, rows * m * 8, what)
            tables.append(torch.from_numpy(np.frombuffer(raw, dtype="<f8").reshape(rows, m).astype(np.float64)))
        names = []
        for what in ("entity names", "relation names"):
            (length,) = _LENGTH.unpack(_read_exact(f, _LENGTH.size, what))
            names.append(parse_names(_read_exact(f, length, what).decode("utf-8"), f"{path}:{what}"))

    kind = MODEL_KINDS[kind_id]
    config = ModelConfig(model_kind=kind, dim=m, num_scalars=n if kind == "analogy" else None)
    vocab = Vocab(names[0], names[1])
    if vocab.num_entities != num_entities or vocab.num_relations != num_relations:
        raise ModelFormatError(f"{path}: vocabulary dump does not match table sizes")
    model = KGEModel.from_tables(config, tables[0].to(DTYPE), tables[1].to(DTYPE))
    return model, vocab


@dataclass
class TrainerState:
    epoch: int
    entity_sum: torch.Tensor
    relation_sum: torch.Tensor


def save_checkpoint(
    checkpoint_dir: str | Path,
    epoch: int,
    model: KGEModel,
    vocab: Vocab,
    entity_sum: torch.Tensor,
    relation_sum: torch.Tensor,
    max_checkpoints: int = 3,
    observer: Observer | None = None,
) -> Path:
    root = Path(checkpoint_dir)
    target = root / f"checkpoint_{epoch}"
    target.mkdir(parents=True, exist_ok=True)
    save_model(target / MODEL_FILE, model, vocab)
    save_file(
        {"entity_sum": entity_sum.detach().clone().contiguous(), "relation_sum": relation_sum.detach().clone().contiguous()},
        str(target / STATE_FILE),
        metadata={"epoch": str(epoch)},
    )
    ckpts = sorted(root.glob("checkpoint_*"), key=lambda p: int(p.name.split("_")[-1]))
    for old in ckpts[: max(len(ckpts) - max_checkpoints, 0)]:
        if observer is not None:
            observer.warn(f"Removing old checkpoint {old.name} (keeping {max_checkpoints})")
        if old.is_dir():
            shutil.rmtree(old)
        else:
            old.unlink()
    return target


def load_latest_checkpoint(
    checkpoint_dir: str | Path, observer: Observer | None = None
) -> tuple[KGEModel, Vocab, TrainerState] | None:
    root = Path(checkpoint_dir)
    if not root.is_dir():
        return None
    ckpts = sorted(root.glob("checkpoint_*"), key=lambda p: int(p.name.split("_")[-1]), reverse=True)
    for path in ckpts:
        model_path, state_path = path / MODEL_FILE, path / STATE_FILE
        if not model_path.exists() or not state_path.exists():
            if observer is not None:
                observer.warn(f"Incomplete checkpoint {path}. Trying next.")
            continue
        try:
            model, vocab = load_model(model_path)
            tensors = load_file(str(state_path))
        except (ModelFormatError, OSError, ValueError) as e:
            if observer is not None:
                observer.error(f"Corrupted or invalid checkpoint {path}: {e}. Trying next.")
            continue
        epoch = int(path.name.split("_")[-1])
        return model, vocab, TrainerState(epoch, tensors["entity_sum"], tensors["relation_sum"])
    return None
