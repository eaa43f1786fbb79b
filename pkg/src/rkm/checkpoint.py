"""
Binary checkpoints.

Layout (little-endian):

    b"RKMC", version u32, variant u8, m d n dilation u32,
    sigma_i_sq sigma_f_sq layer_norm_eps f64, flags u32,
    config: u32 length + UTF-8 JSON,
    sections: u32 count, each a tag u8 followed by its payload.

Array payloads are a u32 count of ``u16 name length, name, u8 ndim,
u32 shape..., f64 row-major data`` records; the vocabulary payload is a u32
length plus a UTF-8 JSON list.
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np
from pydantic import ValidationError

from rkm.cells import CellParams, init_params
from rkm.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from rkm.engine import Array, Parameter
from rkm.errors import CheckpointError
from rkm.heads import Classifier, LanguageModel
from rkm.models import CellConfig, CellVariant, ClassifierConfig, LMConfig

logger = logging.getLogger(__name__)

TAG_CELL = 1
TAG_WAVELET = 2
TAG_HEAD = 3
TAG_VOCAB = 4

FLAG_LAYER_NORM = 1 << 0
FLAG_LEARN_GAINS = 1 << 1
FLAG_NGRAM_GATES = 1 << 2
FLAG_WAVELET = 1 << 3

_HEADER = struct.Struct("<4sIBIIIIdddI")

Model = Classifier | LanguageModel


def _flags(cfg: CellConfig) -> int:
    return (
        (FLAG_LAYER_NORM if cfg.use_layer_norm else 0)
        | (FLAG_LEARN_GAINS if cfg.learn_gains else 0)
        | (FLAG_NGRAM_GATES if cfg.ngram_gates else 0)
        | (FLAG_WAVELET if cfg.wavelet else 0)
    )


def _write_arrays(out: BinaryIO, arrays: dict[str, Array]) -> None:
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        data = np.asarray(arr, dtype="<f8")
        out.write(struct.pack("<H", len(encoded)) + encoded)
        out.write(struct.pack("<B", data.ndim))
        out.write(struct.pack(f"<{data.ndim}I", *data.shape))
        out.write(data.tobytes())


def _cell_sections(cell: CellParams) -> list[tuple[int, Any]]:
    sections: list[tuple[int, Any]] = [
        (TAG_CELL, {name: p.data for name, p in cell.params.items()})
    ]
    if cell.wavelet is not None:
        arrays = {p.name: p.data for p in cell.wavelet.parameters()}
        arrays["wavelet.grid"] = cell.wavelet.time_grid
        sections.append((TAG_WAVELET, arrays))
    return sections


def _write(path: Path, cell_cfg: CellConfig, config: dict, sections: list[tuple[int, Any]]) -> Path:
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            cell_cfg.variant.tag,
            cell_cfg.m,
            cell_cfg.d,
            cell_cfg.n,
            cell_cfg.dilation,
            cell_cfg.sigma_i_sq,
            cell_cfg.sigma_f_sq,
            cell_cfg.layer_norm_eps,
            _flags(cell_cfg),
        )
    )
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<I", len(sections)))
    for tag, payload in sections:
        buf.write(struct.pack("<B", tag))
        if tag == TAG_VOCAB:
            text = json.dumps(payload).encode("utf-8")
            buf.write(struct.pack("<I", len(text)) + text)
        else:
            _write_arrays(buf, payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    logger.debug(f"Wrote checkpoint {path} ({buf.tell()} bytes)")
    return path


def save_cell(params: CellParams, config: CellConfig, path: str | Path) -> Path:
    payload = {"kind": "cell", "config": config.model_dump(mode="json")}
    return _write(Path(path), config, payload, _cell_sections(params))


def save_model(model: Model, path: str | Path) -> Path:
    sections = _cell_sections(model.cell)
    sections.append((TAG_HEAD, {name: p.data for name, p in model.head.items()}))
    if model.vocab:
        sections.append((TAG_VOCAB, list(model.vocab)))
    payload = {"kind": model.kind, "config": model.config.model_dump(mode="json")}
    return _write(Path(path), model.config.cell, payload, sections)


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        values = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def arrays(self) -> dict[str, Array]:
        (count,) = self.take("<I")
        arrays = {}
        for _ in range(count):
            (name_len,) = self.take("<H")
            name = self.take_bytes(name_len).decode("utf-8")
            (ndim,) = self.take("<B")
            shape = self.take(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(self.take_bytes(8 * size), dtype="<f8")
            arrays[name] = data.reshape(shape).astype(np.float64)
        return arrays


def _decode_json(raw: bytes, path: Path, what: str) -> Any:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed {what}: {exc}") from exc


def _read(path: Path) -> tuple[dict, dict[int, Any]]:
    raw = path.read_bytes()
    reader = _Reader(raw, path)
    (magic, version, tag, m, d, n, dilation, s_i, s_f, eps, flags) = reader.take(_HEADER.format)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if tag >= len(CellVariant):
        raise CheckpointError(f"{path}: unknown variant tag {tag}")
    (blob_len,) = reader.take("<I")
    payload = _decode_json(reader.take_bytes(blob_len), path, "configuration")
    sections: dict[int, Any] = {}
    (count,) = reader.take("<I")
    for _ in range(count):
        (section,) = reader.take("<B")
        if section == TAG_VOCAB:
            (text_len,) = reader.take("<I")
            sections[section] = _decode_json(reader.take_bytes(text_len), path, "vocabulary")
        elif section in (TAG_CELL, TAG_WAVELET, TAG_HEAD):
            sections[section] = reader.arrays()
        else:
            raise CheckpointError(f"{path}: unknown section tag {section}")
    if reader.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - reader.pos} trailing bytes")

    header = (CellVariant.from_tag(tag).value, m, d, n, dilation, s_i, s_f, eps)
    try:
        cell_cfg = payload["config"]["cell"] if payload["kind"] != "cell" else payload["config"]
        declared = tuple(
            cell_cfg[k]
            for k in (
                "variant", "m", "d", "n", "dilation", "sigma_i_sq", "sigma_f_sq", "layer_norm_eps"
            )
        )
        stored_flags = _flags(CellConfig.model_validate(cell_cfg))
    except (KeyError, TypeError, ValidationError) as exc:
        raise CheckpointError(f"{path}: malformed configuration: {exc}") from exc
    if header != declared or flags != stored_flags:
        raise CheckpointError(f"{path}: header disagrees with the stored configuration")
    return payload, sections


def _restore(params: dict[str, Parameter], arrays: dict[str, Array], path: Path, what: str) -> None:
    missing = params.keys() - arrays.keys()
    extra = arrays.keys() - params.keys()
    if missing or extra:
        raise CheckpointError(
            f"{path}: {what} arrays do not match (missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for name, param in params.items():
        if arrays[name].shape != param.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, expected {param.data.shape}"
            )
        param.value.data[...] = arrays[name]


def _restore_cell(cell: CellParams, sections: dict[int, Any], path: Path) -> None:
    _restore(cell.params, sections.get(TAG_CELL, {}), path, "cell")
    if cell.wavelet is not None:
        arrays = dict(sections.get(TAG_WAVELET, {}))
        grid = arrays.pop("wavelet.grid", None)
        if grid is None:
            raise CheckpointError(f"{path}: wavelet section without a time grid")
        _restore({p.name: p for p in cell.wavelet.parameters()}, arrays, path, "wavelet")
        cell.wavelet.time_grid = grid


def load_cell(path: str | Path) -> tuple[CellParams, CellConfig]:
    path = Path(path)
    payload, sections = _read(path)
    if payload["kind"] != "cell":
        raise CheckpointError(f"{path}: holds a {payload['kind']} model, not a bare cell")
    config = CellConfig.model_validate(payload["config"])
    params = init_params(config)
    _restore_cell(params, sections, path)
    return params, config


def load_model(path: str | Path) -> Model:
    """Rebuild a classifier or language model; outputs match the saved model bit for bit."""
    path = Path(path)
    payload, sections = _read(path)
    kind = payload["kind"]
    vocab = sections.get(TAG_VOCAB)
    model: Model
    if kind == Classifier.kind:
        model = Classifier.create(ClassifierConfig.model_validate(payload["config"]), vocab)
    elif kind == LanguageModel.kind:
        model = LanguageModel.create(LMConfig.model_validate(payload["config"]), vocab)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    _restore_cell(model.cell, sections, path)
    _restore(model.head, sections.get(TAG_HEAD, {}), path, "head")
    logger.info(f"Loaded {kind} checkpoint {path} ({model.config.cell.variant.value})")
    return model
