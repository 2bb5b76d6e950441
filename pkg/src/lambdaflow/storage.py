"""Binary dataset / checkpoint formats and the INI-style run configuration."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simworld import ACTION_DIM, OBS_DIM, RATE_HZ, STATE_DIM, Dataset, Episode

DATASET_MAGIC = b"XRDS"
CHECKPOINT_MAGIC = b"XRZ0"
FORMAT_VERSION = 1

_DS_HEADER = struct.Struct("<4sHHHHHI")
_EP_HEADER = struct.Struct("<IH")
_CK_HEADER = struct.Struct("<4sHI")


class StorageError(OSError):
    pass


class FormatError(StorageError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownKeyError(ConfigParseError):
    def __init__(self, key: str, line: int):
        super().__init__(f"unknown key {key!r}", line)
        self.key = key


def _f32le(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def encode_dataset(ds: Dataset) -> bytes:
    parts = [_DS_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, ds.obs_dim, ds.state_dim, ds.action_dim,
                             ds.rate_hz, len(ds.episodes))]
    for ep in ds.episodes:
        n = len(ep.actions)
        if ep.observations.shape != (n, ds.obs_dim) or ep.states.shape != (n, ds.state_dim) \
                or ep.actions.shape != (n, ds.action_dim):
            raise StorageError("episode arrays disagree with the dataset dimensions")
        parts.append(_EP_HEADER.pack(n, ep.instruction_id))
        parts += [_f32le(ep.observations), _f32le(ep.states), _f32le(ep.actions)]
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < _DS_HEADER.size:
        raise FormatError("truncated dataset header", len(buf))
    magic, version, od, sd, ad, rate, count = _DS_HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    off = _DS_HEADER.size
    eps = []
    for _ in range(count):
        if off + _EP_HEADER.size > len(buf):
            raise FormatError("truncated episode header", off)
        n, instr = _EP_HEADER.unpack_from(buf, off)
        off += _EP_HEADER.size
        arrays = []
        for width in (od, sd, ad):
            nbytes = 4 * n * width
            if off + nbytes > len(buf):
                raise FormatError("truncated episode payload", off)
            arrays.append(np.frombuffer(buf, "<f4", n * width, off).reshape(n, width).astype(np.float64))
            off += nbytes
        eps.append(Episode(arrays[0], arrays[1], arrays[2], int(instr)))
    if off != len(buf):
        raise FormatError("trailing bytes after last episode", off)
    return Dataset(eps, od, sd, ad, rate)


def write_dataset(path, ds: Dataset) -> None:
    try:
        Path(path).write_bytes(encode_dataset(ds))
    except OSError as exc:
        if isinstance(exc, StorageError):
            raise
        raise StorageError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    return decode_dataset(buf)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(tensors: dict) -> bytes:
    """Serialise named arrays.  Values are narrowed to float32."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise StorageError("duplicate tensor names")
    arrays = [np.asarray(tensors[k]) for k in names]
    encoded = [k.encode("utf-8") for k in names]
    index_size = sum(2 + len(e) + 1 + 4 * a.ndim + 8 for e, a in zip(encoded, arrays))
    offset = _CK_HEADER.size + index_size
    index, payload = [], []
    for e, a in zip(encoded, arrays):
        if len(e) > 0xFFFF or a.ndim > 0xFF:
            raise StorageError("tensor name or rank too large")
        index.append(struct.pack(f"<H{len(e)}sB{a.ndim}IQ", len(e), e, a.ndim, *a.shape, offset))
        blob = _f32le(a)
        payload.append(blob)
        offset += len(blob)
    return b"".join([_CK_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(names))] + index + payload)


def decode_checkpoint(buf: bytes) -> dict:
    if len(buf) < _CK_HEADER.size:
        raise FormatError("truncated checkpoint header", len(buf))
    magic, version, count = _CK_HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = _CK_HEADER.size
    entries = []
    for _ in range(count):
        start = off
        if off + 2 > len(buf):
            raise FormatError("truncated entry", off)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + nlen + 1 > len(buf):
            raise FormatError("truncated entry name", off)
        try:
            name = buf[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", off) from None
        off += nlen
        rank = buf[off]
        off += 1
        if off + 4 * rank + 8 > len(buf):
            raise FormatError("truncated entry dims", off)
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        (data_off,) = struct.unpack_from("<Q", buf, off)
        off += 8
        entries.append((start, name, dims, data_off))
    names = [e[1] for e in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names", _CK_HEADER.size)
    out, spans = {}, []
    for start, name, dims, data_off in entries:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if data_off < off or data_off + nbytes > len(buf):
            raise FormatError(f"payload of {name!r} out of bounds", start)
        spans.append((data_off, data_off + nbytes, start))
        out[name] = np.frombuffer(buf, "<f4", nbytes // 4, data_off).reshape(dims).copy()
    spans.sort()
    for (a0, a1, _), (b0, _, s) in zip(spans, spans[1:]):
        if b0 < a1:
            raise FormatError("overlapping payloads", s)
    return out


def save_checkpoint(path, tensors: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)


def bundle(**modules) -> dict:
    """Flatten several modules' state dicts into one ``prefix.name`` namespace."""
    out = {}
    for prefix, mod in modules.items():
        if mod is None:
            continue
        for k, v in mod.state_dict().items():
            out[f"{prefix}.{k}"] = v
    return out


def unbundle(tensors: dict, prefix: str) -> dict:
    head = prefix + "."
    return {k[len(head):]: np.asarray(v, dtype=np.float64) for k, v in tensors.items() if k.startswith(head)}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelSection:
    model_dim: int = 64
    heads: int = 4
    layers: int = 4
    mlp_ratio: int = 2
    horizon: int = 30
    n_candidates: int = 4
    relative_features: bool = True


@dataclass
class ChoiceSection:
    score_weight: float = 0.1
    steps: int = 2000
    lr: float = 3e-4


@dataclass
class FlowSection:
    window: int = 6
    rope_offset: int = 10
    tau_max: float = 0.999
    tau_alpha: float = 1.5
    tau_beta: float = 1.0
    sample_steps: int = 5
    reweight_lambda: float = 1.0
    reweight_max: float = 5.0
    steps: int = 2000
    lr: float = 3e-4


@dataclass
class TrainSection:
    batch_size: int = 64
    weight_decay: float = 1e-4
    warmup: int = 100
    grad_clip: float = 1.0
    lr_schedule: str = "cosine"
    seed: int = 0
    post_steps: int = 1000
    post_lr: float = 1e-4
    prefix_max: int = 6
    prefix_source: str = "online"
    post_mask: str = "lambda"
    unfreeze_conditioner: bool = True
    log_every: int = 10


@dataclass
class RuntimeSection:
    exec_steps: int = 10
    prefix_len: int = 5
    latency_ticks: int = 3
    control_rate_hz: int = 30
    jitter: bool = False
    episode_ticks: int = 300


@dataclass
class SimSection:
    task: str = "fork_reach"
    episodes: int = 2000
    seed: int = 0
    demo_noise: float = 0.1


SECTIONS = {"model": ModelSection, "choice": ChoiceSection, "flow": FlowSection, "train": TrainSection,
            "runtime": RuntimeSection, "sim": SimSection}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    choice: ChoiceSection = field(default_factory=ChoiceSection)
    flow: FlowSection = field(default_factory=FlowSection)
    train: TrainSection = field(default_factory=TrainSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)
    sim: SimSection = field(default_factory=SimSection)

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return getattr(getattr(self, section), key)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: str, kind, key: str, line: int):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigParseError(f"bad value {raw!r} for {key}", line) from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigParseError(f"malformed section header {s!r}", no)
            name = s[1:-1].strip()
            if name not in SECTIONS:
                raise UnknownKeyError(name, no)
            section = getattr(cfg, name)
            continue
        if "=" not in s:
            raise ConfigParseError(f"expected 'key = value', got {s!r}", no)
        key, _, value = s.partition("=")
        key, value = key.strip(), value.split("#", 1)[0].strip()
        if section is None:
            raise ConfigParseError(f"key {key!r} outside any section", no)
        types = {f.name: f.type for f in dataclasses.fields(section)}
        if key not in types:
            raise UnknownKeyError(f"{type(section).__name__[:-7].lower()}.{key}", no)
        setattr(section, key, _coerce(value, types[key], key, no))
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
