"""Binary wire format: frames, tensor payloads, weight blobs.

Header layout (17 bytes, little-endian): magic ``FSTA``, version u8,
msg_type u8, round u32, client_id u16, task_id u8, payload_len u32.
Tensor payloads are ndim u8, each dim u32, then raw little-endian f32 data;
weight blobs are count u32 then (name_len u16, utf-8 name, tensor payload)
per entry, in ParamSet iteration order. Round 0 marks administrative
traffic (initial weight distribution, post-run collection).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

MAGIC = b"FSTA"
VERSION = 1
_HEADER = struct.Struct("<4sBBIHBI")
HEADER_LEN = _HEADER.size  # 17


class MsgType(IntEnum):
    FEAT = 1
    FEAT_GRAD = 2
    BODY_OUT = 3
    BODY_OUT_GRAD = 4
    WEIGHTS = 5
    CONTROL = 6


class MalformedFrame(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    round: int
    client_id: int
    task_id: int
    payload: bytes = b""


def encode_frame(f: Frame) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, int(f.msg_type), f.round,
                          f.client_id, f.task_id, len(f.payload))
    return header + f.payload


def decode_header(header: bytes) -> tuple[MsgType, int, int, int, int]:
    if len(header) != HEADER_LEN:
        raise MalformedFrame(f"header must be {HEADER_LEN} bytes, got {len(header)}")
    magic, version, msg_type, round_, client_id, task_id, payload_len = \
        _HEADER.unpack(header)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedFrame(f"unsupported version {version}")
    try:
        mt = MsgType(msg_type)
    except ValueError:
        raise MalformedFrame(f"unknown message type {msg_type}") from None
    return mt, round_, client_id, task_id, payload_len


def decode_frame(data: bytes) -> Frame:
    mt, round_, client_id, task_id, payload_len = decode_header(data[:HEADER_LEN]) \
        if len(data) >= HEADER_LEN else decode_header(data)
    if len(data) != HEADER_LEN + payload_len:
        raise MalformedFrame(
            f"length mismatch: header says {payload_len} payload bytes, "
            f"got {len(data) - HEADER_LEN}")
    return Frame(mt, round_, client_id, task_id, data[HEADER_LEN:])


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise MalformedFrame("too many dimensions")
    head = struct.pack("<B", arr.ndim) + b"".join(
        struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes()


def decode_tensor_at(data: bytes, offset: int) -> tuple[np.ndarray, int]:
    if offset >= len(data):
        raise MalformedFrame("truncated tensor payload")
    ndim = data[offset]
    offset += 1
    if offset + 4 * ndim > len(data):
        raise MalformedFrame("truncated tensor dims")
    shape = struct.unpack_from(f"<{ndim}I", data, offset) if ndim else ()
    offset += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = 4 * count
    if offset + nbytes > len(data):
        raise MalformedFrame("truncated tensor data")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    offset += nbytes
    return np.ascontiguousarray(arr.reshape(shape)), offset


def decode_tensor(data: bytes) -> np.ndarray:
    arr, off = decode_tensor_at(data, 0)
    if off != len(data):
        raise MalformedFrame("trailing bytes after tensor payload")
    return arr


def encode_blob(entries) -> bytes:
    """entries: iterable of (name, array) in a stable order."""
    parts = []
    n = 0
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + encode_tensor(arr))
        n += 1
    return struct.pack("<I", n) + b"".join(parts)


def decode_blob(data: bytes) -> list[tuple[str, np.ndarray]]:
    if len(data) < 4:
        raise MalformedFrame("truncated weight blob")
    (count,) = struct.unpack_from("<I", data, 0)
    offset = 4
    out = []
    for _ in range(count):
        if offset + 2 > len(data):
            raise MalformedFrame("truncated blob entry header")
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        arr, offset = decode_tensor_at(data, offset)
        out.append((name, arr))
    if offset != len(data):
        raise MalformedFrame("trailing bytes after final blob entry")
    return out


def payload_elements(msg_type: MsgType, payload: bytes) -> int:
    """Count f32 data elements in a payload (0 for CONTROL frames)."""
    if msg_type == MsgType.CONTROL:
        return 0
    if msg_type == MsgType.WEIGHTS:
        return sum(arr.size for _name, arr in decode_blob(payload))
    return decode_tensor(payload).size


def tensor_frame(msg_type: MsgType, round_: int, client_id: int, task_id: int,
                 arr: np.ndarray) -> Frame:
    return Frame(msg_type, round_, client_id, task_id, encode_tensor(arr))


def weights_frame(round_: int, client_id: int, task_id: int, parts) -> Frame:
    """parts: dict role -> ParamSet; entry names get a role prefix."""
    entries = []
    for role, ps in parts.items():
        for name, arr in ps.items():
            entries.append((f"{role}.{name}", arr))
    return Frame(MsgType.WEIGHTS, round_, client_id, task_id, encode_blob(entries))


def split_weight_blob(payload: bytes) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in decode_blob(payload):
        role, _, rest = name.partition(".")
        out.setdefault(role, {})[rest] = arr
    return out


def control_frame(kind: str, round_: int = 0, client_id: int = 0, task_id: int = 0,
                  **fields) -> Frame:
    payload = json.dumps({"k": kind, **fields}, sort_keys=True).encode("utf-8")
    return Frame(MsgType.CONTROL, round_, client_id, task_id, payload)


def parse_control(frame: Frame) -> dict:
    if frame.msg_type != MsgType.CONTROL:
        raise MalformedFrame(f"expected CONTROL, got {frame.msg_type.name}")
    try:
        obj = json.loads(frame.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedFrame(f"bad control payload: {e}") from None
    if not isinstance(obj, dict) or "k" not in obj:
        raise MalformedFrame("control payload missing kind")
    return obj
