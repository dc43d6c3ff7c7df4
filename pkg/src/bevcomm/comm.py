"""Binary token messages, byte budget accounting, and the link channel model.

Wire layout (all little-endian). Every message starts with a 19-byte header:
magic ``GCP1`` (4), sender u32, receiver u32, level u8, token count K u32,
channel count C u16, followed immediately by a signed 64-bit frame timestamp
in milliseconds. A token message (C >= 1) continues with K token records of
(row u16, col u16, C float32), one agent token of C float32, then the
confidence map and the consensus map, each H*W float32 in row-major order.
A request message is marked by C == 0 and carries K records of
(row u16, col u16) and nothing else.

Byte-budget units are expressed against a fixed base unit of
64 * 64 * 256 * 4 bytes; storage stays in integer bytes and any rounding
happens only at display time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .geometry import Pose2

MAGIC = b"GCP1"
HEADER_BYTES = 19           # magic + ids + level + count + channels
TIMESTAMP_BYTES = 8
BASE_UNIT_BYTES = 64 * 64 * 256 * 4  # 4,194,304

_HEADER_FMT = "<4sIIBIH"
_TS_FMT = "<q"
_TAG_CHANNEL = 0x434E


class WireError(ValueError):
    """Base class for malformed buffers."""


class BadMagicError(WireError):
    """Buffer does not start with the expected magic."""


class TruncatedBufferError(WireError):
    """Buffer ends before the declared payload."""


class CountMismatchError(WireError):
    """Declared counts disagree with the payload size or grid shape."""


def message_length(k: int, channels: int, height: int, width: int) -> int:
    """Exact serialized size of a token message in bytes."""
    return (HEADER_BYTES + TIMESTAMP_BYTES + k * (4 + 4 * channels)
            + 4 * channels + 8 * height * width)


def request_length(k: int) -> int:
    """Exact serialized size of an index-request message in bytes."""
    return HEADER_BYTES + TIMESTAMP_BYTES + 4 * k


@dataclass(frozen=True, eq=False)
class TokenMessage:
    """One level of one link's token traffic."""

    sender: int
    receiver: int
    level: int
    timestamp_ms: int
    rows: np.ndarray        # (K,) uint16
    cols: np.ndarray        # (K,) uint16
    features: np.ndarray    # (K, C) float32
    agent_token: np.ndarray  # (C,) float32
    confidence: np.ndarray  # (H, W) float32
    consensus: np.ndarray   # (H, W) float32

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.uint16, copy=True).reshape(-1)
        cols = np.array(self.cols, dtype=np.uint16, copy=True).reshape(-1)
        feats = np.array(self.features, dtype=np.float32, copy=True)
        feats = feats.reshape(len(rows), -1) if feats.size else feats.reshape(len(rows), 0)
        tok = np.array(self.agent_token, dtype=np.float32, copy=True).reshape(-1)
        conf = np.array(self.confidence, dtype=np.float32, copy=True)
        cons = np.array(self.consensus, dtype=np.float32, copy=True)
        if len(cols) != len(rows):
            raise WireError("rows and cols must align")
        if feats.shape[1] != len(tok):
            raise WireError("token features and agent token disagree on channels")
        if len(tok) < 1:
            raise WireError("token messages need at least one channel")
        if len(tok) > 0xFFFF or len(rows) > 0xFFFFFFFF:
            raise WireError("field value exceeds wire width")
        if conf.ndim != 2 or cons.shape != conf.shape:
            raise WireError("confidence and consensus maps must share (H, W)")
        for arr in (rows, cols, feats, tok, conf, cons):
            arr.flags.writeable = False
        for name, arr in (("rows", rows), ("cols", cols), ("features", feats),
                          ("agent_token", tok), ("confidence", conf),
                          ("consensus", cons)):
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def channels(self) -> int:
        return len(self.agent_token)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.confidence.shape

    def nbytes(self) -> int:
        h, w = self.grid_shape
        return message_length(self.count, self.channels, h, w)


@dataclass(frozen=True, eq=False)
class RequestMessage:
    """Ego-to-neighbor list of requested cell indices for one level."""

    sender: int
    receiver: int
    level: int
    timestamp_ms: int
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.uint16, copy=True).reshape(-1)
        cols = np.array(self.cols, dtype=np.uint16, copy=True).reshape(-1)
        if len(rows) != len(cols):
            raise WireError("rows and cols must align")
        rows.flags.writeable = False
        cols.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def count(self) -> int:
        return len(self.rows)

    def nbytes(self) -> int:
        return request_length(self.count)


def _token_dtype(channels: int) -> np.dtype:
    return np.dtype([("row", "<u2"), ("col", "<u2"), ("feat", "<f4", (channels,))])


def serialize(msg: TokenMessage | RequestMessage) -> bytes:
    """Encode a message; the result length matches the analytic formulas."""
    if isinstance(msg, RequestMessage):
        head = struct.pack(_HEADER_FMT, MAGIC, msg.sender, msg.receiver,
                           msg.level, msg.count, 0)
        idx = np.empty(msg.count, dtype=np.dtype([("row", "<u2"), ("col", "<u2")]))
        idx["row"], idx["col"] = msg.rows, msg.cols
        return head + struct.pack(_TS_FMT, msg.timestamp_ms) + idx.tobytes()

    head = struct.pack(_HEADER_FMT, MAGIC, msg.sender, msg.receiver,
                       msg.level, msg.count, msg.channels)
    recs = np.empty(msg.count, dtype=_token_dtype(msg.channels))
    recs["row"], recs["col"] = msg.rows, msg.cols
    recs["feat"] = msg.features
    return (head + struct.pack(_TS_FMT, msg.timestamp_ms) + recs.tobytes()
            + msg.agent_token.astype("<f4").tobytes()
            + msg.confidence.astype("<f4").tobytes()
            + msg.consensus.astype("<f4").tobytes())


def deserialize(buf: bytes, grid_shape: tuple[int, int]
                ) -> TokenMessage | RequestMessage:
    """Decode a buffer produced by :func:`serialize`.

    ``grid_shape`` supplies the level's (H, W), which the wire layout does
    not carry. Raises BadMagicError, TruncatedBufferError, or
    CountMismatchError on malformed input.
    """
    if len(buf) < HEADER_BYTES + TIMESTAMP_BYTES:
        raise TruncatedBufferError(
            f"buffer of {len(buf)} bytes is shorter than any message")
    magic, sender, receiver, level, count, channels = struct.unpack_from(_HEADER_FMT, buf)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    (timestamp,) = struct.unpack_from(_TS_FMT, buf, HEADER_BYTES)
    body = buf[HEADER_BYTES + TIMESTAMP_BYTES:]

    if channels == 0:
        expect = 4 * count
        if len(body) < expect:
            raise TruncatedBufferError(
                f"request payload has {len(body)} bytes, needs {expect}")
        if len(body) != expect:
            raise CountMismatchError(
                f"request payload of {len(body)} bytes does not match K={count}")
        idx = np.frombuffer(body, dtype=np.dtype([("row", "<u2"), ("col", "<u2")]))
        return RequestMessage(sender, receiver, level, timestamp,
                              idx["row"].copy(), idx["col"].copy())

    h, w = grid_shape
    expect = message_length(count, channels, h, w) - HEADER_BYTES - TIMESTAMP_BYTES
    if len(body) < expect:
        raise TruncatedBufferError(
            f"token payload has {len(body)} bytes, needs {expect}")
    if len(body) != expect:
        raise CountMismatchError(
            f"token payload of {len(body)} bytes does not match "
            f"K={count}, C={channels}, grid {h}x{w}")
    rec_bytes = count * (4 + 4 * channels)
    recs = np.frombuffer(buf, dtype=_token_dtype(channels),
                         count=count, offset=HEADER_BYTES + TIMESTAMP_BYTES)
    off = HEADER_BYTES + TIMESTAMP_BYTES + rec_bytes
    tok = np.frombuffer(buf, dtype="<f4", count=channels, offset=off)
    off += 4 * channels
    conf = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).reshape(h, w)
    off += 4 * h * w
    cons = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).reshape(h, w)
    if (recs["row"] >= h).any() or (recs["col"] >= w).any():
        raise CountMismatchError("token indices fall outside the grid")
    return TokenMessage(sender, receiver, level, timestamp,
                        recs["row"].copy(), recs["col"].copy(),
                        recs["feat"].copy(), tok.copy(), conf.copy(), cons.copy())


@dataclass
class BudgetLedger:
    """Integer byte counts per (frame, sender, receiver)."""

    entries: dict = field(default_factory=dict)

    def account(self, frame: int, sender: int, receiver: int, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("cannot account negative bytes")
        key = (frame, sender, receiver)
        self.entries[key] = self.entries.get(key, 0) + int(nbytes)

    @property
    def total_bytes(self) -> int:
        return sum(self.entries.values())

    def link_bytes(self) -> dict[tuple[int, int], int]:
        """Bytes per directed (sender, receiver) link, summed over frames."""
        out: dict[tuple[int, int], int] = {}
        for (_frame, s, r), n in self.entries.items():
            out[(s, r)] = out.get((s, r), 0) + n
        return out

    @property
    def units(self) -> float:
        """Total traffic in base units; exact because the base is a power of two."""
        return self.total_bytes / BASE_UNIT_BYTES

    def link_units(self) -> dict[tuple[int, int], float]:
        return {k: v / BASE_UNIT_BYTES for k, v in self.link_bytes().items()}


def display_units(units: float) -> str:
    """Two-decimal rendering used in reports; storage stays exact."""
    return f"{units:.2f}"


@dataclass(frozen=True)
class Delivery:
    """Outcome of a successful transmission."""

    payload: object
    sender_pose: Pose2
    arrival_time_ms: int


@dataclass(frozen=True)
class ChannelModel:
    """Deterministic lossy link: fixed latency, seeded drops and pose noise.

    Draws are keyed by (seed, sender, receiver, send time), so outcomes do
    not depend on transmission order or thread count. All messages of one
    link and frame share one fate and one pose perturbation.
    """

    latency_ms: int = 0
    drop_prob: float = 0.0
    sigma_xy_m: float = 0.0
    sigma_yaw_rad: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if self.sigma_xy_m < 0 or self.sigma_yaw_rad < 0:
            raise ValueError("pose noise sigmas must be non-negative")

    def link_draws(self, sender: int, receiver: int, send_time_ms: int
                   ) -> tuple[bool, float, float, float]:
        """(dropped, dx, dy, dyaw) for one link-frame."""
        rng = ops.stream(self.seed, _TAG_CHANNEL, sender, receiver,
                         ops.time_key(send_time_ms))
        dropped = bool(rng.uniform() < self.drop_prob)
        dx, dy = rng.normal(0.0, 1.0, 2) * self.sigma_xy_m
        dyaw = float(rng.normal(0.0, 1.0) * self.sigma_yaw_rad)
        return dropped, float(dx), float(dy), dyaw

    def transmit(self, message, sender_pose: Pose2,
                 send_time_ms: int) -> Delivery | None:
        """Deliver a message with perturbed pose metadata, or drop it.

        The payload itself is never modified; pose noise corrupts only the
        metadata a receiver would use for alignment.
        """
        sender = getattr(message, "sender")
        receiver = getattr(message, "receiver")
        dropped, dx, dy, dyaw = self.link_draws(sender, receiver, send_time_ms)
        if dropped:
            return None
        noisy = Pose2(sender_pose.x + dx, sender_pose.y + dy,
                      sender_pose.yaw + dyaw)
        return Delivery(message, noisy, int(send_time_ms) + self.latency_ms)
