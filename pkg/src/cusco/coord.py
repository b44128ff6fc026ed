"""Leader/follower coordination for multi-device recording rigs.

One statically configured leader schedules synchronized start / pause /
resume / stop across followers on the same LAN. Followers estimate
their clock offset against the leader with four-timestamp exchanges and
convert scheduled leader-clock instants into local instants.

Partition policy: a follower that loses the leader keeps recording and
logs the loss. No message in this protocol can delete or stop-and-
discard data; recordings only ever end through an explicit stop, and
divergent states after a partition heal are reported, never resolved by
dropping anything.

Wire format (big-endian): u32 frame length, then u8 type tag, u64
msg_seq, type-specific payload. TIME_REQ carries u64 t1; TIME_RESP
carries u64 t1_echo, u64 t2, u64 t3. HELLO starts with a u8 protocol
version. Timestamps on the wire are signed i64 nanoseconds. All other
payloads are UTF-8 JSON documents.
"""

from __future__ import annotations

import json
import socket
import struct
import threading
import uuid
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

from cusco.clock import Clock, SystemClock
from cusco.errors import ScheduleError, SyncError

PROTOCOL_VERSION = 1

MAX_FRAME_BYTES = 1 << 20
SYNC_MAX_AGE_S = 30.0


class MsgType(IntEnum):
    HELLO = 1
    TIME_REQ = 2
    TIME_RESP = 3
    SCHEDULE = 4
    ACK = 5
    HEARTBEAT = 6
    STATUS_REQ = 7
    STATUS_RESP = 8
    BYE = 9


@dataclass(frozen=True)
class Message:
    type: MsgType
    msg_seq: int
    payload: bytes = b""

    def json(self) -> dict:
        return json.loads(self.payload.decode()) if self.payload else {}


def json_message(type_: MsgType, msg_seq: int, doc: dict) -> Message:
    return Message(type_, msg_seq,
                   json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())


def encode_frame(msg: Message) -> bytes:
    body = struct.pack(">BQ", msg.type, msg.msg_seq) + msg.payload
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> Message:
    if len(body) < 9:
        raise SyncError("coordination frame too short")
    type_, msg_seq = struct.unpack_from(">BQ", body, 0)
    return Message(MsgType(type_), msg_seq, body[9:])


# --- four-timestamp clock offset ------------------------------------------------

@dataclass(frozen=True)
class ClockSync:
    """One completed exchange: request send/receive, response send/receive."""

    t1: int
    t2: int
    t3: int
    t4: int

    @property
    def offset_ns(self) -> int:
        # Estimates (remote clock - local clock); exact when the two
        # directions have equal latency.
        return ((self.t2 - self.t1) + (self.t3 - self.t4)) // 2

    @property
    def rtt_ns(self) -> int:
        return (self.t4 - self.t1) - (self.t3 - self.t2)

    @property
    def uncertainty_ns(self) -> int:
        return self.rtt_ns // 2


@dataclass
class SyncResult:
    offset_ns: int
    uncertainty_ns: int
    rtt_ns: int
    synced_at_ns: int
    rounds: int


def time_request(msg_seq: int, t1: int) -> Message:
    return Message(MsgType.TIME_REQ, msg_seq, struct.pack(">q", t1))


def time_response(msg_seq: int, t1: int, t2: int, t3: int) -> Message:
    return Message(MsgType.TIME_RESP, msg_seq, struct.pack(">qqq", t1, t2, t3))


def sync_clocks(
    exchange: Callable[[Message], Message],
    clock: Clock,
    rounds: int = 5,
) -> SyncResult:
    """Estimate the remote-minus-local clock offset.

    Runs `rounds` four-timestamp exchanges and keeps the round with the
    smallest round-trip time: queuing jitter only ever inflates RTT, so
    the fastest round carries the least asymmetry error.
    """
    if rounds < 1:
        raise SyncError("rounds must be >= 1")
    best: ClockSync | None = None
    for i in range(rounds):
        t1 = clock.now_ns()
        resp = exchange(time_request(i, t1))
        t4 = clock.now_ns()
        if resp is None or resp.type != MsgType.TIME_RESP:
            raise SyncError("no time response from peer")
        t1_echo, t2, t3 = struct.unpack(">qqq", resp.payload)
        if t1_echo != t1:
            raise SyncError("time response does not match request")
        sample = ClockSync(t1, t2, t3, t4)
        if sample.rtt_ns < 0:
            raise SyncError("negative round-trip time")
        if best is None or sample.rtt_ns < best.rtt_ns:
            best = sample
    return SyncResult(
        offset_ns=best.offset_ns,
        uncertainty_ns=best.uncertainty_ns,
        rtt_ns=best.rtt_ns,
        synced_at_ns=clock.now_ns(),
        rounds=rounds,
    )


def remote_to_local_ns(t_remote_ns: int, offset_ns: int) -> int:
    """Convert an instant on the remote clock into the local clock domain."""
    return t_remote_ns - offset_ns


# --- peers and scheduling ----------------------------------------------------------

@dataclass
class PeerInfo:
    peer_id: str
    role: str  # leader | follower
    address: str = ""
    last_heartbeat_at_ns: int | None = None
    clock_offset_ns: int | None = None
    offset_uncertainty_ns: int | None = None
    last_sync_at_ns: int | None = None
    state: str = "unknown"
    lost: bool = False

    def sync_age_s(self, now_ns: int) -> float | None:
        if self.last_sync_at_ns is None:
            return None
        return (now_ns - self.last_sync_at_ns) / 1e9

    def to_dict(self, now_ns: int) -> dict:
        return {
            "peer_id": self.peer_id,
            "role": self.role,
            "address": self.address,
            "clock_offset_ns": self.clock_offset_ns,
            "offset_uncertainty_ns": self.offset_uncertainty_ns,
            "sync_age_s": self.sync_age_s(now_ns),
            "state": self.state,
            "lost": self.lost,
        }


SCHEDULE_ACTIONS = ("start", "pause", "resume", "stop")


def make_schedule(msg_seq: int, action: str, execute_at_leader_ns: int,
                  session_id: str | None = None) -> Message:
    if action not in SCHEDULE_ACTIONS:
        raise ScheduleError(f"unknown scheduled action {action!r}")
    return json_message(MsgType.SCHEDULE, msg_seq, {
        "action": action,
        "execute_at_leader_ns": execute_at_leader_ns,
        "session_id": session_id,
        "schedule_id": str(uuid.uuid4()),
    })


def plan_schedule(
    peers: list[PeerInfo],
    clock: Clock,
    action: str,
    lead_time_ms: int,
    max_sync_age_s: float = SYNC_MAX_AGE_S,
) -> int:
    """Validate peers and return execute_at in the leader clock domain.

    Refuses when any follower's last sync is missing or older than
    max_sync_age_s, naming the stale peers.
    """
    if action not in SCHEDULE_ACTIONS:
        raise ScheduleError(f"unknown scheduled action {action!r}")
    now = clock.now_ns()
    stale = []
    for p in peers:
        age = p.sync_age_s(now)
        if age is None or age > max_sync_age_s:
            stale.append(f"{p.peer_id} (sync age "
                         f"{'never' if age is None else f'{age:.1f}s'})")
    if stale:
        raise ScheduleError("peers not freshly synced: " + ", ".join(stale))
    return now + lead_time_ms * 1_000_000


class ScheduleExecutor:
    """Follower-side dedupe: each (sender msg_seq / schedule_id) executes at
    most once no matter how the link duplicates or reorders frames."""

    def __init__(self):
        self._seen_seqs: set[int] = set()
        self._seen_ids: set[str] = set()
        self._lock = threading.Lock()

    def accept(self, msg: Message) -> dict | None:
        """Returns the schedule document when it should execute, else None."""
        if msg.type != MsgType.SCHEDULE:
            return None
        doc = msg.json()
        with self._lock:
            if msg.msg_seq in self._seen_seqs:
                return None
            sched_id = doc.get("schedule_id")
            if sched_id is not None and sched_id in self._seen_ids:
                return None
            self._seen_seqs.add(msg.msg_seq)
            if sched_id is not None:
                self._seen_ids.add(sched_id)
        return doc


class HeartbeatMonitor:
    """Marks peers lost after `loss_threshold` missed intervals; emits
    peer_lost / peer_recovered events through the callback."""

    def __init__(self, interval_ms: int, loss_threshold: int, clock: Clock,
                 on_event: Callable[[str, str], None]):
        if interval_ms < 100:
            raise ScheduleError("heartbeat interval must be >= 100 ms")
        if loss_threshold < 1:
            raise ScheduleError("loss threshold must be >= 1")
        self.interval_ms = interval_ms
        self.loss_threshold = loss_threshold
        self.clock = clock
        self.on_event = on_event
        self._peers: dict[str, PeerInfo] = {}
        self._lock = threading.Lock()

    def watch(self, peer: PeerInfo) -> None:
        with self._lock:
            self._peers[peer.peer_id] = peer

    def note_heartbeat(self, peer_id: str, state: str = "unknown") -> None:
        now = self.clock.now_ns()
        with self._lock:
            peer = self._peers.get(peer_id)
            if peer is None:
                return
            peer.last_heartbeat_at_ns = now
            peer.state = state
            was_lost = peer.lost
            peer.lost = False
        if was_lost:
            self.on_event("peer_recovered", peer_id)

    def tick(self) -> None:
        now = self.clock.now_ns()
        budget_ns = self.loss_threshold * self.interval_ms * 1_000_000
        newly_lost = []
        with self._lock:
            for peer in self._peers.values():
                if peer.lost:
                    continue
                last = peer.last_heartbeat_at_ns
                if last is not None and now - last >= budget_ns:
                    peer.lost = True
                    newly_lost.append(peer.peer_id)
        for peer_id in newly_lost:
            self.on_event("peer_lost", peer_id)

    def peers(self) -> list[PeerInfo]:
        with self._lock:
            return list(self._peers.values())


class _ProtocolMismatch(Exception):
    """Peer speaks a different protocol version; the connection is dropped."""


def divergence_report(states: dict[str, str]) -> dict | None:
    """After a partition heals: report (never resolve) differing states."""
    if len(set(states.values())) <= 1:
        return None
    return {"divergent": True, "states": dict(sorted(states.items()))}


# --- TCP transport -------------------------------------------------------------------

class MessageConnection:
    """Length-prefixed framed messages over a stream socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    def send(self, msg: Message) -> None:
        with self._send_lock:
            self._sock.sendall(encode_frame(msg))

    def recv(self, timeout_s: float | None = None) -> Message | None:
        with self._recv_lock:
            self._sock.settimeout(timeout_s)
            try:
                header = self._recv_exact(4)
                if header is None:
                    return None
                (length,) = struct.unpack(">I", header)
                if length == 0 or length > MAX_FRAME_BYTES:
                    raise SyncError(f"bad coordination frame length {length}")
                body = self._recv_exact(length)
                if body is None:
                    return None
                return decode_body(body)
            except socket.timeout:
                return None

    def _recv_exact(self, n: int) -> bytes | None:
        buf = b""
        while len(buf) < n:
            part = self._sock.recv(n - len(buf))
            if not part:
                return None
            buf += part
        return buf

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class LeaderEndpoint:
    """Leader side: accepts followers, answers time requests from its own
    clock, tracks heartbeats, and broadcasts schedules."""

    def __init__(self, listen_addr: tuple[str, int], device_id: str,
                 clock: Clock | None = None,
                 on_event: Callable[[str, str], None] | None = None,
                 heartbeat_interval_ms: int = 1000,
                 loss_threshold: int = 3):
        self.device_id = device_id
        self.clock = clock or SystemClock()
        self.on_event = on_event or (lambda kind, peer: None)
        self.monitor = HeartbeatMonitor(
            heartbeat_interval_ms, loss_threshold, self.clock, self.on_event
        )
        self._conns: dict[str, MessageConnection] = {}
        self._acks: dict[int, set[str]] = {}
        self._seq = 0
        self._lock = threading.Lock()
        self._server = socket.create_server(listen_addr)
        self.listen_port = self._server.getsockname()[1]
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="coord-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        self._server.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn = MessageConnection(sock)
            threading.Thread(
                target=self._serve_follower, args=(conn,),
                name="coord-peer", daemon=True
            ).start()

    def _serve_follower(self, conn: MessageConnection) -> None:
        peer_id = None
        while not self._stop.is_set():
            try:
                msg = conn.recv(timeout_s=0.2)
            except ValueError:
                continue  # unknown type tag: skip the frame, keep the link
            except (SyncError, OSError):
                return
            if msg is None:
                if self._stop.is_set():
                    return
                self.monitor.tick()
                continue
            try:
                self._handle_follower_msg(conn, msg, peer_id)
            except _ProtocolMismatch:
                conn.close()
                return
            except (KeyError, ValueError, IndexError, struct.error,
                    json.JSONDecodeError):
                continue  # malformed payloads never take the link down
            if msg.type == MsgType.HELLO:
                try:
                    peer_id = json.loads(msg.payload[1:].decode())["device_id"]
                except (KeyError, ValueError, IndexError):
                    pass
            elif msg.type == MsgType.BYE:
                return
            self.monitor.tick()

    def _handle_follower_msg(self, conn: MessageConnection, msg: Message,
                             peer_id: str | None) -> None:
        if msg.type == MsgType.HELLO:
            if msg.payload[0] != PROTOCOL_VERSION:
                raise _ProtocolMismatch(msg.payload[0])
            doc = json.loads(msg.payload[1:].decode())
            new_id = doc["device_id"]
            with self._lock:
                self._conns[new_id] = conn
            peer = PeerInfo(peer_id=new_id, role="follower")
            peer.last_heartbeat_at_ns = self.clock.now_ns()
            self.monitor.watch(peer)
        elif msg.type == MsgType.TIME_REQ:
            t2 = self.clock.now_ns()
            (t1,) = struct.unpack(">q", msg.payload)
            conn.send(time_response(msg.msg_seq, t1, t2, self.clock.now_ns()))
        elif msg.type == MsgType.HEARTBEAT and peer_id:
            doc = msg.json()
            self.monitor.note_heartbeat(peer_id, doc.get("state", "unknown"))
            peer = next((p for p in self.monitor.peers()
                         if p.peer_id == peer_id), None)
            if peer is not None and doc.get("offset_ns") is not None:
                peer.clock_offset_ns = doc["offset_ns"]
                peer.offset_uncertainty_ns = doc.get("uncertainty_ns")
                peer.last_sync_at_ns = self.clock.now_ns()
        elif msg.type == MsgType.ACK and peer_id:
            with self._lock:
                self._acks.setdefault(msg.json()["ack_seq"], set()).add(peer_id)

    def schedule(self, action: str, lead_time_ms: int,
                 session_id: str | None = None) -> dict:
        """Broadcast a schedule; returns {execute_at_leader_ns, peers}."""
        peers = self.monitor.peers()
        execute_at = plan_schedule(peers, self.clock, action, lead_time_ms)
        with self._lock:
            self._seq += 1
            seq = self._seq
            msg = make_schedule(seq, action, execute_at, session_id)
            conns = dict(self._conns)
        for conn in conns.values():
            conn.send(msg)
        return {
            "action": action,
            "execute_at_leader_ns": execute_at,
            "msg_seq": seq,
            "peers": [p.peer_id for p in peers],
        }

    def acks_for(self, msg_seq: int) -> set[str]:
        with self._lock:
            return set(self._acks.get(msg_seq, set()))

    def peer_table(self) -> list[dict]:
        now = self.clock.now_ns()
        return [p.to_dict(now) for p in self.monitor.peers()]

    def close(self) -> None:
        self._stop.set()
        with self._lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for conn in conns:
            conn.close()
        self._server.close()


class FollowerEndpoint:
    """Follower side: connects to the leader, keeps the clock offset fresh,
    heartbeats its state, and executes deduplicated schedules at converted
    local instants."""

    def __init__(self, leader_addr: tuple[str, int], device_id: str,
                 execute: Callable[[str, int], None],
                 state_fn: Callable[[], str],
                 clock: Clock | None = None,
                 heartbeat_interval_ms: int = 1000,
                 sync_interval_s: float = 10.0,
                 on_leader_lost: Callable[[], None] | None = None):
        self.device_id = device_id
        self.clock = clock or SystemClock()
        self.execute = execute
        self.state_fn = state_fn
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.sync_interval_s = sync_interval_s
        self.on_leader_lost = on_leader_lost or (lambda: None)
        self.executor = ScheduleExecutor()
        self.sync: SyncResult | None = None
        self._pending_time: dict[int, threading.Event] = {}
        self._time_responses: dict[int, Message] = {}
        self._seq = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.leader_lost = False

        sock = socket.create_connection(leader_addr, timeout=5.0)
        self._conn = MessageConnection(sock)
        hello = json.dumps({"device_id": device_id, "role": "follower"}).encode()
        self._conn.send(Message(MsgType.HELLO, self._next_seq(),
                                bytes([PROTOCOL_VERSION]) + hello))
        self._recv_thread = threading.Thread(
            target=self._recv_loop, name="coord-recv", daemon=True
        )
        self._recv_thread.start()
        self._beat_thread = threading.Thread(
            target=self._beat_loop, name="coord-beat", daemon=True
        )
        self._beat_thread.start()

    def _next_seq(self) -> int:
        with self._lock:
            self._seq += 1
            return self._seq

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                msg = self._conn.recv(timeout_s=0.2)
            except ValueError:
                continue  # unknown type tag: skip the frame, keep the link
            except (SyncError, OSError):
                break
            if msg is None:
                continue
            if msg.type == MsgType.TIME_RESP:
                with self._lock:
                    ev = self._pending_time.get(msg.msg_seq)
                    if ev is not None:
                        self._time_responses[msg.msg_seq] = msg
                        ev.set()
            elif msg.type == MsgType.STATUS_REQ:
                try:
                    self._conn.send(json_message(
                        MsgType.STATUS_RESP, self._next_seq(),
                        {"device_id": self.device_id, "state": self.state_fn()},
                    ))
                except OSError:
                    break
            elif msg.type == MsgType.SCHEDULE:
                try:
                    doc = self.executor.accept(msg)
                    if doc is None:
                        continue
                    action = doc["action"]
                    execute_at = int(doc["execute_at_leader_ns"])
                except (KeyError, ValueError, TypeError):
                    continue  # malformed schedules are ignored, never fatal
                self._conn.send(json_message(
                    MsgType.ACK, self._next_seq(), {"ack_seq": msg.msg_seq}
                ))
                offset = self.sync.offset_ns if self.sync else 0
                local_at = remote_to_local_ns(execute_at, offset)
                threading.Thread(
                    target=self._execute_at,
                    args=(action, local_at),
                    daemon=True,
                ).start()
        if not self._stop.is_set():
            self.leader_lost = True
            self.on_leader_lost()

    def _execute_at(self, action: str, local_at_ns: int) -> None:
        self.clock.sleep_until(local_at_ns)
        self.execute(action, local_at_ns)

    def _exchange_time(self, msg: Message) -> Message:
        ev = threading.Event()
        with self._lock:
            self._pending_time[msg.msg_seq] = ev
        self._conn.send(msg)
        if not ev.wait(timeout=5.0):
            raise SyncError("time request timed out")
        with self._lock:
            resp = self._time_responses.pop(msg.msg_seq)
            del self._pending_time[msg.msg_seq]
        return resp

    def sync_now(self, rounds: int = 5) -> SyncResult:
        seq_base = self._next_seq() * 1000

        def exchange(msg: Message) -> Message:
            return self._exchange_time(
                Message(msg.type, seq_base + msg.msg_seq, msg.payload)
            )

        self.sync = sync_clocks(exchange, self.clock, rounds)
        return self.sync

    def _beat_loop(self) -> None:
        last_sync = 0.0
        while not self._stop.is_set():
            now_s = self.clock.now_ns() / 1e9
            if self.sync is None or now_s - last_sync >= self.sync_interval_s:
                try:
                    self.sync_now()
                    last_sync = now_s
                except (SyncError, OSError):
                    pass
            doc = {"state": self.state_fn()}
            if self.sync is not None:
                doc["offset_ns"] = self.sync.offset_ns
                doc["uncertainty_ns"] = self.sync.uncertainty_ns
            try:
                self._conn.send(json_message(MsgType.HEARTBEAT,
                                             self._next_seq(), doc))
            except OSError:
                break
            if self._stop.wait(self.heartbeat_interval_ms / 1000.0):
                break

    def close(self) -> None:
        self._stop.set()
        try:
            self._conn.send(Message(MsgType.BYE, self._next_seq()))
        except OSError:
            pass
        self._conn.close()
