"""Deterministic discrete-event simulated platform.

Hosts carry services, processes and opaque files; comms channels connect
hosts. Both the adversary and the defending agent act on this state
exclusively through effect descriptors, so every mutation is recorded and
replayable. Time is an integer tick counter; all randomness comes from the
seeded stream owned by the episode loop and is consumed in event order.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from enum import Enum
from random import Random
from typing import Any, Callable, Optional

from .errors import (
    NoRequiredServices,
    StaleToken,
    UnknownChannel,
    UnknownEntity,
    UnknownHost,
)


def clamp01(x: float) -> float:
    return max(0.0, min(1.0, x))


class ServiceState(str, Enum):
    UP = "up"
    DEGRADED = "degraded"
    DOWN = "down"


class ChannelState(str, Enum):
    HEALTHY = "healthy"
    DEGRADED = "degraded"
    SPOOFED = "spoofed"
    DISABLED = "disabled"


class Owner(str, Enum):
    SYSTEM = "system"
    MALWARE = "malware"
    AGENT = "agent"


@dataclass
class Service:
    service_id: str
    required: bool
    weight: float
    health: float
    state: ServiceState = ServiceState.UP

    def refresh_state(self, up_threshold: float, down_threshold: float) -> None:
        if self.health >= up_threshold:
            self.state = ServiceState.UP
        elif self.health <= down_threshold:
            self.state = ServiceState.DOWN
        else:
            self.state = ServiceState.DEGRADED


@dataclass
class Process:
    process_id: str
    image_hash: str
    known_good: bool
    owner: Owner = Owner.SYSTEM


@dataclass
class FileEntry:
    file_id: str
    owner: Owner = Owner.SYSTEM
    token: str = ""


@dataclass
class Host:
    host_id: str
    friendly: bool = True
    integrity: float = 1.0
    services: dict[str, Service] = field(default_factory=dict)
    processes: dict[str, Process] = field(default_factory=dict)
    files: dict[str, FileEntry] = field(default_factory=dict)
    resident_agent: Optional[str] = None


@dataclass
class CommsChannel:
    channel_id: str
    endpoints: tuple[str, str]
    state: ChannelState = ChannelState.HEALTHY
    drop_probability: float = 0.0
    delay_ticks: int = 0
    observed_by_malware: bool = False

    def enforce_invariants(self) -> None:
        # healthy channels are clean by definition
        if self.state is ChannelState.HEALTHY:
            self.drop_probability = 0.0
            self.delay_ticks = 0


@dataclass
class EnvEvent:
    tick: int
    seq: int
    kind: str
    payload: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"tick": self.tick, "seq": self.seq, "kind": self.kind, **self.payload}


@dataclass(frozen=True)
class EffectDescriptor:
    """One mutation of the environment.

    target is a reference string:
      host:<hid> | service:<hid>:<sid> | process:<hid>:<pid> |
      file:<hid>:<fid> | channel:<cid> | agent:<aid>
    Process/file positions accept the selectors @unknown (known_good=False
    processes) and @foreign (malware-owned files).
    """

    target: str
    attribute: str
    operation: str  # set | add | remove | spawn | kill | clamp
    value: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "attribute": self.attribute,
            "operation": self.operation,
            "value": self.value,
        }


@dataclass
class SnapshotToken:
    token_id: int
    host_id: str
    services: dict[str, Service]
    processes: dict[str, Process]
    files: dict[str, FileEntry]


class DeliveryStatus(str, Enum):
    DELIVERED = "delivered"
    DROPPED = "dropped"
    OBSERVED_AND_DELIVERED = "observed_and_delivered"


@dataclass
class DeliveryOutcome:
    status: DeliveryStatus
    delay: int = 0
    message: Optional[dict[str, Any]] = None


# numeric attribute domains; fractions clamp to [0,1], counters floor at 0
_FRACTION_ATTRS = {"integrity", "health", "drop_probability", "detectability"}
_COUNTER_ATTRS = {"delay_ticks"}


class Environment:
    """Topology plus the event schedule for one episode.

    Owned by a single episode loop; never shared mid-episode. The (tick, seq)
    pair totally orders every event; seq counters are handed out by this
    object so agent-level events merge into the same order.
    """

    def __init__(
        self,
        hosts: dict[str, Host],
        channels: dict[str, CommsChannel],
        up_threshold: float = 0.8,
        down_threshold: float = 0.3,
        roster_token: str = "",
    ):
        self.hosts = hosts
        self.channels = channels
        self.up_threshold = up_threshold
        self.down_threshold = down_threshold
        self.roster_token = roster_token
        self.tick = -1
        self._seq: dict[int, itertools.count] = {}
        self._scheduled: dict[int, list[EnvEvent]] = {}
        self.inboxes: dict[str, list[dict[str, Any]]] = {}
        self._snapshots: dict[int, SnapshotToken] = {}
        self._token_counter = itertools.count(1)
        for host in self.hosts.values():
            for svc in host.services.values():
                svc.refresh_state(up_threshold, down_threshold)
        for ch in self.channels.values():
            ch.enforce_invariants()

    # -- ordering ------------------------------------------------------------

    def next_seq(self, tick: int) -> int:
        if tick not in self._seq:
            self._seq[tick] = itertools.count(0)
        return next(self._seq[tick])

    # -- stepping ------------------------------------------------------------

    def step(self, tick: int) -> list[EnvEvent]:
        """Apply everything scheduled for tick, in (tick, seq) order."""
        self.tick = tick
        due = sorted(self._scheduled.pop(tick, []), key=lambda e: e.seq)
        for event in due:
            if event.kind == "message_delivered":
                msg = event.payload["message"]
                self.inboxes.setdefault(msg["recipient"], []).append(msg)
        return due

    # -- effects -------------------------------------------------------------

    def apply_effect(self, effect: EffectDescriptor, cause: str = "") -> dict[str, Any]:
        """Mutate the target per the effect, clamping numeric results.

        Returns an outcome record with one change entry per affected entity
        (selectors may touch several); each change carries old and new values
        and, for services, the old and new derived state.
        """
        changes = [self._apply_one(ref, effect) for ref in self._resolve(effect)]
        return {
            "cause": cause,
            "target": effect.target,
            "attribute": effect.attribute,
            "operation": effect.operation,
            "changes": changes,
        }

    def _resolve(self, effect: EffectDescriptor) -> list[tuple[str, ...]]:
        parts = effect.target.split(":")
        kind = parts[0]
        if kind in ("host", "channel", "agent"):
            if len(parts) != 2:
                raise UnknownEntity(f"malformed target {effect.target!r}")
            return [tuple(parts)]
        if kind in ("service", "process", "file"):
            if len(parts) != 3:
                raise UnknownEntity(f"malformed target {effect.target!r}")
            host = self.hosts.get(parts[1])
            if host is None:
                raise UnknownEntity(f"no host {parts[1]!r}")
            if parts[2] == "@unknown" and kind == "process":
                pids = sorted(p.process_id for p in host.processes.values() if not p.known_good)
                return [("process", parts[1], pid) for pid in pids]
            if parts[2] == "@foreign" and kind == "file":
                fids = sorted(f.file_id for f in host.files.values() if f.owner is Owner.MALWARE)
                return [("file", parts[1], fid) for fid in fids]
            return [tuple(parts)]
        raise UnknownEntity(f"unknown target kind {kind!r}")

    def _apply_one(self, ref: tuple[str, ...], effect: EffectDescriptor) -> dict[str, Any]:
        kind = ref[0]
        op = effect.operation
        if kind == "host":
            host = self.hosts.get(ref[1])
            if host is None:
                raise UnknownEntity(f"no host {ref[1]!r}")
            return self._mutate_numeric(host, effect, entity=f"host:{ref[1]}")
        if kind == "channel":
            return self._apply_channel(ref[1], effect)
        if kind == "agent":
            return self._apply_agent(ref[1], op)
        if kind == "service":
            return self._apply_service(ref[1], ref[2], effect)
        if kind == "process":
            return self._apply_process(ref[1], ref[2], effect)
        if kind == "file":
            return self._apply_file(ref[1], ref[2], effect)
        raise UnknownEntity(f"unknown target kind {kind!r}")

    def _mutate_numeric(self, obj: Any, effect: EffectDescriptor, entity: str) -> dict[str, Any]:
        attr = effect.attribute
        if not hasattr(obj, attr):
            raise UnknownEntity(f"{entity} has no attribute {attr!r}")
        old = getattr(obj, attr)
        if effect.operation == "set":
            new = effect.value
        elif effect.operation == "add":
            new = old + effect.value
        elif effect.operation == "clamp":
            lo, hi = effect.value
            new = max(lo, min(hi, old))
        else:
            raise UnknownEntity(f"operation {effect.operation!r} not valid for {entity}")
        if attr in _FRACTION_ATTRS:
            new = clamp01(float(new))
        elif attr in _COUNTER_ATTRS:
            new = max(0, int(new))
        setattr(obj, attr, new)
        return {"entity": entity, "attribute": attr, "old": old, "new": new}

    def _apply_channel(self, cid: str, effect: EffectDescriptor) -> dict[str, Any]:
        ch = self.channels.get(cid)
        if ch is None:
            raise UnknownEntity(f"no channel {cid!r}")
        if effect.attribute == "state":
            old = ch.state.value
            ch.state = ChannelState(effect.value)
            ch.enforce_invariants()
            return {"entity": f"channel:{cid}", "attribute": "state", "old": old, "new": ch.state.value}
        change = self._mutate_numeric(ch, effect, entity=f"channel:{cid}")
        ch.enforce_invariants()
        change["new"] = getattr(ch, effect.attribute)
        return change

    def _apply_agent(self, agent_id: str, op: str) -> dict[str, Any]:
        if op != "kill":
            raise UnknownEntity(f"operation {op!r} not valid for agent targets")
        for host in sorted(self.hosts.values(), key=lambda h: h.host_id):
            if host.resident_agent == agent_id:
                host.resident_agent = None
                return {"entity": f"agent:{agent_id}", "attribute": "resident", "old": host.host_id, "new": None}
        raise UnknownEntity(f"agent {agent_id!r} not resident anywhere")

    def _apply_service(self, hid: str, sid: str, effect: EffectDescriptor) -> dict[str, Any]:
        host = self.hosts.get(hid)
        if host is None:
            raise UnknownEntity(f"no host {hid!r}")
        svc = host.services.get(sid)
        if svc is None:
            raise UnknownEntity(f"no service {sid!r} on host {hid!r}")
        if effect.operation == "remove":
            del host.services[sid]
            return {"entity": f"service:{hid}:{sid}", "attribute": "", "old": "present", "new": "removed"}
        old_state = svc.state.value
        change = self._mutate_numeric(svc, effect, entity=f"service:{hid}:{sid}")
        svc.refresh_state(self.up_threshold, self.down_threshold)
        change["old_state"] = old_state
        change["new_state"] = svc.state.value
        change["required"] = svc.required
        return change

    def _apply_process(self, hid: str, pid: str, effect: EffectDescriptor) -> dict[str, Any]:
        host = self.hosts.get(hid)
        if host is None:
            raise UnknownEntity(f"no host {hid!r}")
        if effect.operation == "spawn":
            spec = effect.value or {}
            host.processes[pid] = Process(
                process_id=pid,
                image_hash=spec.get("image_hash", "unknown"),
                known_good=bool(spec.get("known_good", False)),
                owner=Owner(spec.get("owner", "malware")),
            )
            return {"entity": f"process:{hid}:{pid}", "attribute": "", "old": None, "new": "spawned"}
        if effect.operation in ("kill", "remove"):
            if pid not in host.processes:
                raise UnknownEntity(f"no process {pid!r} on host {hid!r}")
            del host.processes[pid]
            return {"entity": f"process:{hid}:{pid}", "attribute": "", "old": "present", "new": "killed"}
        raise UnknownEntity(f"operation {effect.operation!r} not valid for processes")

    def _apply_file(self, hid: str, fid: str, effect: EffectDescriptor) -> dict[str, Any]:
        host = self.hosts.get(hid)
        if host is None:
            raise UnknownEntity(f"no host {hid!r}")
        if effect.operation == "spawn":
            spec = effect.value or {}
            host.files[fid] = FileEntry(
                file_id=fid,
                owner=Owner(spec.get("owner", "malware")),
                token=spec.get("token", ""),
            )
            return {"entity": f"file:{hid}:{fid}", "attribute": "", "old": None, "new": "created"}
        if effect.operation == "remove":
            if fid not in host.files:
                raise UnknownEntity(f"no file {fid!r} on host {hid!r}")
            del host.files[fid]
            return {"entity": f"file:{hid}:{fid}", "attribute": "", "old": "present", "new": "removed"}
        raise UnknownEntity(f"operation {effect.operation!r} not valid for files")

    # -- aggregate measures ----------------------------------------------------

    def functionality(self) -> float:
        """Weighted fraction of required services currently up, in [0, 1]."""
        total = 0.0
        up = 0.0
        for host in self.hosts.values():
            for svc in host.services.values():
                if not svc.required:
                    continue
                total += svc.weight
                if svc.state is ServiceState.UP:
                    up += svc.weight
        if total == 0.0:
            raise NoRequiredServices("scenario defines no required services")
        return up / total

    # -- messaging ---------------------------------------------------------------

    def channels_adjacent(self, host_id: str) -> list[CommsChannel]:
        return sorted(
            (c for c in self.channels.values() if host_id in c.endpoints),
            key=lambda c: c.channel_id,
        )

    def route(self, from_host: str, to_host: str) -> Optional[str]:
        """Direct, non-disabled channel between the hosts, or None."""
        for ch in self.channels_adjacent(from_host):
            if to_host in ch.endpoints and ch.state is not ChannelState.DISABLED:
                return ch.channel_id
        return None

    def deliver(
        self,
        channel_id: str,
        message: dict[str, Any],
        rng: Random,
        spoofer: Optional[Callable[[dict[str, Any]], dict[str, Any]]] = None,
    ) -> DeliveryOutcome:
        """Push one message through a channel.

        Disabled drops always; degraded drops with drop_probability, else
        arrives after delay_ticks; spoofed delivers but is observed by the
        adversary (spoofer hook may substitute the payload); healthy delivers
        immediately. Draws come from the caller's seeded stream.
        """
        ch = self.channels.get(channel_id)
        if ch is None:
            raise UnknownChannel(f"no channel {channel_id!r}")
        if ch.state is ChannelState.DISABLED:
            return DeliveryOutcome(DeliveryStatus.DROPPED)
        if ch.state is ChannelState.DEGRADED:
            if rng.random() < ch.drop_probability:
                return DeliveryOutcome(DeliveryStatus.DROPPED)
            delay = ch.delay_ticks
            if delay > 0:
                arrival = self.tick + delay
                event = EnvEvent(
                    tick=arrival,
                    seq=self.next_seq(arrival),
                    kind="message_delivered",
                    payload={"channel": channel_id, "message": message},
                )
                self._scheduled.setdefault(arrival, []).append(event)
                return DeliveryOutcome(DeliveryStatus.DELIVERED, delay=delay, message=message)
            self.inboxes.setdefault(message["recipient"], []).append(message)
            return DeliveryOutcome(DeliveryStatus.DELIVERED, message=message)
        if ch.state is ChannelState.SPOOFED:
            ch.observed_by_malware = True
            out = spoofer(message) if spoofer is not None else dict(message, observed=True)
            self.inboxes.setdefault(out["recipient"], []).append(out)
            return DeliveryOutcome(DeliveryStatus.OBSERVED_AND_DELIVERED, message=out)
        self.inboxes.setdefault(message["recipient"], []).append(message)
        return DeliveryOutcome(DeliveryStatus.DELIVERED, message=message)

    def drain_inbox(self, recipient: str) -> list[dict[str, Any]]:
        return self.inboxes.pop(recipient, [])

    # -- snapshot / restore ---------------------------------------------------

    def snapshot(self, host_id: str) -> SnapshotToken:
        host = self.hosts.get(host_id)
        if host is None:
            raise UnknownHost(f"no host {host_id!r}")
        token = SnapshotToken(
            token_id=next(self._token_counter),
            host_id=host_id,
            services=copy.deepcopy(host.services),
            processes=copy.deepcopy(host.processes),
            files=copy.deepcopy(host.files),
        )
        self._snapshots[token.token_id] = token
        return token

    def restore(self, token: SnapshotToken) -> dict[str, Any]:
        """Return services, files and system processes to snapshot values.

        Malware- and agent-owned processes present now are preserved, and
        resident_agent is untouched: recovering data does not evict anyone.
        """
        host = self.hosts.get(token.host_id)
        if host is None:
            raise StaleToken(f"host {token.host_id!r} no longer exists")
        host.services = copy.deepcopy(token.services)
        host.files = copy.deepcopy(token.files)
        kept = {
            pid: proc
            for pid, proc in host.processes.items()
            if proc.owner in (Owner.MALWARE, Owner.AGENT)
        }
        restored = {
            pid: copy.deepcopy(proc)
            for pid, proc in token.processes.items()
            if proc.owner is Owner.SYSTEM
        }
        host.processes = {**restored, **kept}
        for svc in host.services.values():
            svc.refresh_state(self.up_threshold, self.down_threshold)
        return {"host": token.host_id, "token": token.token_id, "restored": True}

    # -- agent footprint helpers ------------------------------------------------

    def install_agent(self, agent_id: str, host_id: str) -> None:
        host = self.hosts.get(host_id)
        if host is None:
            raise UnknownHost(f"no host {host_id!r}")
        host.resident_agent = agent_id
        pid = f"agent_proc_{agent_id}"
        host.processes[pid] = Process(pid, image_hash=f"agent-{agent_id}", known_good=True, owner=Owner.AGENT)

    def remove_agent(self, agent_id: str) -> None:
        for host in self.hosts.values():
            if host.resident_agent == agent_id:
                host.resident_agent = None
            host.processes = {
                pid: p
                for pid, p in host.processes.items()
                if not (p.owner is Owner.AGENT and pid == f"agent_proc_{agent_id}")
            }
