"""Cyclic-schedule partition engine.

One tick is one host CPU cycle.  Each core repeats its windows every major
frame; a partition executes only inside its own windows, after the
context-switch charge at the start of each window.  Partition programs are
lists of :class:`Step` (or generator factories yielding engine commands);
the single GPU advances on the global clock whether or not its user is
scheduled.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

from . import gpu_manager as gm

WORKLOAD, GPU_MANAGER = "workload", "gpu_manager"
MANAGER_PORT = "gpu_manager.requests"
TRACE_KINDS = ("window_start", "window_end", "step_exec", "msg_send", "msg_recv",
               "gpu_busy", "grant", "release", "block")


class SimulationError(RuntimeError):
    pass


class PortError(SimulationError):
    pass


def grant_port(pid: str) -> str:
    return f"grant.{pid}"


# -- scenario model ---------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    core: int
    start: int
    duration: int
    partition: str

    @property
    def end(self) -> int:
        return self.start + self.duration


@dataclass(frozen=True)
class Schedule:
    major_frame: int
    windows: tuple = ()
    context_switch_cycles: int = 50

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))

    def windows_of(self, pid: str) -> list:
        return [w for w in self.windows if w.partition == pid]


@dataclass(frozen=True)
class Step:
    """One program step.

    ``cycles`` are host cycles consumed in the partition's windows; a GPU
    layer additionally occupies the device for ``device_cycles`` and then
    spends ``post_cycles`` on the host.  ``action`` runs when the step
    completes and receives the partition's private state dict.
    """

    kind: str
    cycles: int = 0
    device_cycles: int = 0
    post_cycles: int = 0
    label: str = ""
    port: Optional[str] = None
    payload: bytes = b""
    action: Optional[Callable[[dict], None]] = field(default=None, compare=False)

    @property
    def cost(self) -> int:
        return self.cycles + self.device_cycles + self.post_cycles

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass(frozen=True)
class PartitionDesc:
    id: str
    program: object = ()
    kind: str = WORKLOAD

    def steps(self) -> list:
        prog = self.program
        return list(prog.steps) if hasattr(prog, "steps") else list(prog or ())

    @property
    def uses_gpu(self) -> bool:
        return self.kind == WORKLOAD and any(s.kind == "acquire_gpu" for s in self.steps())


@dataclass
class Scenario:
    schedule: Schedule
    partitions: list
    ports: dict = field(default_factory=dict)
    name: str = ""

    def partition(self, pid: str) -> PartitionDesc:
        for p in self.partitions:
            if p.id == pid:
                return p
        raise KeyError(pid)

    @property
    def manager(self) -> Optional[PartitionDesc]:
        return next((p for p in self.partitions if p.kind == GPU_MANAGER), None)

    def all_ports(self) -> dict:
        ports = dict(self.ports)
        if self.manager is not None:
            ports.setdefault(MANAGER_PORT, 2 * len(self.partitions))
            for p in self.partitions:
                if p.kind == WORKLOAD:
                    ports.setdefault(grant_port(p.id), 1)
        return ports


def validate_schedule(s: Schedule, partitions: Sequence[PartitionDesc]) -> list:
    """Every problem with ``s``; empty means valid."""
    problems = []
    ids = [p.id for p in partitions]
    for dup in sorted({i for i in ids if ids.count(i) > 1}):
        problems.append(f"duplicate partition id {dup!r}")
    if s.major_frame < 1:
        problems.append(f"major_frame must be >= 1, got {s.major_frame}")
    if s.context_switch_cycles < 0:
        problems.append("context_switch_cycles must be non-negative")
    known = set(ids)
    for w in s.windows:
        tag = f"window core={w.core} [{w.start},{w.end}) partition={w.partition}"
        if w.core < 0:
            problems.append(f"{tag}: negative core")
        if w.start < 0:
            problems.append(f"{tag}: negative start")
        if w.duration < 1:
            problems.append(f"{tag}: duration must be >= 1")
        if w.end > s.major_frame:
            problems.append(f"{tag}: out of frame (major_frame={s.major_frame})")
        if w.partition not in known:
            problems.append(f"{tag}: unknown partition {w.partition!r}")
    ws = list(s.windows)
    for i, a in enumerate(ws):
        for b in ws[i + 1:]:
            if a.start < b.end and b.start < a.end:
                if a.core == b.core:
                    problems.append(
                        f"overlap on core {a.core}: {a.partition} [{a.start},{a.end}) "
                        f"and {b.partition} [{b.start},{b.end})"
                    )
                elif a.partition == b.partition:
                    problems.append(
                        f"partition {a.partition} scheduled on cores {a.core} and {b.core} "
                        f"at once: [{a.start},{a.end}) and [{b.start},{b.end})"
                    )
    managers = [p.id for p in partitions if p.kind == GPU_MANAGER]
    gpu_users = [p.id for p in partitions if p.uses_gpu]
    if len(managers) > 1:
        problems.append(f"more than one gpu_manager partition: {', '.join(managers)}")
    if gpu_users and not managers:
        problems.append(f"gpu partitions {', '.join(gpu_users)} need a gpu_manager partition")
    return problems


# -- ports ------------------------------------------------------------------------

@dataclass
class Port:
    name: str
    capacity: int = 1
    fifo: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("port capacity must be >= 1")

    def send(self, payload: bytes, sender: str, visible_at: int = 0) -> bool:
        if len(self.fifo) >= self.capacity:
            return False
        self.fifo.append((visible_at, bytes(payload), sender))
        return True

    def receive(self, now: Optional[int] = None):
        """Head message as ``(payload, sender)``, or None when nothing is visible."""
        if not self.fifo or (now is not None and self.fifo[0][0] > now):
            return None
        _, payload, sender = self.fifo.popleft()
        return payload, sender

    def __len__(self):
        return len(self.fifo)


def port_send(ports: dict, name: str, payload: bytes, sender: str, visible_at: int = 0) -> bool:
    if name not in ports:
        raise PortError(f"unknown port {name!r}")
    return ports[name].send(payload, sender, visible_at)


def port_receive(ports: dict, name: str, now: Optional[int] = None):
    if name not in ports:
        raise PortError(f"unknown port {name!r}")
    return ports[name].receive(now)


# -- window arithmetic ------------------------------------------------------------

class Timeline:
    """Executable ticks of one partition: its windows minus context-switch time."""

    def __init__(self, schedule: Schedule, pid: str):
        self.frame = schedule.major_frame
        cs = schedule.context_switch_cycles
        spans = []
        for w in sorted(schedule.windows_of(pid), key=lambda w: w.start):
            a = w.start + cs
            if a < w.end:
                spans.append((a, w.end, w.core))
        self.spans = spans
        self.per_frame = sum(b - a for a, b, _ in spans)

    def next_exec(self, t: int) -> Optional[int]:
        if not self.spans:
            return None
        k, off = divmod(t, self.frame)
        for a, b, _ in self.spans:
            if off < b:
                return k * self.frame + max(a, off)
        return (k + 1) * self.frame + self.spans[0][0]

    def slices(self, t: int) -> Iterator[tuple]:
        """Executable runs ``(core, start, end)`` from ``t`` onwards."""
        if not self.spans:
            return
        k, off = divmod(t, self.frame)
        while True:
            base = k * self.frame
            for a, b, core in self.spans:
                if off < b:
                    yield core, base + max(a, off), base + b
            k, off = k + 1, 0

    def advance(self, t: int, cycles: int) -> Optional[int]:
        """Tick just after ``cycles`` executable ticks starting at ``t``."""
        if cycles <= 0:
            return t
        if not self.per_frame:
            return None
        k, off = divmod(t, self.frame)
        for a, b, _ in self.spans:
            if off < b:
                s = max(a, off)
                if cycles <= b - s:
                    return k * self.frame + s + cycles
                cycles -= b - s
        full, rest = divmod(cycles, self.per_frame)
        if rest == 0:
            full, rest = full - 1, self.per_frame
        base = (k + 1 + full) * self.frame
        for a, b, _ in self.spans:
            if rest <= b - a:
                return base + a + rest
            rest -= b - a
        raise AssertionError("unreachable")


# -- engine commands yielded by partition processes -----------------------------------

@dataclass(frozen=True)
class Compute:
    cycles: int
    label: str = ""


@dataclass(frozen=True)
class Device:
    cycles: int
    label: str = ""


@dataclass(frozen=True)
class Send:
    port: str
    payload: bytes


@dataclass(frozen=True)
class Recv:
    port: str


@dataclass(frozen=True)
class Note:
    kind: str
    detail: str = ""


@dataclass(frozen=True, order=True)
class TraceEvent:
    tick: int
    seq: int = field(compare=True)
    core: int = field(compare=False, default=-1)
    kind: str = field(compare=False, default="")
    partition: str = field(compare=False, default="")
    detail: str = field(compare=False, default="")

    def line(self) -> str:
        return f"tick={self.tick} core={self.core} part={self.partition} kind={self.kind} detail={self.detail}"


def format_trace(events) -> str:
    return "".join(e.line() + "\n" for e in events)


def parse_trace_line(line: str) -> dict:
    head, _, detail = line.rstrip("\n").partition(" detail=")
    out = dict(tok.split("=", 1) for tok in head.split())
    out["detail"] = detail
    out["tick"], out["core"] = int(out["tick"]), int(out["core"])
    return out


@dataclass
class RunResult:
    trace: list
    finish: dict
    state: dict
    outputs: dict
    executed: dict
    device_cycles: dict
    manager_state: gm.ManagerState
    manager_log: list
    client_phases: dict
    end_tick: int

    def trace_text(self) -> str:
        return format_trace(self.trace)

    @property
    def completed(self) -> bool:
        return all(t is not None for t in self.finish.values())


# -- partition processes ------------------------------------------------------------

def workload_process(pid: str, steps: Sequence[Step], index_of: dict, id_of: dict, state: dict, log: dict):
    """Interpret a step list, speaking the GPU protocol for acquire/release."""
    phase = gm.IDLE
    log["phase"] = phase
    for step in steps:
        if step.kind == "acquire_gpu":
            phase, out = gm.client_step(phase, gm.WANT_GPU, pid)
            log["phase"] = phase
            for m in out:
                if not (yield Send(MANAGER_PORT, gm.encode(m, index_of))):
                    raise SimulationError(f"{pid}: manager request port full")
            while True:
                payload, _ = yield Recv(grant_port(pid))
                if gm.decode(payload, id_of).kind == gm.GRANT:
                    break
            phase, _ = gm.client_step(phase, gm.GRANT_RECEIVED, pid)
            log["phase"] = phase
        elif step.kind == "release_gpu":
            phase, out = gm.client_step(phase, gm.DONE, pid)
            log["phase"] = phase
            yield Note("release", "gpu")
            for m in out:
                if not (yield Send(MANAGER_PORT, gm.encode(m, index_of))):
                    raise SimulationError(f"{pid}: manager request port full")
        elif step.kind == "send":
            if not (yield Send(step.port, step.payload)):
                yield Note("block", f"port={step.port} full")
        elif step.kind == "recv":
            payload, sender = yield Recv(step.port)
            state.setdefault("received", []).append((payload, sender))
        else:
            if step.cycles:
                yield Compute(step.cycles, step.name)
            if step.device_cycles:
                yield Device(step.device_cycles, step.name)
            if step.post_cycles:
                yield Compute(step.post_cycles, step.name)
        if step.action is not None:
            step.action(state)


def manager_process(pid: str, index_of: dict, id_of: dict, holder: dict):
    state = gm.ManagerState()
    holder["state"] = state
    while True:
        payload, sender = yield Recv(MANAGER_PORT)
        msg = gm.decode(payload, id_of)
        state, out = gm.manager_handle(state, msg)
        holder["state"] = state
        holder["log"].append(msg)
        for m in out:
            holder["log"].append(m)
            yield Note("grant", f"to={m.partition}")
            yield Send(grant_port(m.partition), gm.encode(m, index_of))


# -- engine ---------------------------------------------------------------------------

class Engine:
    def __init__(self, scenario: Scenario, until: Optional[int] = None, trace: bool = True):
        problems = validate_schedule(scenario.schedule, scenario.partitions)
        if problems:
            raise SimulationError("invalid schedule: " + "; ".join(problems))
        self.sc = scenario
        self.until = until
        self.tracing = trace
        self.ports = {n: Port(n, c) for n, c in scenario.all_ports().items()}
        self.index_of = {p.id: i for i, p in enumerate(scenario.partitions)}
        self.id_of = {i: p.id for i, p in enumerate(scenario.partitions)}
        self.timelines = {p.id: Timeline(scenario.schedule, p.id) for p in scenario.partitions}
        self.events: list = []
        self.seq = 0
        self.heap: list = []
        self.procs = {}
        self.waiting = {}
        self.blocked = {}
        self.after_compute = {}
        self.last = {}
        self.scheduled = {}
        self.finish = {}
        self.states = {}
        self.logs = {}
        self.executed = {p.id: 0 for p in scenario.partitions}
        self.device_used = {p.id: 0 for p in scenario.partitions}
        self.device_free = 0
        self.mgr = {"state": gm.ManagerState(), "log": []}
        for p in scenario.partitions:
            if p.kind == GPU_MANAGER:
                self.procs[p.id] = manager_process(p.id, self.index_of, self.id_of, self.mgr)
            else:
                steps = p.steps()
                for s in steps:
                    if s.kind in ("send", "recv") and s.port not in self.ports:
                        raise PortError(f"partition {p.id}: step references missing port {s.port!r}")
                self.states[p.id] = {}
                self.logs[p.id] = {"phase": gm.IDLE}
                self.procs[p.id] = workload_process(
                    p.id, steps, self.index_of, self.id_of, self.states[p.id], self.logs[p.id]
                )
                self.finish[p.id] = None

    def emit(self, tick, core, kind, pid, detail=""):
        if self.tracing and (self.until is None or tick < self.until):
            self.events.append(TraceEvent(tick, self.seq, core, kind, pid, detail))
            self.seq += 1

    def core_at(self, pid: str, t: int) -> int:
        for core, s, e in self.timelines[pid].slices(t):
            return core
        return -1

    def wake(self, pid: str, t: Optional[int]):
        if t is None:
            return
        t = self.timelines[pid].next_exec(t)
        if t is None:
            return
        prev = self.scheduled.get(pid)
        if prev is not None and prev <= t:
            return
        self.scheduled[pid] = t
        heapq.heappush(self.heap, (t, self.index_of[pid], self.seq, pid))
        self.seq += 1

    def run(self) -> RunResult:
        for p in self.sc.partitions:
            self.wake(p.id, 0)
        now = 0
        while self.heap:
            t, _, _, pid = heapq.heappop(self.heap)
            if self.scheduled.get(pid) != t:
                continue
            if self.until is not None and t >= self.until:
                break
            del self.scheduled[pid]
            now = t
            self.resume(pid, t)
            # keep going until the manager has drained the last release
            if all(v is not None for v in self.finish.values()) and not any(self.ports.values()):
                break
        if self.until is not None:
            end = self.until
        else:
            end = max([now] + [v for v in self.finish.values() if v is not None])
        self.window_events(end)
        self.events.sort()
        return RunResult(
            trace=self.events,
            finish=dict(self.finish),
            state={name: len(port) for name, port in self.ports.items()},
            outputs={pid: st.get("output") for pid, st in self.states.items()},
            executed=dict(self.executed),
            device_cycles=dict(self.device_used),
            manager_state=self.mgr["state"],
            manager_log=list(self.mgr["log"]),
            client_phases={pid: lg["phase"] for pid, lg in self.logs.items()},
            end_tick=end,
        )

    def resume(self, pid: str, t: int):
        """Drive ``pid`` from tick ``t`` until it must wait."""
        proc = self.procs[pid]
        cmd = self.blocked.pop(pid, None)
        if not self.after_compute.pop(pid, False):
            self.last[pid] = t
        value = None
        while True:
            if cmd is None:
                try:
                    cmd = proc.send(value)
                except StopIteration:
                    if pid in self.finish:
                        self.finish[pid] = self.last[pid]
                    return
            value = None
            if isinstance(cmd, Compute):
                done = self.compute(pid, t, cmd)
                if done is not None:
                    self.last[pid] = done
                    self.after_compute[pid] = True
                    self.wake(pid, done)
                return
            if isinstance(cmd, Device):
                start = max(t, self.device_free)
                self.device_free = start + cmd.cycles
                self.device_used[pid] += cmd.cycles
                self.emit(start, self.core_at(pid, t), "gpu_busy", pid, f"step={cmd.label} cycles={cmd.cycles}")
                self.wake(pid, start + cmd.cycles)
                return
            self.last[pid] = t
            if isinstance(cmd, Send):
                if cmd.port not in self.ports:
                    raise PortError(f"partition {pid}: unknown port {cmd.port!r}")
                ok = self.ports[cmd.port].send(cmd.payload, pid, t + 1)
                self.emit(t, self.core_at(pid, t), "msg_send", pid,
                          f"port={cmd.port} bytes={cmd.payload.hex()}" + ("" if ok else " full"))
                if ok:
                    rcv = self.waiting.pop(cmd.port, None)
                    if rcv is not None:
                        self.wake(rcv, t + 1)
                value = ok
            elif isinstance(cmd, Recv):
                if cmd.port not in self.ports:
                    raise PortError(f"partition {pid}: unknown port {cmd.port!r}")
                got = self.ports[cmd.port].receive(t)
                if got is None:
                    self.emit(t, self.core_at(pid, t), "block", pid, f"port={cmd.port}")
                    self.waiting[cmd.port] = pid
                    self.blocked[pid] = cmd
                    fifo = self.ports[cmd.port].fifo
                    if fifo:
                        self.wake(pid, fifo[0][0])
                    return
                payload, sender = got
                self.emit(t, self.core_at(pid, t), "msg_recv", pid,
                          f"port={cmd.port} from={sender} bytes={payload.hex()}")
                value = got
            elif isinstance(cmd, Note):
                self.emit(t, self.core_at(pid, t), cmd.kind, pid, cmd.detail)
            else:
                raise SimulationError(f"unknown command {cmd!r}")
            cmd = None

    def compute(self, pid: str, t: int, cmd: Compute) -> Optional[int]:
        tl = self.timelines[pid]
        left = cmd.cycles
        for core, s, e in tl.slices(t):
            if self.until is not None and s >= self.until:
                break
            n = min(left, e - s)
            self.emit(s, core, "step_exec", pid, f"step={cmd.label} cycles={n}")
            self.executed[pid] += n
            left -= n
            if left == 0:
                return s + n
        return None

    def window_events(self, end: int):
        if not self.tracing:
            return
        s = self.sc.schedule
        for k in range(0, end // s.major_frame + 1):
            base = k * s.major_frame
            for w in s.windows:
                if base + w.start < end:
                    self.emit(base + w.start, w.core, "window_start", w.partition)
                if base + w.end <= end:
                    self.emit(base + w.end, w.core, "window_end", w.partition)


def run(scenario: Scenario, until: Optional[int] = None, trace: bool = True) -> RunResult:
    return Engine(scenario, until, trace).run()


# -- analytic (fast) evaluation --------------------------------------------------------

def run_fast(scenario: Scenario) -> dict:
    """Completion tick of each workload partition, evaluated alone.

    Window arithmetic is closed-form; the GPU is assumed free whenever the
    manager grants, so contention between partitions is not modelled.
    """
    problems = validate_schedule(scenario.schedule, scenario.partitions)
    if problems:
        raise SimulationError("invalid schedule: " + "; ".join(problems))
    mgr = scenario.manager
    mgr_tl = Timeline(scenario.schedule, mgr.id) if mgr else None
    out = {}
    for p in scenario.partitions:
        if p.kind == WORKLOAD:
            out[p.id] = _fast_timeline(Timeline(scenario.schedule, p.id), p.steps(), mgr_tl)
    return out


def _fast_timeline(tl: Timeline, steps, mgr_tl: Optional[Timeline]) -> Optional[int]:
    last = tl.next_exec(0)
    for step in steps:
        if last is None:
            return None
        if step.kind in ("send", "recv"):
            raise SimulationError("fast mode does not model generic port traffic")
        if step.kind == "acquire_gpu":
            sent = tl.next_exec(last)
            granted = mgr_tl.next_exec(sent + 1) if mgr_tl else None
            last = None if granted is None else tl.next_exec(granted + 1)
        elif step.kind == "release_gpu":
            last = tl.next_exec(last)
        else:
            if step.cycles:
                last = tl.advance(tl.next_exec(last), step.cycles)
            if step.device_cycles and last is not None:
                last = tl.next_exec(tl.next_exec(last) + step.device_cycles)
            if step.post_cycles and last is not None:
                last = tl.advance(tl.next_exec(last), step.post_cycles)
    return last
