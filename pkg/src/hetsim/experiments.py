"""Scenario files, isolation/concurrent runners, twin comparison and reports."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

from . import backends as B
from . import hypervisor as H
from . import workloads as W

DETAILED, FAST = "detailed", "fast"
DEFAULT_CLOCK_HZ = 100_000_000
SLOWDOWN_EPS = 1e-9

_HARDWARE_KEYS = {"calibration", "clock_hz", "cores", "seed"}
_SCHEDULE_KEYS = {"major_frame", "context_switch_cycles", "window"}
_PARTITION_KEYS = {"kind", "workload", "backend", "image", "seed"}
_DEFAULT_IMAGES = {W.CLOUD_UNET: "cloud_demo_32", W.SHIP_DETECTOR: "ship_demo_64"}


class ScenarioError(ValueError):
    """Malformed scenario file."""


class ValidationError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


@dataclass(frozen=True)
class PartitionConfig:
    id: str
    kind: str = H.WORKLOAD
    workload: Optional[str] = None
    backend: Optional[str] = None
    image: Optional[str] = None
    seed: Optional[int] = None


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    schedule: H.Schedule
    partitions: tuple
    cost: B.CostParams = field(default_factory=B.CostParams)
    clock_hz: float = DEFAULT_CLOCK_HZ
    cores: int = 4
    seed: int = 1
    mode: str = DETAILED

    @property
    def workloads(self) -> list:
        return [p for p in self.partitions if p.kind == H.WORKLOAD]

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return dataclasses.replace(self, seed=seed)

    def with_mode(self, mode: str) -> "ScenarioConfig":
        if mode not in (DETAILED, FAST):
            raise ValueError(f"unknown mode {mode!r}")
        return dataclasses.replace(self, mode=mode)

    def only(self, pid: str) -> "ScenarioConfig":
        """Sub-configuration running ``pid`` alone (manager kept if it needs the GPU)."""
        target = next(p for p in self.partitions if p.id == pid)
        keep = {pid}
        if target.backend == "gpu":
            keep |= {p.id for p in self.partitions if p.kind == H.GPU_MANAGER}
        sched = dataclasses.replace(
            self.schedule, windows=tuple(w for w in self.schedule.windows if w.partition in keep)
        )
        parts = tuple(p for p in self.partitions if p.id in keep)
        return dataclasses.replace(self, name=f"{self.name}/{pid}", schedule=sched, partitions=parts)


# -- scenario files ---------------------------------------------------------------

def _int(raw: str, where: str) -> int:
    try:
        return int(raw.replace("_", ""))
    except ValueError:
        raise ScenarioError(f"{where}: expected an integer, got {raw!r}") from None


def parse_scenario(text: str, name: str = "scenario") -> ScenarioConfig:
    """Parse the ``[hardware]`` / ``[schedule]`` / ``[partition <id>]`` format.

    Unknown sections or keys are errors.
    """
    hardware: dict = {}
    overrides: dict = {}
    schedule: dict = {}
    windows = []
    parts: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        where = f"{name}:{lineno}"
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(f"{where}: unterminated section header")
            head = line[1:-1].split()
            if head == ["hardware"] or head == ["schedule"]:
                section = head[0]
            elif len(head) == 2 and head[0] == "partition":
                if head[1] in parts:
                    raise ScenarioError(f"{where}: duplicate partition {head[1]!r}")
                section = ("partition", head[1])
                parts[head[1]] = {}
            else:
                raise ScenarioError(f"{where}: unknown section [{' '.join(head)}]")
            continue
        if "=" not in line:
            raise ScenarioError(f"{where}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ScenarioError(f"{where}: key {key!r} outside any section")
        if section == "hardware":
            if key in _HARDWARE_KEYS:
                store = hardware
            elif key in B.COST_FIELDS:
                store = overrides
            else:
                raise ScenarioError(f"{where}: unknown hardware key {key!r}")
            if key in store:
                raise ScenarioError(f"{where}: duplicate key {key!r}")
            store[key] = value
        elif section == "schedule":
            if key not in _SCHEDULE_KEYS:
                raise ScenarioError(f"{where}: unknown schedule key {key!r}")
            if key == "window":
                fields_ = value.split()
                if len(fields_) != 4:
                    raise ScenarioError(f"{where}: window needs 'core start duration partition'")
                core, start, dur = (_int(v, where) for v in fields_[:3])
                windows.append(H.Window(core, start, dur, fields_[3]))
            else:
                if key in schedule:
                    raise ScenarioError(f"{where}: duplicate key {key!r}")
                schedule[key] = _int(value, where)
        else:
            pid = section[1]
            if key not in _PARTITION_KEYS:
                raise ScenarioError(f"{where}: unknown partition key {key!r}")
            if key in parts[pid]:
                raise ScenarioError(f"{where}: duplicate key {key!r}")
            parts[pid][key] = value

    if "major_frame" not in schedule:
        raise ScenarioError(f"{name}: [schedule] needs major_frame")
    try:
        cost = B.load_calibration(hardware.get("calibration", "default"))
        if overrides:
            cost = cost.replace(**{k: B.coerce_cost_value(k, v) for k, v in overrides.items()})
    except (B.CalibrationError, FileNotFoundError) as exc:
        raise ScenarioError(f"{name}: {exc}") from None

    partitions = []
    for pid, kv in parts.items():
        kind = kv.get("kind", H.WORKLOAD)
        if kind not in (H.WORKLOAD, H.GPU_MANAGER):
            raise ScenarioError(f"{name}: partition {pid}: unknown kind {kind!r}")
        seed = _int(kv["seed"], f"{name}: partition {pid}") if "seed" in kv else None
        partitions.append(PartitionConfig(pid, kind, kv.get("workload"), kv.get("backend"), kv.get("image"), seed))
    return ScenarioConfig(
        name=name,
        schedule=H.Schedule(schedule["major_frame"], tuple(windows), schedule.get("context_switch_cycles", 50)),
        partitions=tuple(partitions),
        cost=cost,
        clock_hz=float(hardware.get("clock_hz", DEFAULT_CLOCK_HZ)),
        cores=_int(hardware.get("cores", "4"), f"{name}: cores"),
        seed=_int(hardware.get("seed", "1"), f"{name}: seed"),
    )


def shipped_scenarios() -> list:
    root = resources.files("hetsim.data.scenarios")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".scn"))


def load_scenario(source: Union[str, Path]) -> ScenarioConfig:
    """Shipped scenario by name, or a scenario file path."""
    path = Path(str(source))
    if path.exists():
        return parse_scenario(path.read_text(), path.stem)
    res = resources.files("hetsim.data.scenarios").joinpath(f"{source}.scn")
    if not res.is_file():
        raise ScenarioError(f"no scenario file or shipped scenario named {source!r}")
    return parse_scenario(res.read_text(), str(source))


def validate_config(cfg: ScenarioConfig) -> list:
    """Every problem with ``cfg``: partition settings first, then the schedule."""
    problems = []
    for p in cfg.partitions:
        if p.kind != H.WORKLOAD:
            continue
        if p.workload is None:
            problems.append(f"partition {p.id}: missing workload")
        elif p.workload not in W.BUILDERS:
            problems.append(f"partition {p.id}: unknown workload {p.workload!r}")
        if p.backend is None:
            problems.append(f"partition {p.id}: missing backend")
        elif p.backend not in B.BACKENDS:
            problems.append(f"partition {p.id}: unknown backend {p.backend!r}")
        image = p.image or _DEFAULT_IMAGES.get(p.workload)
        if image is not None and image not in W.FIXTURES:
            problems.append(f"partition {p.id}: unknown image {image!r}")
    for w in cfg.schedule.windows:
        if w.core >= cfg.cores:
            problems.append(f"window core={w.core} [{w.start},{w.end}) partition={w.partition}: "
                            f"core out of range (cores={cfg.cores})")
    # stand-in programs are enough to tell GPU users apart
    stubs = [
        H.PartitionDesc(p.id, [H.Step("acquire_gpu")] if p.backend == "gpu" else [], p.kind)
        for p in cfg.partitions
    ]
    return problems + H.validate_schedule(cfg.schedule, stubs)


def build_programs(cfg: ScenarioConfig) -> dict:
    out = {}
    for p in cfg.workloads:
        net = W.build_network(p.workload, p.seed if p.seed is not None else cfg.seed)
        image = W.load_image(p.image or _DEFAULT_IMAGES[p.workload])
        out[p.id] = W.compile_program(net, image, p.backend, cfg.cost)
    return out


def build_scenario(cfg: ScenarioConfig, programs: Optional[dict] = None) -> H.Scenario:
    programs = build_programs(cfg) if programs is None else programs
    parts = [
        H.PartitionDesc(p.id, programs.get(p.id, ()), p.kind)
        for p in cfg.partitions
    ]
    return H.Scenario(cfg.schedule, parts, name=cfg.name)


def _checked(cfg: ScenarioConfig) -> None:
    problems = validate_config(cfg)
    if problems:
        raise ValidationError(problems)


# -- running ----------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionResult:
    id: str
    workload: str
    backend: str
    cycles: int
    seconds: float
    output: str = ""
    isolation_cycles: Optional[int] = None
    slowdown: Optional[float] = None


@dataclass(frozen=True)
class RunReport:
    scenario: str
    kind: str
    mode: str
    clock_hz: float
    partitions: tuple = ()
    wall_clock: float = 0.0

    def partition(self, pid: str) -> PartitionResult:
        return next(p for p in self.partitions if p.id == pid)

    def cycles(self) -> dict:
        return {p.id: p.cycles for p in self.partitions}


@dataclass
class SimOutcome:
    finish: dict
    outputs: dict
    result: Optional[H.RunResult] = None
    wall_clock: float = 0.0


def simulate(cfg: ScenarioConfig, mode: Optional[str] = None, trace: bool = True) -> SimOutcome:
    """One engine pass over ``cfg`` (no isolation baselines)."""
    _checked(cfg)
    mode = mode or cfg.mode
    programs = build_programs(cfg)
    sc = build_scenario(cfg, programs)
    t0 = time.perf_counter()
    if mode == DETAILED:
        res = H.run(sc, trace=trace)
        if not res.completed:
            stuck = [p for p, t in res.finish.items() if t is None]
            raise H.SimulationError(f"partitions never finished: {', '.join(stuck)}")
        outcome = SimOutcome(res.finish, res.outputs, res)
    elif mode == FAST:
        finish = H.run_fast(sc)
        outputs = {pid: prog.reference_output() for pid, prog in programs.items()}
        outcome = SimOutcome(finish, outputs)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    outcome.wall_clock = time.perf_counter() - t0
    return outcome


def _result(cfg, pc: PartitionConfig, outcome: SimOutcome, iso=None) -> PartitionResult:
    cycles = outcome.finish[pc.id]
    slowdown = None if iso is None else cycles / iso
    return PartitionResult(pc.id, pc.workload, pc.backend, cycles, cycles / cfg.clock_hz,
                           outcome.outputs[pc.id].summary(), iso, slowdown)


def run_isolation(cfg: ScenarioConfig, mode: Optional[str] = None, keep: Optional[dict] = None) -> RunReport:
    """One workload alone.  ``keep``, when given, receives the :class:`SimOutcome`."""
    if len(cfg.workloads) != 1:
        raise ValidationError([f"isolation run needs exactly one workload partition, found {len(cfg.workloads)}"])
    mode = mode or cfg.mode
    outcome = simulate(cfg, mode)
    if keep is not None:
        keep["outcome"] = outcome
    return RunReport(cfg.name, "isolation", mode, cfg.clock_hz,
                     tuple(_result(cfg, p, outcome) for p in cfg.workloads), outcome.wall_clock)


def workload_cores(cfg: ScenarioConfig) -> dict:
    return {p.id: sorted({w.core for w in cfg.schedule.windows_of(p.id)}) for p in cfg.workloads}


def run_concurrent(cfg: ScenarioConfig, mode: Optional[str] = None, keep: Optional[dict] = None) -> RunReport:
    """Both partitions together, with slowdown against each one alone."""
    if len(cfg.workloads) != 2:
        raise ValidationError([f"concurrent run needs two workload partitions, found {len(cfg.workloads)}"])
    cores = workload_cores(cfg)
    a, b = (cores[p.id] for p in cfg.workloads)
    if set(a) & set(b):
        raise ValidationError([f"concurrent workloads must run on distinct cores, got {a} and {b}"])
    mode = mode or cfg.mode
    _checked(cfg)
    iso = {p.id: run_isolation(cfg.only(p.id), mode).partition(p.id).cycles for p in cfg.workloads}
    outcome = simulate(cfg, mode)
    if keep is not None:
        keep["outcome"] = outcome
    parts = tuple(_result(cfg, p, outcome, iso[p.id]) for p in cfg.workloads)
    return RunReport(cfg.name, "concurrent", mode, cfg.clock_hz, parts, outcome.wall_clock)


def run_config(cfg: ScenarioConfig, mode: Optional[str] = None, keep: Optional[dict] = None) -> RunReport:
    if len(cfg.workloads) == 2:
        return run_concurrent(cfg, mode, keep)
    return run_isolation(cfg, mode, keep)


# -- twin comparison ----------------------------------------------------------------

@dataclass(frozen=True)
class TwinRecord:
    scenario: str
    contended: bool
    detailed_cycles: dict
    fast_cycles: dict
    outputs_equal: bool
    detailed_wall: float
    fast_wall: float

    @property
    def cycles_equal(self) -> bool:
        return self.detailed_cycles == self.fast_cycles

    @property
    def discrepancy(self) -> dict:
        """Relative error of the fast estimate per partition."""
        return {
            pid: (self.fast_cycles[pid] - d) / d for pid, d in self.detailed_cycles.items()
        }

    @property
    def wall_ratio(self) -> float:
        return self.detailed_wall / self.fast_wall if self.fast_wall > 0 else math.inf


def twin_compare(cfg: ScenarioConfig) -> TwinRecord:
    detailed = simulate(cfg, DETAILED, trace=True)
    fast = simulate(cfg, FAST)
    return TwinRecord(
        cfg.name,
        len(cfg.workloads) > 1 and any(p.backend == "gpu" for p in cfg.workloads),
        dict(detailed.finish),
        dict(fast.finish),
        detailed.outputs == fast.outputs,
        detailed.wall_clock,
        fast.wall_clock,
    )


# -- reports ------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    return repr(float(x))


def emit_report(report: RunReport, fmt: str = "table") -> str:
    """Render as an aligned ``table`` or ``records`` (one ``key=value`` per line)."""
    concurrent = report.kind == "concurrent"
    if fmt == "records":
        lines = [f"scenario={report.scenario}", f"kind={report.kind}", f"mode={report.mode}",
                 f"clock_hz={_fmt_float(report.clock_hz)}"]
        for p in report.partitions:
            pre = f"partition.{p.id}."
            lines += [f"{pre}workload={p.workload}", f"{pre}backend={p.backend}",
                      f"{pre}cycles={p.cycles}", f"{pre}seconds={_fmt_float(p.seconds)}",
                      f"{pre}output={p.output}"]
            if concurrent:
                lines += [f"{pre}isolation_cycles={p.isolation_cycles}",
                          f"{pre}isolation_seconds={_fmt_float(p.isolation_cycles / report.clock_hz)}",
                          f"{pre}slowdown={_fmt_float(p.slowdown)}"]
        return "\n".join(lines) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    header = ["Partition", "Workload", "Backend", "Cycles", "Time (s)"]
    if concurrent:
        header += ["Isolation (s)", "Slowdown"]
    rows = []
    for p in report.partitions:
        row = [p.id, p.workload, p.backend, str(p.cycles), f"{p.seconds:.6f}"]
        if concurrent:
            row += [f"{p.isolation_cycles / report.clock_hz:.6f}", f"{p.slowdown:.3f}x"]
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    out = [f"{report.scenario} ({report.kind}, {report.mode})"]
    out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    out.append("  ".join("-" * w for w in widths))
    for r in rows:
        out.append("  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
    return "\n".join(out) + "\n"


def parse_records(text: str) -> dict:
    """Inverse of the ``records`` format; numeric values become int/float."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        for conv in (int, float):
            try:
                out[key] = conv(value)
                break
            except ValueError:
                continue
        else:
            out[key] = value
    return out


# -- bench suite --------------------------------------------------------------------

GPU_PAIR = "conc_ship_gpu_cloud_gpu"
LIGHT_PAIRS = ("conc_ship_simd_cloud_simd", "conc_ship_simd_cloud_gpu", "conc_ship_gpu_cloud_simd")
ISOLATION_BANDS = {
    # (workload, numerator scenario, denominator scenario): (lo, hi)
    ("cloud", "simd_speedup"): ("iso_cloud_cpu", "iso_cloud_simd", 1.7, 2.3),
    ("cloud", "gpu_over_cpu"): ("iso_cloud_gpu", "iso_cloud_cpu", 1.5, 2.1),
    ("ship", "simd_speedup"): ("iso_ship_cpu", "iso_ship_simd", 2.0, 3.0),
    ("ship", "gpu_over_cpu"): ("iso_ship_gpu", "iso_ship_cpu", 1.0, 1.35),
}
GPU_PAIR_MIN_SLOWDOWN = 5.0
LIGHT_PAIR_MAX_SLOWDOWN = 1.25


@dataclass(frozen=True)
class BandCheck:
    name: str
    value: float
    lo: float = -math.inf
    hi: float = math.inf
    lo_strict: bool = False

    @property
    def passed(self) -> bool:
        above = self.value > self.lo if self.lo_strict else self.value >= self.lo
        return above and self.value <= self.hi

    def line(self) -> str:
        lo = ("(" if self.lo_strict else "[") + (f"{self.lo:g}" if self.lo > -math.inf else "-inf")
        hi = (f"{self.hi:g}" if self.hi < math.inf else "inf") + "]"
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} value={self.value:.6g} band={lo}, {hi}"


@dataclass
class BenchResult:
    checks: list
    reports: dict
    twins: dict
    golden_mismatches: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and not self.golden_mismatches

    def lines(self) -> list:
        out = [c.line() for c in self.checks]
        for name in self.golden_mismatches:
            out.append(f"FAIL golden.{name} report differs from recorded golden")
        for name, tw in sorted(self.twins.items()):
            disc = " ".join(f"{pid}={d:+.4f}" for pid, d in tw.discrepancy.items())
            out.append(f"INFO twin.{name} discrepancy {disc} wall_ratio={tw.wall_ratio:.2f}")
        return out


def golden_text(name: str) -> Optional[str]:
    res = resources.files("hetsim.data.golden").joinpath(f"{name}.records")
    return res.read_text() if res.is_file() else None


def bench_suite(names: Optional[Sequence] = None) -> BenchResult:
    """Run shipped scenarios in detailed mode and check every ratio band."""
    names = list(names or shipped_scenarios())
    reports = {n: run_config(load_scenario(n), DETAILED) for n in names}
    checks = []
    for (wl, metric), (num, den, lo, hi) in ISOLATION_BANDS.items():
        if num in reports and den in reports:
            value = reports[num].partition(wl).cycles / reports[den].partition(wl).cycles
            checks.append(BandCheck(f"{wl}.{metric}", value, lo, hi))
    for n, rep in reports.items():
        if rep.kind != "concurrent":
            continue
        for p in rep.partitions:
            checks.append(BandCheck(f"{n}.{p.id}.slowdown_floor", p.slowdown, 1.0 - SLOWDOWN_EPS))
            if n == GPU_PAIR and p.id == "cloud":
                checks.append(BandCheck(f"{n}.cloud.slowdown", p.slowdown, GPU_PAIR_MIN_SLOWDOWN, lo_strict=True))
            elif n in LIGHT_PAIRS:
                checks.append(BandCheck(f"{n}.{p.id}.slowdown", p.slowdown, 1.0 - SLOWDOWN_EPS,
                                        LIGHT_PAIR_MAX_SLOWDOWN))
    twins = {}
    for n in names:
        tw = twin_compare(load_scenario(n))
        twins[n] = tw
        checks.append(BandCheck(f"twin.{n}.outputs_equal", float(tw.outputs_equal), 1.0, 1.0))
        if not tw.contended:
            checks.append(BandCheck(f"twin.{n}.cycles_equal", float(tw.cycles_equal), 1.0, 1.0))
    mismatches = []
    for n, rep in reports.items():
        gold = golden_text(n)
        if gold is not None and gold != emit_report(rep, "records"):
            mismatches.append(n)
    return BenchResult(checks, reports, twins, mismatches)
