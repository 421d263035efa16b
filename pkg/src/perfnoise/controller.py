"""Orchestrate noise sweeps: plan loading, scheduling, builds, runs.

A plan (TOML) names the program to build, the loop regions to target,
the noise modes and counts to sweep, and stopping rules.  The controller
compiles to assembly, splices noise, rebuilds, runs repetitions, and
lays results out on disk for the analyzer.  A simulated backend swaps
the build-and-run step for the synthetic timing model so the whole
pipeline can be exercised deterministically without a compiler.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from . import injector, patterns, probe, sim
from .errors import (
    AnchorMissing,
    BuildFailure,
    CacheCorrupt,
    PlanError,
    RunFailure,
)

DEFAULT_K_MAX = 100
DEFAULT_REPETITIONS = 5
DEFAULT_STOP_WINDOW = 2
DEFAULT_STOP_DELTA = 0.2
DEFAULT_CLUSTER_GAP = 0.2
SIM_TIME_UNIT_NS = 1_000_000  # simulated duration 1.0 == 1 ms


def default_k_schedule(k_max: int = DEFAULT_K_MAX) -> list[int]:
    """Counts to sweep: every value to 5, step 5 to 50, step 10 beyond."""
    if k_max < 0:
        raise ValueError("k_max must be non-negative")
    ks = list(range(0, 6)) + list(range(10, 51, 5)) + list(range(60, 1 + max(60, k_max), 10))
    return [k for k in ks if k <= k_max]


# --- plan ----------------------------------------------------------------

@dataclass(frozen=True)
class BuildConfig:
    sources: tuple[str, ...]
    cc: str = "cc"
    cflags: tuple[str, ...] = ("-O2", "-g")
    ldflags: tuple[str, ...] = ("-pthread", "-lm")


@dataclass(frozen=True)
class RunConfig:
    repetitions: int = DEFAULT_REPETITIONS
    args: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = ()
    timeout_s: float = 120.0


@dataclass(frozen=True)
class NoiseConfig:
    modes: tuple[str, ...] = ("fp_add64", "int64_add", "l1_ld64", "memory_ld64")
    k_max: int = DEFAULT_K_MAX
    k_schedule: Optional[tuple[int, ...]] = None
    register_pool_size: Optional[int] = None
    memory_buffer_bytes: int = patterns.NoiseBufferSpec().memory_buffer_bytes

    def schedule(self) -> list[int]:
        if self.k_schedule is not None:
            return list(self.k_schedule)
        return default_k_schedule(self.k_max)


@dataclass(frozen=True)
class StopConfig:
    enabled: bool = True
    window: int = DEFAULT_STOP_WINDOW
    delta: float = DEFAULT_STOP_DELTA


@dataclass(frozen=True)
class TargetSpec:
    region: str
    source: Optional[str] = None       # file holding the anchor (real runs)
    loop_body_size: int = 20           # used as-is for simulated runs


@dataclass(frozen=True)
class SimConfig:
    params: sim.IdealModelParams = field(default_factory=sim.IdealModelParams)
    per_mode: tuple[tuple[str, sim.IdealModelParams], ...] = ()

    def for_mode(self, mode: str) -> sim.IdealModelParams:
        for name, p in self.per_mode:
            if name == mode:
                return p
        return self.params


@dataclass(frozen=True)
class ExperimentPlan:
    targets: tuple[TargetSpec, ...]
    noise: NoiseConfig = NoiseConfig()
    run: RunConfig = RunConfig()
    stop: StopConfig = StopConfig()
    build: Optional[BuildConfig] = None
    simulate: Optional[SimConfig] = None
    plan_dir: Path = Path(".")

    @property
    def simulated(self) -> bool:
        return self.simulate is not None


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise PlanError(msg)


def _sim_params(table: dict, defaults: sim.IdealModelParams) -> sim.IdealModelParams:
    known = {f.name for f in dataclasses.fields(sim.IdealModelParams)}
    extra = set(table) - known - {"per_mode"}
    _require(not extra, f"unknown [sim] keys: {sorted(extra)}")
    try:
        return dataclasses.replace(defaults, **{k: v for k, v in table.items()
                                                if k in known})
    except (TypeError, ValueError) as e:
        raise PlanError(f"bad [sim] parameters: {e}") from e


def read_plan_tables(path: str | Path) -> dict:
    """Raw TOML tables of a plan file; I/O or syntax defects raise PlanError."""
    try:
        return _toml.loads(Path(path).read_text())
    except OSError as e:
        raise PlanError(f"cannot read plan: {e}") from e
    except _toml.TOMLDecodeError as e:
        raise PlanError(f"plan is not valid TOML: {e}") from e


def noise_from_table(n: dict) -> NoiseConfig:
    modes = tuple(n.get("modes", NoiseConfig.modes))
    for m in modes:
        _require(m in patterns.available_modes(), f"unknown noise mode {m!r}")
    sched = n.get("k_schedule")
    if sched is not None:
        _require(all(isinstance(k, int) and k >= 0 for k in sched),
                 "k_schedule must be non-negative integers")
        _require(sched == sorted(set(sched)),
                 "k_schedule must be strictly increasing")
        sched = tuple(sched)
    noise = NoiseConfig(
        modes=modes,
        k_max=int(n.get("k_max", DEFAULT_K_MAX)),
        k_schedule=sched,
        register_pool_size=n.get("register_pool_size"),
        memory_buffer_bytes=int(n.get("memory_buffer_bytes",
                                      NoiseConfig.memory_buffer_bytes)),
    )
    _require(noise.k_max >= 0, "k_max must be non-negative")
    return noise


def run_from_table(r: dict) -> RunConfig:
    run = RunConfig(
        repetitions=int(r.get("repetitions", DEFAULT_REPETITIONS)),
        args=tuple(str(a) for a in r.get("args", ())),
        env=tuple(sorted((str(k), str(v)) for k, v in r.get("env", {}).items())),
        timeout_s=float(r.get("timeout_s", 120.0)),
    )
    _require(run.repetitions >= 1, "repetitions must be at least 1")
    return run


def stop_from_table(s: dict) -> StopConfig:
    stop = StopConfig(
        enabled=bool(s.get("enabled", True)),
        window=int(s.get("window", DEFAULT_STOP_WINDOW)),
        delta=float(s.get("delta", DEFAULT_STOP_DELTA)),
    )
    _require(stop.window >= 1, "stop window must be at least 1")
    _require(stop.delta > 0, "stop delta must be positive")
    return stop


def build_from_table(b: dict) -> BuildConfig:
    _require(b.get("sources"), "[build] needs a sources list")
    return BuildConfig(
        sources=tuple(str(x) for x in b["sources"]),
        cc=str(b.get("cc", "cc")),
        cflags=tuple(str(x) for x in b.get("cflags", BuildConfig.cflags)),
        ldflags=tuple(str(x) for x in b.get("ldflags", BuildConfig.ldflags)),
    )


def sim_from_table(tbl: dict, modes: Sequence[str]) -> SimConfig:
    base = _sim_params(tbl, sim.IdealModelParams())
    per_mode = []
    for mode, sub in tbl.get("per_mode", {}).items():
        _require(mode in modes, f"[sim.per_mode] names unswept mode {mode!r}")
        per_mode.append((mode, _sim_params(sub, base)))
    return SimConfig(params=base, per_mode=tuple(sorted(per_mode)))


def load_plan(path: str | Path) -> ExperimentPlan:
    """Parse and validate a plan file.  Any defect raises PlanError."""
    path = Path(path)
    raw = read_plan_tables(path)

    known_tables = {"build", "run", "target", "noise", "stop", "sim"}
    extra = set(raw) - known_tables
    _require(not extra, f"unknown plan tables: {sorted(extra)}")

    targets_raw = raw.get("target", [])
    _require(isinstance(targets_raw, list) and targets_raw,
             "plan needs at least one [[target]]")
    targets = []
    for t in targets_raw:
        _require("region" in t, "[[target]] needs a region id")
        targets.append(TargetSpec(
            region=str(t["region"]),
            source=t.get("source"),
            loop_body_size=int(t.get("loop_body_size", 20)),
        ))
    _require(len({t.region for t in targets}) == len(targets),
             "duplicate region ids across targets")

    noise = noise_from_table(raw.get("noise", {}))
    run = run_from_table(raw.get("run", {}))
    stop = stop_from_table(raw.get("stop", {}))
    build = build_from_table(raw["build"]) if "build" in raw else None
    simulate = (sim_from_table(raw["sim"], noise.modes)
                if "sim" in raw else None)

    _require(build is not None or simulate is not None,
             "plan needs [build] (real runs) or [sim] (simulated runs)")
    if build is not None and simulate is None:
        for t in targets:
            _require(t.source is not None,
                     f"target {t.region!r} needs a source file for real runs")
            _require(t.source in build.sources,
                     f"target source {t.source!r} is not in [build].sources")

    return ExperimentPlan(targets=tuple(targets), noise=noise, run=run,
                          stop=stop, build=build, simulate=simulate,
                          plan_dir=path.parent.resolve())


# --- stopping and clustering ---------------------------------------------

def online_stop(values: Sequence[float], baseline: float,
                window: int = DEFAULT_STOP_WINDOW,
                delta: float = DEFAULT_STOP_DELTA) -> bool:
    """Stop once the last ``window`` points all clear (1+delta)*baseline
    and the window is not falling back (last >= first of window)."""
    if len(values) < window:
        return False
    tail = list(values[-window:])
    threshold = (1.0 + delta) * baseline
    return all(v > threshold for v in tail) and tail[-1] >= tail[0]


def cluster_samples(values: Sequence[float],
                    rel_gap: float = DEFAULT_CLUSTER_GAP) -> list[list[float]]:
    """Split sorted samples wherever the relative jump exceeds ``rel_gap``.

    Returns clusters in ascending order.  Timing distributions that are
    bimodal (two thread populations, frequency steps) come back as two
    classes; unimodal jitter stays one.
    """
    if rel_gap <= 0:
        raise ValueError("rel_gap must be positive")
    s = sorted(float(v) for v in values)
    if not s:
        return []
    clusters = [[s[0]]]
    for a, b in zip(s, s[1:]):
        jump = (b - a) > rel_gap * a if a > 0 else b > a
        if jump:
            clusters.append([b])
        else:
            clusters[-1].append(b)
    return clusters


def cluster_medians(values: Sequence[float],
                    rel_gap: float = DEFAULT_CLUSTER_GAP) -> list[float]:
    import statistics
    return [statistics.median(c) for c in cluster_samples(values, rel_gap)]


def class_series(samples_by_k: dict[int, Sequence[float]],
                 rel_gap: float = DEFAULT_CLUSTER_GAP) -> list[dict[int, float]]:
    """Per-class median series; classes are matched across counts by rank
    (slowest class at each count is the last series, and so on)."""
    series: list[dict[int, float]] = []
    for k in sorted(samples_by_k):
        for rank, med in enumerate(cluster_medians(samples_by_k[k], rel_gap)):
            while len(series) <= rank:
                series.append({})
            series[rank][k] = med
    return series


# --- build cache ----------------------------------------------------------

class BuildCache:
    """Content-addressed store of built artifacts.

    Keys hash everything that influences the artifact, so reruns of an
    unchanged plan skip the assemble-and-link step entirely and edits
    rebuild only the combinations they touch.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(**parts) -> str:
        blob = json.dumps(parts, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def _entry(self, key: str) -> Path:
        return self.root / key[:2] / key

    def lookup(self, key: str) -> Optional[bytes]:
        entry = self._entry(key)
        blob_path = entry / "blob"
        sha_path = entry / "sha256"
        if not entry.exists():
            return None
        try:
            blob = blob_path.read_bytes()
            recorded = sha_path.read_text().strip()
        except OSError as e:
            raise CacheCorrupt(f"unreadable cache entry {key}: {e}") from e
        if hashlib.sha256(blob).hexdigest() != recorded:
            raise CacheCorrupt(f"cache entry {key} fails its checksum")
        return blob

    def store(self, key: str, blob: bytes) -> None:
        entry = self._entry(key)
        entry.mkdir(parents=True, exist_ok=True)
        (entry / "blob").write_bytes(blob)
        (entry / "sha256").write_text(hashlib.sha256(blob).hexdigest() + "\n")

    def clear(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)
        self.root.mkdir(parents=True, exist_ok=True)


# --- results layout --------------------------------------------------------

def rep_csv_path(out_dir: Path, target: str, mode: str, k: int, rep: int) -> Path:
    return Path(out_dir) / "raw" / target / mode / f"k{k}" / f"rep{rep}.csv"


def _series_path(out_dir: Path, target: str, mode: str) -> Path:
    return Path(out_dir) / "series" / target / f"{mode}.json"


def _audit_path(out_dir: Path, target: str, mode: str, k: int) -> Path:
    return Path(out_dir) / "audits" / target / mode / f"k{k}.json"


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- runners ----------------------------------------------------------------

def _write_rep_csv(path: Path, region: str, duration_ns: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("region_id,thread_id,sample_index,duration_ns\n"
                    f"{region},0,0,{duration_ns}\n")


def _run_simulated(plan: ExperimentPlan, out_dir: Path) -> list[dict]:
    schedule = plan.noise.schedule()
    summaries = []
    for target in plan.targets:
        for mode in plan.noise.modes:
            params = plan.simulate.for_mode(mode)
            samples_by_k: dict[int, list[float]] = {}
            used: list[int] = []
            medians: list[float] = []
            stopped_at = None
            for k in schedule:
                reps = []
                for rep in range(plan.run.repetitions):
                    value = sim.simulate(params, k, rep)
                    ns = max(0, round(value * SIM_TIME_UNIT_NS))
                    _write_rep_csv(rep_csv_path(out_dir, target.region, mode,
                                                k, rep), target.region, ns)
                    reps.append(float(ns))
                samples_by_k[k] = reps
                used.append(k)
                medians.append(cluster_medians(reps)[0])
                if plan.stop.enabled and len(used) > 1 and online_stop(
                        medians, medians[0], plan.stop.window, plan.stop.delta):
                    stopped_at = k
                    break
            summaries.append(_finish_series(
                out_dir, target, mode, samples_by_k, used, stopped_at))
    return summaries


def _finish_series(out_dir: Path, target: TargetSpec, mode: str,
                   samples_by_k: dict[int, list[float]], used: list[int],
                   stopped_at: Optional[int],
                   loop_body_size: Optional[int] = None) -> dict:
    classes = class_series(samples_by_k)
    record = {
        "region": target.region,
        "mode": mode,
        "loop_body_size": loop_body_size or target.loop_body_size,
        "k_used": used,
        "baseline": classes[0][used[0]] if classes and used else None,
        "samples": {str(k): v for k, v in sorted(samples_by_k.items())},
        "classes": [{str(k): v for k, v in sorted(c.items())} for c in classes],
        "stopped_at": stopped_at,
    }
    _write_json(_series_path(out_dir, target.region, mode), record)
    return record


def _sh(cmd: Sequence[str], err_cls, what: str, **kwargs):
    try:
        res = subprocess.run(cmd, capture_output=True, text=True, **kwargs)
    except (OSError, subprocess.TimeoutExpired) as e:
        raise err_cls(f"{what}: {e}") from e
    if res.returncode != 0:
        raise err_cls(f"{what} failed (exit {res.returncode}):\n{res.stderr}")
    return res


class _RealRunner:
    """Compile, inject, link against the probe runtime, and execute."""

    def __init__(self, plan: ExperimentPlan, out_dir: Path):
        self.plan = plan
        self.out_dir = out_dir
        self.work = out_dir / "build"
        self.work.mkdir(parents=True, exist_ok=True)
        self.cache = BuildCache(out_dir / "cache")
        self.cc = plan.build.cc
        self.runtime_obj = probe.build_runtime(self.work, cc=self.cc)
        self.asm_texts: dict[str, str] = {}   # source name -> baseline asm
        self.objects: dict[str, Path] = {}    # source name -> plain object

    def _compile_all(self) -> None:
        b = self.plan.build
        for src in b.sources:
            path = (self.plan.plan_dir / src).resolve()
            if not path.exists():
                raise BuildFailure(f"source not found: {path}")
            asm_out = self.work / (Path(src).stem + ".s")
            _sh([self.cc, "-S", *b.cflags, f"-I{probe.RUNTIME_DIR}",
                 str(path), "-o", str(asm_out)],
                BuildFailure, f"compiling {src} to assembly")
            self.asm_texts[src] = asm_out.read_text()
            obj_out = self.work / (Path(src).stem + ".o")
            _sh([self.cc, "-c", *b.cflags, f"-I{probe.RUNTIME_DIR}",
                 str(path), "-o", str(obj_out)],
                BuildFailure, f"compiling {src}")
            self.objects[src] = obj_out

    def _site(self, target: TargetSpec) -> injector.InjectionSite:
        text = self.asm_texts[target.source]
        for site in injector.locate_anchors(text):
            if site.region_id == target.region:
                return site
        raise AnchorMissing(
            f"no anchor for region {target.region!r} in {target.source}")

    def _binary_for(self, target: TargetSpec, mode: str, k: int) -> tuple[Path, dict]:
        b = self.plan.build
        text = self.asm_texts[target.source]
        site = self._site(target)
        pattern = patterns.get_pattern(mode, site.isa)
        if self.plan.noise.register_pool_size:
            pattern = dataclasses.replace(
                pattern, register_pool_size=self.plan.noise.register_pool_size)
        injected, report = injector.inject(text, site, pattern, k)
        checked = injector.audit(text, injected, site, k, pattern)
        audit_dict = json.loads(checked.to_json())

        key = BuildCache.key(
            kind="binary", mode=mode, k=k, region=target.region,
            cc=self.cc, cflags=list(b.cflags), ldflags=list(b.ldflags),
            asm=hashlib.sha256(injected.encode()).hexdigest(),
            others=sorted(hashlib.sha256(self.asm_texts[s].encode()).hexdigest()
                          for s in b.sources if s != target.source),
            runtime=self.runtime_obj.name,
        )
        exe = self.work / f"prog_{key[:16]}"
        try:
            blob = self.cache.lookup(key)
        except CacheCorrupt:
            self.cache.clear()
            blob = None
        if blob is not None:
            exe.write_bytes(blob)
            exe.chmod(0o755)
            return exe, audit_dict

        inj_s = self.work / f"inj_{key[:16]}.s"
        inj_s.write_text(injected)
        other_objs = [str(self.objects[s]) for s in b.sources
                      if s != target.source]
        _sh([self.cc, *b.cflags, str(inj_s), *other_objs,
             str(self.runtime_obj), "-o", str(exe), *b.ldflags],
            BuildFailure, f"linking {target.region}/{mode}/k{k}")
        self.cache.store(key, exe.read_bytes())
        return exe, audit_dict

    def _run_rep(self, exe: Path, target: TargetSpec, mode: str, k: int,
                 rep: int) -> list[float]:
        csv_path = rep_csv_path(self.out_dir, target.region, mode, k, rep)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        env = dict(os.environ)
        env.update(dict(self.plan.run.env))
        env["NOISE_PROBE_OUT"] = str(csv_path.resolve())
        needs_mem = patterns.get_pattern(mode, "x86_64").mode.uses_memory_buffer
        if needs_mem:
            env["NOISE_MEM_BUFFER_BYTES"] = str(self.plan.noise.memory_buffer_bytes)
        else:
            env.pop("NOISE_MEM_BUFFER_BYTES", None)
        _sh([str(exe), *self.plan.run.args], RunFailure,
            f"running {target.region}/{mode}/k{k} rep{rep}",
            timeout=self.plan.run.timeout_s, env=env, cwd=self.work)
        samples = probe.read_samples(csv_path)
        durations = [float(s.duration_ns) for s in samples
                     if s.region_id == target.region]
        if not durations:
            raise RunFailure(
                f"no samples for region {target.region!r} in {csv_path}")
        return durations

    def run(self) -> list[dict]:
        self._compile_all()
        schedule = self.plan.noise.schedule()
        summaries = []
        for target in self.plan.targets:
            site = self._site(target)
            for mode in self.plan.noise.modes:
                samples_by_k: dict[int, list[float]] = {}
                used: list[int] = []
                medians: list[float] = []
                stopped_at = None
                for k in schedule:
                    exe, audit_dict = self._binary_for(target, mode, k)
                    _write_json(_audit_path(self.out_dir, target.region,
                                            mode, k), audit_dict)
                    reps: list[float] = []
                    for rep in range(self.plan.run.repetitions):
                        reps.extend(self._run_rep(exe, target, mode, k, rep))
                    samples_by_k[k] = reps
                    used.append(k)
                    medians.append(cluster_medians(reps)[0])
                    if self.plan.stop.enabled and len(used) > 1 and online_stop(
                            medians, medians[0],
                            self.plan.stop.window, self.plan.stop.delta):
                        stopped_at = k
                        break
                summaries.append(_finish_series(
                    self.out_dir, target, mode, samples_by_k, used,
                    stopped_at, loop_body_size=site.loop_body_size))
        return summaries


def run_experiment(plan: ExperimentPlan | str | Path, out_dir: str | Path) -> dict:
    """Execute a plan and lay out results under ``out_dir``.

    Returns the manifest that is also written to ``manifest.json``.
    """
    if not isinstance(plan, ExperimentPlan):
        plan = load_plan(plan)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if plan.simulated:
        summaries = _run_simulated(plan, out)
    else:
        summaries = _RealRunner(plan, out).run()
    manifest = {
        "backend": "simulated" if plan.simulated else "real",
        "k_schedule": plan.noise.schedule(),
        "modes": list(plan.noise.modes),
        "repetitions": plan.run.repetitions,
        "targets": [t.region for t in plan.targets],
        "series": [{"region": s["region"], "mode": s["mode"],
                    "k_used": s["k_used"], "stopped_at": s["stopped_at"]}
                   for s in summaries],
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_results(out_dir: str | Path):
    """Read series records back for analysis.

    Yields (record, samples) pairs where ``samples`` has integer keys.
    """
    out = Path(out_dir)
    series_dir = out / "series"
    if not series_dir.is_dir():
        raise FileNotFoundError(f"no series directory under {out}")
    for path in sorted(series_dir.rglob("*.json")):
        record = json.loads(path.read_text())
        record["samples"] = {int(k): v for k, v in record["samples"].items()}
        audits = []
        for apath in sorted((out / "audits" / record["region"]
                             / record["mode"]).glob("k*.json")
                            if (out / "audits").is_dir() else []):
            audits.append(json.loads(apath.read_text()))
        record["audits"] = audits
        yield record
