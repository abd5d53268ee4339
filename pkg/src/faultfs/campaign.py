"""Fault generator, I/O profiler and fault injector, run as a campaign.

A campaign profiles the workload once (counting invocations of the target
primitive and caching its golden outputs), then runs it ``n_runs`` times,
each time corrupting one uniformly chosen invocation, classifying the
outcome against the golden outputs, and aggregating class frequencies with
95% Wilson intervals.

Output directory layout::

    config.json      the validated configuration
    golden/          profile.json and the golden outputs
    runs.ndjson      one record per finished run (the resume point)
    runs/<id>/       per-run workspace and session log (removed unless kept)
    result.json      counts, rates and intervals
    result.csv       class,count,rate,ci_lo,ci_hi
"""
from __future__ import annotations

import csv
import importlib
import io
import json
import math
import multiprocessing
import os
import shutil
import subprocess
import sys
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from statistics import NormalDist

import jsonschema
import numpy as np

from .classify import OUTCOME_ORDER, ClassificationPolicy, OutcomeClass, RunOutcome, classify_run
from .errors import CampaignError, ConfigError
from .faultmodel import FaultModel, FaultSignature
from .interpose import SESSION_ENV, SessionLog, write_session_spec

MAX_RESAMPLES = 3
MAX_NO_FIRE_FRACTION = 0.05
DEFAULT_TIMEOUT_FLOOR = 30.0
WORKDIR_ENV = "FAULTFS_WORKDIR"


def load_schema() -> dict:
    text = resources.files("faultfs").joinpath("schemas/campaign.schema.json").read_text()
    return json.loads(text)


def validate_config(doc: dict) -> None:
    """Raise ConfigError listing every schema violation."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid campaign config:\n" + "\n".join(lines))


@dataclass(frozen=True)
class Step:
    argv: tuple[str, ...] = ()
    entry: str | None = None
    args: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Step":
        return cls(tuple(d.get("argv", ())), d.get("entry"), tuple(d.get("args", ())))

    def to_dict(self) -> dict:
        if self.entry:
            return {"entry": self.entry, "args": list(self.args)}
        return {"argv": list(self.argv)}


@dataclass(frozen=True)
class CampaignConfig:
    workload: Step
    signature: FaultSignature
    policy: ClassificationPolicy
    analysis: Step | None = None
    seed: int = 0
    n_runs: int = 1000
    parallelism: int = 1
    inputs: tuple[str, ...] = ()
    record_json: tuple[str, ...] = ()
    timeout_floor: float = DEFAULT_TIMEOUT_FLOOR
    keep_workspaces: bool = False
    name: str = "campaign"
    base_dir: str = "."

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | os.PathLike = ".") -> "CampaignConfig":
        validate_config(doc)
        sig = doc["signature"]
        template = FaultSignature(FaultModel.from_dict(sig["model"]),
                                  sig.get("primitive", "write"), 0)
        analysis = Step.from_dict(doc["analysis"]) if "analysis" in doc else None
        return cls(workload=Step.from_dict(doc["workload"]), signature=template,
                   policy=ClassificationPolicy.from_dict(doc["policy"]), analysis=analysis,
                   seed=doc.get("seed", 0), n_runs=doc.get("n_runs", 1000),
                   parallelism=doc.get("parallelism", 1), inputs=tuple(doc.get("inputs", ())),
                   record_json=tuple(doc.get("record_json", ())),
                   timeout_floor=doc.get("timeout_floor", DEFAULT_TIMEOUT_FLOOR),
                   keep_workspaces=doc.get("keep_workspaces", False),
                   name=doc.get("name", "campaign"), base_dir=os.path.abspath(base_dir))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CampaignConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, Path(path).resolve().parent)

    def to_dict(self) -> dict:
        doc = {"version": 1, "name": self.name, "seed": self.seed, "n_runs": self.n_runs,
               "parallelism": self.parallelism, "timeout_floor": self.timeout_floor,
               "workload": self.workload.to_dict(),
               "signature": {"primitive": self.signature.primitive,
                             "model": self.signature.model.to_dict()},
               "policy": self.policy.to_dict(), "inputs": list(self.inputs),
               "record_json": list(self.record_json),
               "keep_workspaces": self.keep_workspaces}
        if self.analysis:
            doc["analysis"] = self.analysis.to_dict()
        return doc


def toy_config(model: str | dict = "DroppedWrite", n_runs: int = 200, seed: int = 0,
               dims=(32, 32, 32), grid_seed: int = 7, precision: str = "f64",
               parallelism: int = 1, extra_write_args=()) -> dict:
    """Campaign config document for the bundled density-grid workload."""
    model = {"kind": model} if isinstance(model, str) else model
    write = ["write", "--dims", *map(str, dims), "--seed", str(grid_seed),
             "--precision", precision, "--out", "{workspace}", *extra_write_args]
    return {
        "version": 1, "name": f"toy-{model['kind']}", "seed": seed, "n_runs": n_runs,
        "parallelism": parallelism,
        "workload": {"entry": "faultfs.toy:main", "args": write},
        "analysis": {"entry": "faultfs.toy:main",
                     "args": ["analyze", "--input", "{workspace}/density.h5",
                              "--out", "{workspace}"]},
        "signature": {"primitive": "write", "model": model},
        "policy": {"mode": "BitwiseOnly", "compare": ["catalog.csv"],
                   "required": ["catalog.csv", "summary.json"],
                   "detector": {"file": "summary.json", "key": "n_halos", "equals": 0}},
        "record_json": ["summary.json"],
    }


# -- fault generator -------------------------------------------------------

def generate_signature(config: CampaignConfig, run_id: int) -> FaultSignature:
    """Deterministic in ``(config.seed, run_id)``."""
    ss = np.random.SeedSequence([config.seed, run_id])
    rng_seed = int(ss.generate_state(1, np.uint64)[0])
    t = config.signature
    return FaultSignature(t.model, t.primitive, rng_seed)


def target_rng(signature: FaultSignature) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(signature.rng_seed, spawn_key=(0,)))


def pick_target(count: int, rng: np.random.Generator) -> int:
    if count < 1:
        raise CampaignError("target primitive never invoked")
    return int(rng.integers(count))


# -- running steps ---------------------------------------------------------

def _substitute(items, workspace: Path) -> list[str]:
    return [s.replace("{workspace}", str(workspace)).replace("{python}", sys.executable)
            for s in items]


def _entry_child(entry: str, args: list[str], cwd: str, env: dict, log_dir: str) -> None:
    code = 1
    try:
        os.chdir(cwd)
        os.environ.clear()
        os.environ.update(env)
        out = os.open(os.path.join(log_dir, "stdout.txt"), os.O_WRONLY | os.O_CREAT | os.O_APPEND)
        err = os.open(os.path.join(log_dir, "stderr.txt"), os.O_WRONLY | os.O_CREAT | os.O_APPEND)
        os.dup2(out, 1)
        os.dup2(err, 2)
        module, func = entry.split(":")
        result = getattr(importlib.import_module(module), func)(args)
        code = int(result or 0)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
    except BaseException:
        traceback.print_exc()
    finally:
        sys.stdout.flush()
        sys.stderr.flush()
        os._exit(code)


@dataclass
class StepResult:
    exit_status: int | None
    timed_out: bool
    runtime: float


def run_step(step: Step, workspace: Path, log_dir: Path, env: dict | None = None,
             timeout: float | None = None) -> StepResult:
    """Run one workload or analysis step with ``workspace`` as its cwd."""
    workspace, log_dir = Path(workspace).resolve(), Path(log_dir).resolve()
    full_env = dict(os.environ)
    full_env.pop(SESSION_ENV, None)
    full_env.update(env or {})
    t0 = time.monotonic()
    if step.entry:
        # import once in the parent so every forked child starts warm
        try:
            importlib.import_module(step.entry.split(":")[0])
        except ImportError as exc:
            raise CampaignError(f"cannot import workload entry {step.entry!r}: {exc}") from exc
        ctx = multiprocessing.get_context("fork")
        proc = ctx.Process(target=_entry_child,
                           args=(step.entry, _substitute(step.args, workspace), str(workspace),
                                 full_env, str(log_dir)))
        proc.start()
        proc.join(timeout)
        timed_out = proc.is_alive()
        if timed_out:
            proc.kill()
            proc.join()
        return StepResult(None if timed_out else proc.exitcode, timed_out,
                          time.monotonic() - t0)
    with open(log_dir / "stdout.txt", "ab") as out, open(log_dir / "stderr.txt", "ab") as err:
        try:
            proc = subprocess.run(_substitute(step.argv, workspace), cwd=workspace,
                                  env=full_env, stdout=out, stderr=err, timeout=timeout)
        except subprocess.TimeoutExpired:
            return StepResult(None, True, time.monotonic() - t0)
        except OSError as exc:
            err.write(f"cannot start workload: {exc}\n".encode())
            return StepResult(127, False, time.monotonic() - t0)
    return StepResult(proc.returncode, False, time.monotonic() - t0)


def _prepare_workspace(config: CampaignConfig, run_dir: Path) -> Path:
    if run_dir.exists():
        shutil.rmtree(run_dir)
    ws = run_dir / "ws"
    ws.mkdir(parents=True)
    for item in config.inputs:
        src = Path(config.base_dir, item)
        dst = ws / Path(item).name
        if src.is_dir():
            shutil.copytree(src, dst)
        else:
            shutil.copy2(src, dst)
    return ws


# -- profiler --------------------------------------------------------------

@dataclass
class Profile:
    count: int
    counts: dict[str, int]
    golden: dict[str, bytes]
    workload_runtime: float
    analysis_runtime: float

    def to_dict(self) -> dict:
        return {"count": self.count, "counts": self.counts,
                "workload_runtime": self.workload_runtime,
                "analysis_runtime": self.analysis_runtime,
                "golden_files": sorted(self.golden)}


def profile(config: CampaignConfig, out_dir: str | os.PathLike) -> Profile:
    """Fault-free run: count target invocations and cache golden outputs."""
    out = Path(out_dir).resolve()
    run_dir = out / "golden" / "run"
    ws = _prepare_workspace(config, run_dir)
    log_path = run_dir / "session.ndjson"
    spec = run_dir / "session.json"
    write_session_spec(spec, ws, log_path)
    w = run_step(config.workload, ws, run_dir, {SESSION_ENV: str(spec)})
    if w.exit_status != 0:
        raise CampaignError(f"golden workload failed (exit {w.exit_status}); see {run_dir}")
    a_runtime = 0.0
    if config.analysis:
        a = run_step(config.analysis, ws, run_dir)
        if a.exit_status != 0:
            raise CampaignError(f"golden analysis failed (exit {a.exit_status}); see {run_dir}")
        a_runtime = a.runtime
    outcome = RunOutcome.collect(0, ws, config.policy)
    missing = [n for n in config.policy.expected_outputs() if n not in outcome.outputs]
    if missing:
        raise CampaignError(f"golden run did not produce {missing}")
    records = SessionLog.read(log_path)
    counts: dict[str, int] = {}
    for r in records:
        counts[r["primitive"]] = counts.get(r["primitive"], 0) + 1
    count = counts.get(config.signature.primitive, 0)
    if count < 1:
        raise CampaignError(f"target primitive never invoked: {config.signature.primitive}")
    prof = Profile(count, counts, outcome.outputs, w.runtime, a_runtime)
    gdir = out / "golden" / "outputs"
    gdir.mkdir(parents=True, exist_ok=True)
    for name, blob in prof.golden.items():
        (gdir / name).write_bytes(blob)
    (out / "golden" / "profile.json").write_text(json.dumps(prof.to_dict(), indent=2) + "\n")
    if not config.keep_workspaces:
        shutil.rmtree(run_dir)
    return prof


def load_profile(out_dir: str | os.PathLike) -> Profile | None:
    base = Path(out_dir) / "golden"
    p = base / "profile.json"
    if not p.exists():
        return None
    doc = json.loads(p.read_text())
    golden = {n: (base / "outputs" / n).read_bytes() for n in doc["golden_files"]}
    return Profile(doc["count"], doc["counts"], golden, doc["workload_runtime"],
                   doc["analysis_runtime"])


# -- injector --------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: int
    target_index: int
    signature: dict
    outcome: OutcomeClass | None
    exit_status: int | None = None
    timed_out: bool = False
    fired: bool = True
    resamples: int = 0
    fault: dict | None = None
    observations: dict = field(default_factory=dict)
    artifacts: str | None = None

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "target_index": self.target_index,
                "signature": self.signature,
                "class": self.outcome.value if self.outcome else None,
                "exit_status": self.exit_status, "timed_out": self.timed_out,
                "fired": self.fired, "resamples": self.resamples, "fault": self.fault,
                "observations": self.observations, "artifacts": self.artifacts}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        cls_ = OutcomeClass(d["class"]) if d.get("class") else None
        return cls(d["run_id"], d["target_index"], d["signature"], cls_, d.get("exit_status"),
                   d.get("timed_out", False), d.get("fired", True), d.get("resamples", 0),
                   d.get("fault"), d.get("observations", {}), d.get("artifacts"))


def _timeout(config: CampaignConfig, runtime: float) -> float:
    return max(config.policy.timeout_factor * runtime, config.timeout_floor)


def run_one(config: CampaignConfig, signature: FaultSignature, index: int, prof: Profile,
            run_dir: str | os.PathLike, run_id: int = 0) -> RunRecord:
    """Fresh workspace, armed session, workload, analysis, classification."""
    run_dir = Path(run_dir).resolve()
    ws = _prepare_workspace(config, run_dir)
    log_path = run_dir / "session.ndjson"
    spec = run_dir / "session.json"
    write_session_spec(spec, ws, log_path, signature, index)
    w = run_step(config.workload, ws, run_dir, {SESSION_ENV: str(spec)},
                 _timeout(config, prof.workload_runtime))
    injected = [r for r in SessionLog.read(log_path) if r.get("injected")]
    rec = RunRecord(run_id, index, signature.to_dict(), None, w.exit_status, w.timed_out,
                    artifacts=str(run_dir))
    if len(injected) > 1:
        raise CampaignError(f"run {run_id}: {len(injected)} injections in one session")
    if not injected:
        rec.fired = False
        return rec
    rec.fault = {"args": injected[0]["args"], **(injected[0].get("fault") or {})}
    status, timed_out = w.exit_status, w.timed_out
    if status == 0 and not timed_out and config.analysis:
        a = run_step(config.analysis, ws, run_dir, timeout=_timeout(config, prof.analysis_runtime))
        status, timed_out = a.exit_status, a.timed_out
    outcome = RunOutcome.collect(status, ws, config.policy, timed_out)
    rec.exit_status, rec.timed_out = status, timed_out
    rec.outcome = classify_run(outcome, prof.golden, config.policy)
    for name in config.record_json:
        p = ws / name
        try:
            rec.observations[name] = json.loads(p.read_text())
        except (OSError, ValueError):
            rec.observations[name] = None
    return rec


# -- statistics ------------------------------------------------------------

def confidence_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    z = NormalDist().inv_cdf(0.5 + level / 2)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return min(lo, p), max(hi, p)


@dataclass
class CampaignResult:
    n_runs: int
    counts: dict[OutcomeClass, int]
    records: list[RunRecord]
    no_fire: int = 0
    level: float = 0.95

    @classmethod
    def from_records(cls, records: list[RunRecord], no_fire: int = 0) -> "CampaignResult":
        done = sorted((r for r in records if r.outcome is not None), key=lambda r: r.run_id)
        counts = {c: 0 for c in OUTCOME_ORDER}
        for r in done:
            counts[r.outcome] += 1
        return cls(len(done), counts, done, no_fire)

    def rate(self, cls: OutcomeClass) -> float:
        return self.counts[cls] / self.n_runs if self.n_runs else 0.0

    def interval(self, cls: OutcomeClass) -> tuple[float, float]:
        return confidence_interval(self.counts[cls], self.n_runs, self.level)

    def rows(self) -> list[dict]:
        out = []
        for c in OUTCOME_ORDER:
            lo, hi = self.interval(c)
            out.append({"class": c.value, "count": self.counts[c], "rate": self.rate(c),
                        "ci_lo": lo, "ci_hi": hi})
        return out

    def to_dict(self) -> dict:
        return {"n_runs": self.n_runs, "level": self.level, "no_fire": self.no_fire,
                "classes": self.rows()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["class", "count", "rate", "ci_lo", "ci_hi"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        (out / "result.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        (out / "result.csv").write_text(self.to_csv())


def read_records(path: str | os.PathLike) -> list[RunRecord]:
    """Finished run records; a torn trailing line is ignored."""
    return [RunRecord.from_dict(d) for d in SessionLog.read(path)]


def run_campaign(config: CampaignConfig, out_dir: str | os.PathLike,
                 resume: bool = False, progress=None) -> CampaignResult:
    """Run (or finish) a campaign; ``progress(done, total)`` is called per run."""
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / "runs.ndjson"
    cfg_path = out / "config.json"
    if resume and cfg_path.exists():
        previous = json.loads(cfg_path.read_text())
        if previous != config.to_dict():
            raise ConfigError(f"--resume with a config that differs from {cfg_path}")
    done: dict[int, RunRecord] = {}
    if resume:
        done = {r.run_id: r for r in read_records(runs_path) if r.outcome is not None}
    else:
        for stale in (runs_path, out / "result.json", out / "result.csv"):
            stale.unlink(missing_ok=True)
        shutil.rmtree(out / "runs", ignore_errors=True)
        shutil.rmtree(out / "golden", ignore_errors=True)
    cfg_path.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    prof = (load_profile(out) if resume else None) or profile(config, out)

    lock = threading.Lock()
    no_fire = sum(r.resamples for r in done.values())
    budget = MAX_NO_FIRE_FRACTION * config.n_runs
    todo = [i for i in range(config.n_runs) if i not in done]

    def one(run_id: int) -> RunRecord:
        nonlocal no_fire
        sig = generate_signature(config, run_id)
        rng = target_rng(sig)
        run_dir = out / "runs" / f"{run_id:06d}"
        for attempt in range(MAX_RESAMPLES + 1):
            rec = run_one(config, sig, pick_target(prof.count, rng), prof, run_dir, run_id)
            if rec.fired:
                break
            with lock:
                no_fire += 1
                if no_fire > budget:
                    raise CampaignError(
                        f"{no_fire} runs never reached their target invocation "
                        f"(profiled count {prof.count}); the workload's I/O is not deterministic")
        else:
            raise CampaignError(f"run {run_id}: injection did not fire after "
                                f"{MAX_RESAMPLES} resamples")
        rec.resamples = attempt
        if not config.keep_workspaces:
            shutil.rmtree(run_dir, ignore_errors=True)
            rec.artifacts = None
        with lock:
            with open(runs_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict()) + "\n")
            done[run_id] = rec
            if progress:
                progress(len(done), config.n_runs)
        return rec

    if config.parallelism > 1:
        with ThreadPoolExecutor(config.parallelism) as pool:
            list(pool.map(one, todo))
    else:
        for run_id in todo:
            one(run_id)
    result = CampaignResult.from_records(list(done.values()), no_fire)
    result.write(out)
    return result


def default_workdir() -> Path:
    return Path(os.environ.get(WORKDIR_ENV) or Path.cwd() / "faultfs-work")


__all__ = ["CampaignConfig", "CampaignResult", "Profile", "RunRecord", "confidence_interval",
           "generate_signature", "pick_target", "profile", "run_campaign", "run_one",
           "toy_config", "validate_config"]
