"""Outcome classes and the policies that assign them to finished runs."""
from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


class OutcomeClass(str, enum.Enum):
    BENIGN = "benign"
    DETECTED = "detected"
    SDC = "sdc"
    CRASH = "crash"


OUTCOME_ORDER = (OutcomeClass.BENIGN, OutcomeClass.DETECTED, OutcomeClass.SDC,
                 OutcomeClass.CRASH)


class PolicyMode(str, enum.Enum):
    BITWISE_ONLY = "BitwiseOnly"
    THRESHOLD_RANGE = "ThresholdRange"


@dataclass(frozen=True)
class StatSource:
    """Where the scalar summary statistic lives: a JSON file and a key in it."""
    file: str
    key: str


@dataclass(frozen=True)
class DetectorRule:
    """Outputs that differ from golden are *detected* when ``file[key] == equals``."""
    file: str
    key: str
    equals: object


@dataclass(frozen=True)
class ClassificationPolicy:
    mode: PolicyMode = PolicyMode.BITWISE_ONLY
    compare: tuple[str, ...] = ()
    required: tuple[str, ...] = ()
    stat: StatSource | None = None
    sdc_range: tuple[float, float] | None = None
    detector: DetectorRule | None = None
    timeout_factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        object.__setattr__(self, "compare", tuple(self.compare))
        object.__setattr__(self, "required", tuple(self.required))
        if self.mode is PolicyMode.THRESHOLD_RANGE:
            if self.stat is None or self.sdc_range is None:
                raise ConfigError("ThresholdRange policy needs stat and sdc_range")
            lo, hi = self.sdc_range
            if not lo <= hi:
                raise ConfigError(f"sdc_range lower bound {lo} above upper bound {hi}")
        if self.timeout_factor <= 0:
            raise ConfigError("timeout_factor must be positive")
        if not self.compare:
            raise ConfigError("policy must compare at least one output")

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationPolicy":
        stat = StatSource(**d["stat"]) if d.get("stat") else None
        det = DetectorRule(**d["detector"]) if d.get("detector") else None
        rng = tuple(d["sdc_range"]) if d.get("sdc_range") is not None else None
        return cls(mode=d.get("mode", "BitwiseOnly"), compare=d.get("compare", ()),
                   required=d.get("required", ()), stat=stat, sdc_range=rng,
                   detector=det, timeout_factor=d.get("timeout_factor", 10.0))

    def to_dict(self) -> dict:
        out = {"mode": self.mode.value, "compare": list(self.compare),
               "required": list(self.required), "timeout_factor": self.timeout_factor}
        if self.stat:
            out["stat"] = {"file": self.stat.file, "key": self.stat.key}
        if self.sdc_range is not None:
            out["sdc_range"] = list(self.sdc_range)
        if self.detector:
            out["detector"] = {"file": self.detector.file, "key": self.detector.key,
                               "equals": self.detector.equals}
        return out

    def expected_outputs(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.required + self.compare))


@dataclass
class RunOutcome:
    exit_status: int | None
    outputs: dict[str, bytes] = field(default_factory=dict)
    timed_out: bool = False
    summary_stat: float | None = None

    @classmethod
    def collect(cls, exit_status: int | None, out_dir: str | os.PathLike,
                policy: ClassificationPolicy, timed_out: bool = False) -> "RunOutcome":
        """Read every output the policy names from ``out_dir``."""
        names = set(policy.expected_outputs())
        for extra in (policy.stat, policy.detector):
            if extra is not None:
                names.add(extra.file)
        outputs = {}
        for name in sorted(names):
            p = Path(out_dir) / name
            if p.is_file():
                outputs[name] = p.read_bytes()
        return cls(exit_status, outputs, timed_out)


def _json_value(blob: bytes | None, key: str):
    if blob is None:
        return None
    try:
        return json.loads(blob)[key]
    except (ValueError, KeyError, TypeError):
        return None


def extract_stat(outcome: RunOutcome, policy: ClassificationPolicy) -> float | None:
    if outcome.summary_stat is not None:
        return outcome.summary_stat
    if policy.stat is None:
        return None
    value = _json_value(outcome.outputs.get(policy.stat.file), policy.stat.key)
    try:
        value = float(value)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def classify_run(outcome: RunOutcome, golden: dict[str, bytes],
                 policy: ClassificationPolicy) -> OutcomeClass:
    """Crash rules first, then bitwise equality, then the policy's mode."""
    if outcome.timed_out or outcome.exit_status != 0:
        return OutcomeClass.CRASH
    if any(name not in outcome.outputs for name in policy.expected_outputs()):
        return OutcomeClass.CRASH
    if all(outcome.outputs[name] == golden.get(name) for name in policy.compare):
        return OutcomeClass.BENIGN
    if policy.mode is PolicyMode.THRESHOLD_RANGE:
        stat = extract_stat(outcome, policy)
        if stat is None:
            return OutcomeClass.CRASH
        lo, hi = policy.sdc_range
        return OutcomeClass.SDC if lo <= stat <= hi else OutcomeClass.DETECTED
    det = policy.detector
    if det is not None:
        if _json_value(outcome.outputs.get(det.file), det.key) == det.equals:
            return OutcomeClass.DETECTED
    return OutcomeClass.SDC
