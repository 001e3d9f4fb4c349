"""Rendering of localization results: JSON document, plain text listing, CSV distributions."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .localize import AnomalyReport, AnomalyVerdict, FunctionResult, Reason
from .trace import Channel, Kind

RANKING = "abnormal first, then D + Delta descending"
MAX_STACK_FRAMES = 3

_NUM = {"type": "number"}
REPORT_SCHEMA: dict = {
    "type": "object",
    "required": ["tool", "version", "config", "ranking", "workers", "findings", "distributions"],
    "properties": {
        "tool": {"const": "diffprof"},
        "version": {"type": "string"},
        "config": {"type": "object"},
        "ranking": {"type": "string"},
        "workers": {"type": "integer", "minimum": 0},
        "findings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rank", "function", "beta", "mu", "sigma", "D", "Delta",
                             "reason", "description"],
                "properties": {
                    "rank": {"type": "integer", "minimum": 0},
                    "function": {
                        "type": "object",
                        "required": ["name", "kind", "stack"],
                        "properties": {
                            "name": {"type": "string"},
                            "kind": {"enum": [k.value for k in Kind]},
                            "scope": {"enum": ["intra", "inter", None]},
                            "stack": {"type": "array", "items": {"type": "string"}},
                        },
                    },
                    "beta": {"type": "number", "minimum": 0, "maximum": 1},
                    "mu": {"type": "number", "minimum": 0, "maximum": 1},
                    "sigma": {"type": "number", "minimum": 0, "maximum": 1},
                    "D": {"type": "number", "minimum": 0},
                    "Delta": {"type": "number", "minimum": 0, "maximum": 1},
                    "reason": {"enum": [r.value for r in Reason]},
                    "normalized": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                    "description": {"type": "string"},
                },
            },
        },
        "distributions": {"type": "object"},
        "extra": {"type": "object"},
    },
}

def _r(x: float) -> float:
    return float(f"{float(x):.9g}")


def describe(v: AnomalyVerdict, fr: FunctionResult | None = None) -> str:
    """One-line reading of a finding, based on where it sits relative to its peers."""
    b, m, s = v.pattern.beta, v.pattern.mu, v.pattern.sigma
    if fr is not None and fr.present.any():
        med_b, med_m, _ = np.median(fr.patterns[fr.present], axis=0).tolist()
    else:
        med_b, med_m = b, m
    ch = v.pattern.channel
    kind = v.function.kind
    low_mu = m < 0.8 * med_m
    high_mu = m > 1.2 * med_m
    if kind is Kind.PYTHON and v.D > 0:
        return "Python function holds the critical path beyond its expected share: host-side stall"
    if ch is Channel.NIC:
        if low_mu and s < 0.2 * m:
            return "low mu with low sigma on GPU-NIC channel: candidate slow link"
        if low_mu:
            return "GPU-NIC throughput alternates between idle and capacity: waiting on a slower ring peer"
        if high_mu:
            return "elevated GPU-NIC throughput: traffic rerouted over PCIe, candidate NVLink fault"
        if v.D > 0:
            return "collective occupies more of the window than expected: waiting on slower peers"
    if ch is Channel.NVLINK:
        if m <= 0.01:
            return "no NVLink traffic during the collective: candidate NVLink down"
        if b > 1.2 * med_b:
            return "intra-host collective takes longer than on peers"
    if ch is Channel.SM_FREQ:
        if b > 1.2 * med_b and low_mu:
            return "larger beta and lower SM frequency than peers: candidate GPU throttling"
        if b > 1.2 * med_b:
            return "kernel occupies more of the window than on peers: candidate compute imbalance"
    if kind is Kind.COLLECTIVE and v.D > 0:
        return "collective occupies more of the window than expected: waiting on slower peers"
    if b > 1.2 * med_b:
        return "larger share of the critical path than peers"
    if b < 0.8 * med_b:
        return "smaller share of the critical path than peers"
    return "pattern differs from most peers"


def display_key(f) -> str:
    """Readable unique name of a function: kind[:scope] name [full stack]."""
    scope = f":{f.comm_scope.value}" if f.comm_scope is not None else ""
    stack = f" [{' > '.join(f.call_stack)}]" if f.call_stack else ""
    return f"{f.kind.value}{scope} {f.name}{stack}"


def _function_json(f) -> dict:
    return {"name": f.name, "kind": f.kind.value,
            "scope": f.comm_scope.value if f.comm_scope is not None else None,
            "stack": list(f.call_stack[-MAX_STACK_FRAMES:])}


def finding_json(v: AnomalyVerdict, fr: FunctionResult | None) -> dict:
    return {
        "rank": v.worker,
        "function": _function_json(v.function),
        "beta": _r(v.pattern.beta), "mu": _r(v.pattern.mu), "sigma": _r(v.pattern.sigma),
        "D": _r(v.D), "Delta": _r(v.Delta),
        "reason": v.reason.value if v.reason is not None else None,
        "normalized": [_r(x) for x in v.normalized_pattern],
        "description": describe(v, fr),
    }


def report_document(report: AnomalyReport, config: dict | None = None,
                    extra: dict | None = None) -> dict:
    by_fn = {fr.function: fr for fr in report.results}
    findings = [finding_json(v, by_fn.get(v.function)) for v in report.findings()]
    doc: dict[str, Any] = {
        "tool": "diffprof",
        "version": __version__,
        "config": config or {},
        "ranking": RANKING,
        "workers": report.worker_count,
        "findings": findings,
        "distributions": {display_key(fr.function): fr.distribution() for fr in report.results},
    }
    if extra:
        doc["extra"] = extra
    return doc


def to_json(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def to_text(doc: dict) -> str:
    out = io.StringIO()
    out.write(f"diffprof {doc['version']} | {doc['workers']} workers | "
              f"{len(doc['findings'])} abnormal (function, worker) pairs\n")
    out.write(f"ranking: {doc['ranking']}\n")
    cfg = doc.get("config") or {}
    if cfg:
        out.write("config: " + json.dumps(cfg, sort_keys=True, separators=(",", ":")) + "\n")
    for key, value in sorted((doc.get("extra") or {}).items()):
        out.write(f"{key}: {json.dumps(value, sort_keys=True, separators=(',', ':'))}\n")
    if not doc["findings"]:
        out.write("no abnormal functions\n")
    for i, f in enumerate(doc["findings"], start=1):
        fn = f["function"]
        scope = f":{fn['scope']}" if fn.get("scope") else ""
        stack = " < ".join(reversed(fn["stack"])) if fn["stack"] else "-"
        out.write(f"{i:>4}. rank {f['rank']:<6} {fn['kind']}{scope} {fn['name']}\n")
        out.write(f"      beta={f['beta']:.4f} mu={f['mu']:.4f} sigma={f['sigma']:.4f} "
                  f"D={f['D']:.4f} Delta={f['Delta']:.4f} [{f['reason']}]\n")
        out.write(f"      stack: {stack}\n")
        out.write(f"      {f['description']}\n")
    return out.getvalue()


def distributions_csv(doc: dict) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    stats = ("min", "p05", "median", "p95", "max")
    w.writerow(["function", "workers", "gated", "abnormal", "delta_threshold"]
               + [f"{c}_{s}" for c in ("beta", "mu", "sigma") for s in stats])
    for key in sorted(doc["distributions"]):
        d = doc["distributions"][key]
        w.writerow([key, d["workers"], d["gated"], d["abnormal"], d["delta_threshold"]]
                   + [d[c][s] for c in ("beta", "mu", "sigma") for s in stats])
    return out.getvalue()


def write_report(doc: dict, path: str | Path, fmt: str = "json") -> int:
    text = to_json(doc) if fmt == "json" else to_text(doc)
    data = text.encode("utf-8")
    Path(path).write_bytes(data)
    return len(data)
