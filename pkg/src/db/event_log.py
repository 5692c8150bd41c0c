"""
Line-oriented event log for BPS and RHMC skeletons.

Format (LF line endings, '.' decimal separator, 17 significant digits):

    # d=<d> lambda_ref=<..> alpha=<..> horizon=<..> events=<n> seed=<..> stream=<..> process=<bps|rhmc> [flow=<kind>]
    <t0> Start x[0..d) v[0..d)
    <time> <Bounce|Refresh> x[0..d) v[0..d)
    ...

The Start record holds the initial state and is not an event: a run of n
events has n + 1 records, and `events` in the header counts only the n.
"""

from pathlib import Path
from typing import Dict, Optional, TextIO, Tuple, Union

import numpy as np

from src.core.errors import DomainError
from src.core.phase_space import PhasePoint
from src.services.bps_service import Dynamics, EventKind, PathSkeleton

PathLike = Union[str, Path]


def fmt(value: float) -> str:
    return "%.17g" % value


def _record(time: float, kind: str, x: np.ndarray, v: np.ndarray) -> str:
    return " ".join([fmt(time), kind, *map(fmt, x), *map(fmt, v)])


def header_fields(path: PathSkeleton, seed: int, stream: int) -> Dict[str, str]:
    fields = {
        "d": str(path.dimension),
        "lambda_ref": fmt(float(path.meta.get("lambda_ref", 0.0))),
        "alpha": fmt(float(path.meta.get("alpha", 0.0))),
        "horizon": fmt(path.horizon),
        "events": str(path.n_events),
        "seed": str(seed),
        "stream": str(stream),
        "process": str(path.meta.get("process", "bps")),
    }
    if "flow" in path.meta:
        fields["flow"] = str(path.meta["flow"])
    return fields


def write_event_log(out: Union[PathLike, TextIO], path: PathSkeleton, seed: int, stream: int = 0) -> None:
    """Serialise a skeleton; writing the same skeleton twice gives byte-identical files."""
    lines = ["# " + " ".join(f"{k}={v}" for k, v in header_fields(path, seed, stream).items())]
    lines.append(_record(path.t0, "Start", path.z0.x, path.z0.v))
    for t, kind, x, v in zip(path.times, path.kinds, path.xs, path.vs):
        lines.append(_record(float(t), kind.value, x, v))
    text = "\n".join(lines) + "\n"
    if isinstance(out, (str, Path)):
        with open(out, "w", encoding="ascii", newline="\n") as handle:
            handle.write(text)
    else:
        out.write(text)


def read_event_log(source: PathLike, propagator=None) -> Tuple[PathSkeleton, Dict[str, str]]:
    """
    Parse an event log back into a skeleton and its header fields.

    HamiltonianFlow skeletons need the `propagator` of the original potential
    to be evaluable between events.
    """
    with open(source, "r", encoding="ascii") as handle:
        lines = handle.read().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise DomainError("event log", str(source), "a '# key=value' header line")
    header = dict(item.split("=", 1) for item in lines[0][2:].split())
    d = int(header["d"])
    start = lines[1].split()
    if start[1] != "Start" or len(start) != 2 + 2 * d:
        raise DomainError("event log", str(source), f"a Start record with {2 * d} coordinates")
    z0 = PhasePoint(np.array(start[2:2 + d], dtype=float), np.array(start[2 + d:], dtype=float))
    times, kinds, xs, vs = [], [], [], []
    for line in lines[2:]:
        parts = line.split()
        if len(parts) != 2 + 2 * d:
            raise DomainError("event record", line[:40], f"{2 + 2 * d} fields")
        times.append(float(parts[0]))
        kinds.append(EventKind(parts[1]))
        xs.append(np.array(parts[2:2 + d], dtype=float))
        vs.append(np.array(parts[2 + d:], dtype=float))
    if "events" in header and int(header["events"]) != len(times):
        raise DomainError("event log", str(source), f"{header['events']} event records after Start, found {len(times)}")
    meta: Dict[str, object] = {
        "process": header.get("process", "bps"),
        "lambda_ref": float(header["lambda_ref"]),
        "alpha": float(header["alpha"]),
    }
    if "flow" in header:
        meta["flow"] = header["flow"]
    skeleton = PathSkeleton(
        t0=float(start[0]),
        z0=z0,
        times=np.array(times, dtype=float),
        kinds=tuple(kinds),
        xs=np.array(xs, dtype=float).reshape(-1, d),
        vs=np.array(vs, dtype=float).reshape(-1, d),
        dynamics=Dynamics.HAMILTONIAN_FLOW if meta["process"] == "rhmc" else Dynamics.LINEAR,
        horizon=float(header["horizon"]),
        propagator=propagator,
        meta=meta,
    )
    return skeleton, header


def skeletons_equal(first: PathSkeleton, second: PathSkeleton) -> bool:
    return (
        first.t0 == second.t0
        and first.z0 == second.z0
        and first.kinds == second.kinds
        and first.dynamics is second.dynamics
        and first.horizon == second.horizon
        and np.array_equal(first.times, second.times)
        and np.array_equal(first.xs, second.xs)
        and np.array_equal(first.vs, second.vs)
    )
