"""Per-iteration Γ / κ / χ log, written as CSV."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

TRACE_COLUMNS = (
    "iteration",
    "tensor_id",
    "use_id",
    "phase",
    "gamma",
    "exponent",
    "kappa",
    "phi",
    "chi",
    "overflow",
)


@dataclass(frozen=True)
class TraceRecord:
    """One kernel write (or stats-only init call) for one slot.

    ``kappa``/``exponent`` are the scale the kernel ran at, ``phi = gamma * kappa``
    before any overflow doubling, and ``chi`` is the prediction made from it
    (NaN during initialization).
    """

    iteration: int
    tensor_id: str
    use_id: str
    phase: str
    gamma: int
    exponent: int
    kappa: float
    phi: float
    chi: float
    overflow: bool


assert tuple(f.name for f in fields(TraceRecord)) == TRACE_COLUMNS


class Trace(list):
    """A list of TraceRecords that knows which iteration it is on."""

    iteration = 0

    def record(self, slot, gamma, kappa, exponent, chi, overflow, phase):
        key = slot.key
        tid, uid = (key.tensor_id, key.use_id) if key is not None else ("", "")
        self.append(
            TraceRecord(
                self.iteration, str(tid), str(uid), phase, int(gamma), int(exponent),
                float(kappa), float(gamma) * float(kappa), float(chi), bool(overflow),
            )
        )


def export_trace(trace, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            row = list(astuple(rec))
            row[-1] = int(rec.overflow)
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_trace(path) -> list[TraceRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {reader.fieldnames}")
        for row in reader:
            out.append(
                TraceRecord(
                    int(row["iteration"]), row["tensor_id"], row["use_id"], row["phase"],
                    int(row["gamma"]), int(row["exponent"]), float(row["kappa"]),
                    float(row["phi"]), float(row["chi"]), bool(int(row["overflow"])),
                )
            )
    return out
