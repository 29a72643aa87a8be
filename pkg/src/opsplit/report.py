"""Per-inference report rows, aggregates and CSV output."""
from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from typing import Sequence

from .runtime.sim import CSV_COLUMNS, InferenceRow

CSV_SCHEMA = "# schema opsplit-sim-csv v1"


@dataclass(frozen=True)
class Aggregate:
    mean: float
    sd: float

    @property
    def rel_sd(self) -> float:
        return self.sd / self.mean if self.mean else 0.0


def aggregate(values: Sequence[float]) -> Aggregate:
    if not values:
        raise ValueError("aggregate over no runs")
    values = [float(v) for v in values]
    sd = statistics.pstdev(values) if len(values) > 1 else 0.0
    return Aggregate(statistics.fmean(values), sd)


@dataclass
class Report:
    rows: list[InferenceRow]

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows]

    def summary(self) -> dict[str, Aggregate]:
        keys = ("wall_s", "transmit_s", "transmit_share_pct", "energy_j",
                "local_wall_s", "local_energy_j", "pp_wall_s", "pp_energy_j")
        return {k: aggregate(self.column(k)) for k in keys}

    def table(self) -> str:
        head = ("id", "start_s", "bucket_Mbps", "wall_ms", "tx_ms", "share_%", "energy_J",
                "msgs", "local_ms", "pp_ms")
        lines = [head]
        for r in self.rows:
            lines.append((str(r.inference_id), f"{r.start_s:.3f}", f"{r.bucket_bps / 1e6:.0f}",
                          f"{r.wall_s * 1e3:.3f}", f"{r.transmit_s * 1e3:.3f}",
                          f"{r.transmit_share_pct:.1f}", f"{r.energy_j:.4f}", str(r.messages),
                          f"{r.local_wall_s * 1e3:.3f}", f"{r.pp_wall_s * 1e3:.3f}"))
        widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
        out = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines]
        s = self.summary()
        out.append("")
        out.append(f"runs={len(self.rows)}  wall={_ms(s['wall_s'])}  transmit={_ms(s['transmit_s'])}  "
                   f"share={s['transmit_share_pct'].mean:.1f}%  energy={s['energy_j'].mean:.4f} J")
        out.append(f"baselines: local wall={_ms(s['local_wall_s'])} energy={s['local_energy_j'].mean:.4f} J  "
                   f"pp wall={_ms(s['pp_wall_s'])} energy={s['pp_energy_j'].mean:.4f} J")
        return "\n".join(out)


def _ms(a: Aggregate) -> str:
    return f"{a.mean * 1e3:.3f}±{a.sd * 1e3:.3f} ms"


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(rows: Sequence[InferenceRow]) -> str:
    buf = io.StringIO()
    buf.write(CSV_SCHEMA + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_cell(v) for v in r.values()])
    return buf.getvalue()
