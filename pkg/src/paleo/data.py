"""Settlement records in, binned counts out; plus synthetic datasets.

Input schema (CSV with header)::

    site_id,start_year,end_year

Years are integers, BCE negative.  A site occupied in several separate
phases appears once per phase.

A record is counted in a bin when its occupation overlaps the bin by at
least half the bin width, or when the whole occupation falls inside the bin
(short-lived sites).  ``rule="any"`` instead counts every overlapping bin.
Under the default rule a short occupation that straddles a bin edge, with
less than half a bin on either side, lands in no bin; ``bin_occupations``
logs how many records that affects.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, TextIO

import numpy as np

from .dists import SIMULATION_STREAM, RngState
from .errors import ContractError, DataFormatError
from .model import ModelParams, ObservedCounts, TimeGrid, expected_observed

SETTLEMENT_HEADER = ["site_id", "start_year", "end_year"]
COUNTS_HEADER = ["bin_start_year", "bin_end_year", "count"]
PERIOD_HEADER = ["period_label", "start_year", "end_year"]
RULES = ("half", "any")

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SettlementRecord:
    site_id: str
    start_year: int
    end_year: int

    def __post_init__(self):
        if self.end_year < self.start_year:
            raise DataFormatError(
                f"site {self.site_id}: end_year {self.end_year} precedes start_year {self.start_year}",
                site_id=self.site_id,
            )


@dataclass(frozen=True)
class SyntheticTruth:
    params: ModelParams
    seed: int

    def to_dict(self) -> dict:
        return {"seed": self.seed, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTruth":
        return cls(ModelParams.from_dict(d["params"]), int(d["seed"]))


def _parse_int(text: str, line: int, what: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise DataFormatError(f"line {line}: {what} {text!r} is not an integer year", line=line) from None


def _read_rows(stream: TextIO, header: list[str]):
    reader = csv.reader(stream)
    try:
        first = next(reader)
    except StopIteration:
        raise DataFormatError("empty file: missing header", line=1) from None
    if [h.strip() for h in first] != header:
        raise DataFormatError(f"line 1: expected header {','.join(header)}", line=1)
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"line {line}: expected {len(header)} fields, got {len(row)}", line=line)
        yield line, row


def parse_settlements(stream: TextIO) -> list[SettlementRecord]:
    records = []
    for line, (site, start, end) in _read_rows(stream, SETTLEMENT_HEADER):
        site = site.strip()
        if not site:
            raise DataFormatError(f"line {line}: empty site_id", line=line)
        s = _parse_int(start, line, "start_year")
        e = _parse_int(end, line, "end_year")
        if e < s:
            raise DataFormatError(
                f"line {line}: site {site} ends ({e}) before it starts ({s})", line=line, site_id=site
            )
        records.append(SettlementRecord(site, s, e))
    return records


def parse_period_table(stream: TextIO) -> dict[str, tuple[int, int]]:
    table = {}
    for line, (label, start, end) in _read_rows(stream, PERIOD_HEADER):
        s, e = _parse_int(start, line, "start_year"), _parse_int(end, line, "end_year")
        if e < s:
            raise DataFormatError(f"line {line}: period {label!r} ends before it starts", line=line)
        table[label.strip()] = (s, e)
    return table


def default_period_table() -> dict[str, tuple[int, int]]:
    """Approximate conventional chronology for Cyprus, shipped with the package."""
    text = resources.files("paleo.resources").joinpath("cyprus_periods.csv").read_text()
    return parse_period_table(io.StringIO(text))


def records_from_periods(rows: Iterable[tuple[str, str]], table: dict[str, tuple[int, int]]) -> list[SettlementRecord]:
    """Map (site_id, period_label) pairs to dated records."""
    out = []
    for site, label in rows:
        if label not in table:
            raise DataFormatError(f"site {site}: unknown period {label!r}", site_id=site)
        s, e = table[label]
        out.append(SettlementRecord(site, s, e))
    return out


def occupancy_matrix(records: list[SettlementRecord], grid: TimeGrid, rule: str = "half") -> np.ndarray:
    """Boolean (records x bins) membership under the chosen contemporaneity rule."""
    if rule not in RULES:
        raise ContractError(f"rule must be one of {RULES}")
    if not records:
        return np.zeros((0, grid.n_bins), dtype=bool)
    starts = np.array([r.start_year for r in records], dtype=float)[:, None]
    ends = np.array([r.end_year for r in records], dtype=float)[:, None]
    b0, b1 = grid.bin_starts[None, :], grid.bin_ends[None, :]
    overlap = np.minimum(ends, b1) - np.maximum(starts, b0)
    # half-open on the right so a point occupation on an edge lands in one bin
    inside = (starts >= b0) & (starts < b1) & (ends <= b1)
    if rule == "half":
        return (overlap >= 0.5 * grid.bin_width) | inside
    return (overlap > 0) | inside


def bin_occupations(records: list[SettlementRecord], grid: TimeGrid, rule: str = "half") -> ObservedCounts:
    """Occupied-settlement counts per bin; records outside the grid drop out."""
    occ = occupancy_matrix(records, grid, rule)
    if records:
        starts = np.array([r.start_year for r in records])
        ends = np.array([r.end_year for r in records])
        within = (ends > grid.start_year) & (starts < grid.end_year)
        unplaced = int((within & ~occ.any(axis=1)).sum())
        if unplaced:
            log.warning("%d record(s) overlap the grid but meet no bin's membership rule", unplaced)
    return ObservedCounts(occ.sum(axis=0).astype(np.int64))


def simulate_dataset(truth: SyntheticTruth, grid: TimeGrid, rng: RngState | None = None) -> ObservedCounts:
    """Independent Poisson draws at the model's expected counts."""
    p = truth.params
    if p.n_bins != grid.n_bins:
        raise ContractError(f"truth has {p.n_bins} bins, grid has {grid.n_bins}")
    mu = expected_observed(p.populations, p.scaling_factor, p.scaling_exponent, p.loss_rate, grid.elapsed, p.sampling_prob)
    stream = rng if rng is not None else RngState(truth.seed, SIMULATION_STREAM)
    return ObservedCounts(stream.generator().poisson(mu).astype(np.int64))


# --------------------------------------------------------------------------
# counts files


def write_counts_csv(counts: ObservedCounts, grid: TimeGrid, stream: TextIO) -> None:
    if len(counts) != grid.n_bins:
        raise ContractError("counts and grid disagree on bin count")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(COUNTS_HEADER)
    for b0, b1, k in zip(grid.bin_starts, grid.bin_ends, counts.counts):
        w.writerow([int(b0), int(b1), int(k)])


def read_counts_csv(stream: TextIO, observation_year: int = 2022) -> tuple[ObservedCounts, TimeGrid]:
    """Read a counts file and reconstruct its (uniform) grid."""
    starts, ends, counts = [], [], []
    for line, (s, e, k) in _read_rows(stream, COUNTS_HEADER):
        starts.append(_parse_int(s, line, "bin_start_year"))
        ends.append(_parse_int(e, line, "bin_end_year"))
        c = _parse_int(k, line, "count")
        if c < 0:
            raise DataFormatError(f"line {line}: negative count", line=line)
        counts.append(c)
    if not counts:
        raise DataFormatError("counts file has no rows")
    width = ends[0] - starts[0]
    expected = [starts[0] + i * width for i in range(len(starts))]
    if width <= 0 or starts != expected or ends != [s + width for s in expected]:
        raise DataFormatError("counts file bins are not contiguous and uniform")
    grid = TimeGrid(starts[0], ends[-1], width, max(observation_year, ends[-1]))
    return ObservedCounts(np.array(counts, dtype=np.int64)), grid


def write_truth_json(truth: SyntheticTruth, grid: TimeGrid, stream: TextIO, extra: dict | None = None) -> None:
    doc = {"truth": truth.to_dict(), "grid": grid.to_dict()}
    if extra:
        doc.update(extra)
    json.dump(doc, stream, indent=2, sort_keys=True)
    stream.write("\n")
