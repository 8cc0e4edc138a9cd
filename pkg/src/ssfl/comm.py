"""Byte accounting for model exchange under several sparse encodings.

Values are priced at 4 bytes (fp32) and COO indices at 4 bytes, whatever
precision the simulator computes in.  Accounting is a cost model, not a
serialization of simulator memory.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

SCHEMES = ("dense", "values_only", "coo", "bitmask")
DIRECTIONS = ("uplink", "downlink")
VALUE_BYTES = 4
INDEX_BYTES = 4


def payload_bytes(P: int, density: float | None = None, scheme: str = "values_only", k: int | None = None) -> int:
    """Bytes to send a model with ``P`` parameters of which ``k`` are nonzero.

    ``k`` defaults to ``round(density * P)``.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    if k is None:
        if density is None or not 0.0 < density <= 1.0:
            raise ValueError("need density in (0, 1] or an explicit k")
        k = round(density * P)
    if not 0 <= k <= P:
        raise ValueError(f"k={k} out of range for P={P}")
    if scheme == "dense":
        return VALUE_BYTES * P
    if scheme == "values_only":
        return VALUE_BYTES * k
    if scheme == "coo":
        return (VALUE_BYTES + INDEX_BYTES) * k
    if scheme == "bitmask":
        return VALUE_BYTES * k + math.ceil(P / 8)
    raise ValueError(f"unknown scheme {scheme!r}")


def setup_costs(P: int, K: int) -> tuple[int, int]:
    """One-time ``(saliency upload, mask broadcast)`` totals for ``K`` clients."""
    return K * VALUE_BYTES * P, K * math.ceil(P / 8)


def percent_of_dense(P: int, density: float, scheme: str) -> float:
    """Cost relative to dense, in percent, rounded to 0.1 points."""
    return round(100.0 * payload_bytes(P, density, scheme) / payload_bytes(P, density, "dense"), 1)


@dataclass(frozen=True)
class Entry:
    round: int
    direction: str
    client: int
    scheme: str
    bytes: int


@dataclass
class CommLedger:
    """Append-only record of transfers.

    Each model transfer is priced under every scheme at once.  One-time
    transfers (saliency uploads, mask broadcasts) go to ``setup`` with
    scheme ``"saliency"`` or ``"mask"`` and never enter per-round totals.
    """

    P: int
    entries: list[Entry] = field(default_factory=list)
    setup: list[Entry] = field(default_factory=list)

    def record_model(self, rnd: int, direction: str, client: int, k: int) -> None:
        if direction not in DIRECTIONS:
            raise ValueError(f"bad direction {direction!r}")
        for scheme in SCHEMES:
            self.entries.append(Entry(rnd, direction, client, scheme, payload_bytes(self.P, scheme=scheme, k=k)))

    def record_saliency_upload(self, rnd: int, client: int) -> None:
        self.setup.append(Entry(rnd, "uplink", client, "saliency", VALUE_BYTES * self.P))

    def record_mask_broadcast(self, rnd: int, client: int) -> None:
        self.setup.append(Entry(rnd, "downlink", client, "mask", math.ceil(self.P / 8)))

    def round_totals(self, rnd: int) -> dict[tuple[str, str], int]:
        out = {(d, s): 0 for d in DIRECTIONS for s in SCHEMES}
        for e in self.entries:
            if e.round == rnd:
                out[(e.direction, e.scheme)] += e.bytes
        return out

    def summarize(self) -> dict:
        totals = {d: {s: 0 for s in SCHEMES} for d in DIRECTIONS}
        per_round: dict[int, dict] = defaultdict(lambda: {d: {s: 0 for s in SCHEMES} for d in DIRECTIONS})
        for e in self.entries:
            totals[e.direction][e.scheme] += e.bytes
            per_round[e.round][e.direction][e.scheme] += e.bytes

        cumulative = []
        running = {d: {s: 0 for s in SCHEMES} for d in DIRECTIONS}
        for rnd in sorted(per_round):
            for d in DIRECTIONS:
                for s in SCHEMES:
                    running[d][s] += per_round[rnd][d][s]
            cumulative.append({"round": rnd, **{d: dict(running[d]) for d in DIRECTIONS}})

        both = {s: totals["uplink"][s] + totals["downlink"][s] for s in SCHEMES}
        percent = {s: (round(100.0 * both[s] / both["dense"], 1) if both["dense"] else 0.0) for s in SCHEMES}
        setup = {"saliency": 0, "mask": 0}
        for e in self.setup:
            setup[e.scheme] += e.bytes
        return {
            "totals": totals,
            "total_both_directions": both,
            "percent_of_dense": percent,
            "per_round": {rnd: per_round[rnd] for rnd in sorted(per_round)},
            "cumulative": cumulative,
            "setup": setup,
        }

    def rows(self):
        for e in self.setup + self.entries:
            yield (e.round, e.direction, e.client, e.scheme, e.bytes)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "direction", "client", "scheme", "bytes"])
        w.writerows(self.rows())
        return buf.getvalue()
