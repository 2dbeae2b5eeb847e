"""Dry-spell length distributions and KL divergence between fields."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


def dry_spells(series) -> np.ndarray:
    """Lengths of maximal runs of zero precipitation, in series order.

    Runs cut by either end of the series count at their observed length.
    """
    dry = np.asarray(series) == 0
    if not dry.any():
        return np.zeros(0, dtype=np.int64)
    edges = np.diff(np.concatenate([[0], dry.astype(np.int8), [0]]))
    starts = np.nonzero(edges == 1)[0]
    ends = np.nonzero(edges == -1)[0]
    return (ends - starts).astype(np.int64)


@dataclass(frozen=True, eq=False)
class DrySpellHistogram:
    counts: np.ndarray      # counts[k] = number of spells of length k + 1
    region: str = "all"

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def padded(self, length: int) -> np.ndarray:
        out = np.zeros(length, dtype=float)
        out[: self.counts.size] = self.counts
        return out


def dry_spell_histogram(field, region_mask=None, region: str = "all",
                        max_len: int | None = None) -> DrySpellHistogram:
    """Pool dry-spell lengths from every in-region cell into one histogram."""
    mask = field.domain_mask if region_mask is None else \
        field.domain_mask & np.asarray(region_mask, dtype=bool)
    vals = field.filled()
    lengths = [dry_spells(vals[:, y, x]) for y, x in zip(*np.nonzero(mask))]
    lengths = np.concatenate(lengths) if lengths else np.zeros(0, dtype=np.int64)
    size = max_len if max_len is not None else (int(lengths.max()) if lengths.size else 0)
    counts = np.bincount(lengths, minlength=size + 1)[1: size + 1]
    return DrySpellHistogram(counts.astype(np.int64), region)


def kl_divergence(p, q, epsilon: float = 1e-6) -> float:
    """KL(p || q) in nats between two histograms.

    ``epsilon`` is added to every bin of both histograms (padded to a common
    length) before normalization, so empty bins stay finite.
    """
    pc = p.counts if isinstance(p, DrySpellHistogram) else np.asarray(p, dtype=float)
    qc = q.counts if isinstance(q, DrySpellHistogram) else np.asarray(q, dtype=float)
    n = max(pc.size, qc.size)
    pp = np.zeros(n)
    qq = np.zeros(n)
    pp[: pc.size] = pc
    qq[: qc.size] = qc
    pp = pp + epsilon
    qq = qq + epsilon
    pp /= pp.sum()
    qq /= qq.sum()
    return float(np.sum(pp * np.log(pp / qq)))


@dataclass(frozen=True)
class EvaluationTable:
    """KL divergences of candidate fields to a target, per region.

    The last candidate is the reference: the wide layout appends one column
    per other candidate holding ``KL(other) - KL(reference)``.
    """

    regions: tuple
    candidates: tuple
    kl: dict                # (region, candidate) -> nats
    epsilon: float = 1e-6

    def differences(self, region):
        ref = self.candidates[-1]
        return {f"{c}-{ref}": self.kl[(region, c)] - self.kl[(region, ref)]
                for c in self.candidates[:-1]}

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "candidate", "kl_nats"])
        for r in self.regions:
            for c in self.candidates:
                w.writerow([r, c, repr(self.kl[(r, c)])])
        return buf.getvalue()

    def wide_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ref = self.candidates[-1]
        diff_cols = [f"{c}-{ref}" for c in self.candidates[:-1]]
        w.writerow(["region", *self.candidates, *diff_cols])
        for r in self.regions:
            d = self.differences(r)
            w.writerow([r, *(repr(self.kl[(r, c)]) for c in self.candidates),
                        *(repr(d[k]) for k in diff_cols)])
        return buf.getvalue()


def evaluate_simulation(target, candidates: dict, regions: dict,
                        epsilon: float = 1e-6) -> EvaluationTable:
    """KL(target || candidate) of pooled dry-spell histograms per region.

    ``candidates`` and ``regions`` are ordered mappings name -> field and
    name -> boolean mask. Histograms in one region share their binning.
    Regions without any in-domain cell are skipped with a warning.
    """
    for name, fld in candidates.items():
        if fld.geometry != target.geometry or fld.nt != target.nt:
            raise ValueError(f"candidate {name!r} is not on the target grid")
    kl = {}
    kept = []
    for rname, rmask in regions.items():
        if not (target.domain_mask & np.asarray(rmask, dtype=bool)).any():
            logger.warning("region %s has no cells inside the domain; skipped", rname)
            continue
        hists = {"__target__": dry_spell_histogram(target, rmask, rname)}
        for cname, fld in candidates.items():
            hists[cname] = dry_spell_histogram(fld, rmask, rname)
        size = max(h.counts.size for h in hists.values())
        tgt = hists.pop("__target__").padded(size)
        for cname, h in hists.items():
            kl[(rname, cname)] = kl_divergence(tgt, h.padded(size), epsilon)
        kept.append(rname)
    return EvaluationTable(tuple(kept), tuple(candidates), kl, epsilon)
