"""Batch plans: grouping mutually similar source/target segments.

Every sub-batch pairs an equal number of source and target segments with a
segment-level causality mask. Before the first embedding refresh, sub-batches
come from single samples (each target's predecessor is its source); afterward
they are built greedily from kNN neighborhoods of the current embeddings, with
a target's immediate predecessor always forced in as a source when it exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Segment
from .errors import StaleIndexError, UsageError
from .model import causality_mask
from .retrieval import Index


@dataclass
class SubBatch:
    sources: list[Segment]
    targets: list[Segment]   # prediction index of a target is its own seg_index
    mask: np.ndarray          # (n_sources, n_targets) bool; True blocks the pair

    @property
    def null_source(self) -> np.ndarray:
        """Per-target flag: no eligible source at all."""
        return self.mask.all(axis=0)

    @property
    def m(self) -> int:
        return len(self.targets)


@dataclass
class BatchPlan:
    sub_batches: list[SubBatch]
    epoch: int
    seed: int
    kind: str  # "cold" | "knn"

    @property
    def n_targets(self) -> int:
        return sum(sb.m for sb in self.sub_batches)


def _make_subbatch(sources: list[Segment], targets: list[Segment]) -> SubBatch:
    mask = causality_mask([s.ref for s in sources], [t.ref for t in targets])
    return SubBatch(sources=sources, targets=targets, mask=mask)


def cold_start_plan(corpus: Corpus, m: int, seed: int) -> BatchPlan:
    """Same-sample sub-batches for the uninitialized-embedder phase.

    For a sample S0..ST, targets S1..ST are chunked into runs of at most m and
    each run's sources are the targets' immediate predecessors. Single-segment
    samples contribute a lone null-source target (the segment itself is the
    only source slot and the causality rule blocks it).
    """
    if corpus.n_segments == 0:
        raise UsageError("cannot plan over an empty corpus")
    by_sample: dict[int, list[Segment]] = {}
    for seg in corpus.segments:
        by_sample.setdefault(seg.sample_id, []).append(seg)
    subs: list[SubBatch] = []
    for sid in sorted(by_sample):
        segs = sorted(by_sample[sid], key=lambda s: s.seg_index)
        if len(segs) == 1:
            subs.append(_make_subbatch([segs[0]], [segs[0]]))
            continue
        targets = segs[1:]
        for start in range(0, len(targets), m):
            run = targets[start:start + m]
            preds = [segs[t.seg_index - 1] for t in run]
            subs.append(_make_subbatch(preds, run))
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(subs))
    return BatchPlan(sub_batches=[subs[i] for i in order], epoch=0, seed=seed, kind="cold")


def knn_plan(index: Index, corpus: Corpus, m: int, k: int, seed: int,
             epoch: int | None = None) -> BatchPlan:
    """Greedy similarity clustering over the whole corpus.

    Shuffle segments (seeded); repeatedly pop an unused seed segment as a
    target, join its m-1 most similar unused segments as co-targets, and fill
    the source slots from the union of the targets' top-k causality-eligible
    neighbors ranked by score. Each target's same-sample predecessor is
    force-included when it exists. Every segment becomes a target exactly once.
    """
    from .retrieval import knn

    if epoch is not None and index.epoch != epoch:
        raise StaleIndexError(f"index epoch {index.epoch} does not match current epoch {epoch}")
    table = index.table
    if table.refs != corpus.refs():
        raise UsageError("index table rows do not line up with corpus segments")
    segs = corpus.segments
    n = len(segs)
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(n)
    used = np.zeros(n, dtype=bool)
    by_ref = {seg.ref: i for i, seg in enumerate(segs)}
    subs: list[SubBatch] = []

    for seed_row in order:
        if used[seed_row]:
            continue
        group = [int(seed_row)]
        used[seed_row] = True
        if m > 1:
            sims = table.vectors @ table.vectors[seed_row]
            sims[used] = -np.inf
            want = min(m - 1, int((~used).sum()))
            if want > 0:
                top = np.argsort(-sims, kind="stable")[:want]
                for r in top:
                    group.append(int(r))
                    used[r] = True
        targets = [segs[r] for r in group]

        forced: list[int] = []
        for t in targets:
            if t.seg_index >= 1:
                pred = by_ref.get((t.sample_id, t.seg_index - 1))
                if pred is not None and pred not in forced:
                    forced.append(pred)
        pool: dict[int, float] = {}
        for t, row in zip(targets, group):
            def excl(ref, t=t):
                return ref[0] == t.sample_id and ref[1] >= t.seg_index
            for ref, score in knn(index, table.vectors[row], k, exclude=excl).neighbors:
                r = by_ref[ref]
                if r not in pool or score > pool[r]:
                    pool[r] = score
        ranked = [r for r in sorted(pool, key=lambda r: (-pool[r], r)) if r not in forced]

        slots = list(forced[:len(targets)])
        for r in ranked:
            if len(slots) == len(targets):
                break
            slots.append(r)
        if not slots:
            slots = group[:]  # no eligible source anywhere: targets self-mask to null
        base = len(slots)
        while len(slots) < len(targets):
            slots.append(slots[len(slots) % base])  # pad by cycling (pool exhausted)
        subs.append(_make_subbatch([segs[r] for r in slots], targets))

    return BatchPlan(sub_batches=subs, epoch=index.epoch, seed=seed, kind="knn")


@dataclass
class PlanDiagnostics:
    violations: list[str] = field(default_factory=list)
    n_sub_batches: int = 0
    n_targets: int = 0
    null_source_targets: int = 0
    same_sample_frac: float = 0.0
    cross_sample_frac: float = 0.0
    duplicate_source_slots: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_plan(plan: BatchPlan) -> PlanDiagnostics:
    """Check sub-batch invariants; count null-source targets and the
    same-sample vs cross-sample split of unmasked source-target pairs."""
    diag = PlanDiagnostics(n_sub_batches=len(plan.sub_batches))
    same = cross = 0
    for bi, sb in enumerate(plan.sub_batches):
        if len(sb.sources) != len(sb.targets):
            diag.violations.append(f"sub-batch {bi}: parity broken "
                                   f"({len(sb.sources)} sources vs {len(sb.targets)} targets)")
        expected = causality_mask([s.ref for s in sb.sources], [t.ref for t in sb.targets])
        if sb.mask.shape != expected.shape or (sb.mask != expected).any():
            bad = np.argwhere(sb.mask != expected) if sb.mask.shape == expected.shape else []
            for i, j in bad:
                diag.violations.append(
                    f"sub-batch {bi}: mask wrong for source {sb.sources[i].ref} "
                    f"-> target {sb.targets[j].ref} (expected blocked={bool(expected[i, j])})")
            if sb.mask.shape != expected.shape:
                diag.violations.append(f"sub-batch {bi}: mask shape {sb.mask.shape} != {expected.shape}")
        tgt_refs = [t.ref for t in sb.targets]
        if len(set(tgt_refs)) != len(tgt_refs):
            diag.violations.append(f"sub-batch {bi}: duplicate target segment")
        src_refs = [s.ref for s in sb.sources]
        diag.duplicate_source_slots += len(src_refs) - len(set(src_refs))
        diag.n_targets += len(sb.targets)
        diag.null_source_targets += int(sb.null_source.sum())
        unmasked = ~sb.mask
        for i, s in enumerate(sb.sources):
            for j, t in enumerate(sb.targets):
                if unmasked[i, j]:
                    if s.sample_id == t.sample_id:
                        same += 1
                    else:
                        cross += 1
    total = same + cross
    if total:
        diag.same_sample_frac = same / total
        diag.cross_sample_frac = cross / total
    return diag


def format_plan(plan: BatchPlan) -> str:
    """Human-readable plan listing (membership plus mask) for debugging."""
    lines = [f"plan kind={plan.kind} epoch={plan.epoch} seed={plan.seed} "
             f"sub_batches={len(plan.sub_batches)} targets={plan.n_targets}"]
    for bi, sb in enumerate(plan.sub_batches):
        lines.append(f"sub-batch {bi} (m={sb.m})")
        lines.append("  sources: " + " ".join(f"({s.sample_id},{s.seg_index})" for s in sb.sources))
        lines.append("  targets: " + " ".join(f"({t.sample_id},{t.seg_index})" for t in sb.targets))
        for i in range(len(sb.sources)):
            row = "".join("X" if sb.mask[i, j] else "." for j in range(len(sb.targets)))
            lines.append(f"  mask[src {i}] {row}")
        nulls = [j for j, flag in enumerate(sb.null_source) if flag]
        if nulls:
            lines.append(f"  null-source targets: {nulls}")
    return "\n".join(lines)
