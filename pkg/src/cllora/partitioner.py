"""Per-client document shards: IID, length-class label skew, quantity skew.

Label skew keeps shard sizes exactly equal (remainder documents go one each
to the lowest client ids) while per-client class compositions follow
Dirichlet(alpha) draws; quantity skew keeps class compositions near the
global distribution while shard sizes follow a Dirichlet(alpha) draw over
clients. Smaller alpha means more heterogeneity. Every mode produces an
exact disjoint cover of the training ids, bit-reproducible under the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, N_LENGTH_CLASSES
from .numerics import Rng

MODES = ("iid", "label_skew", "quantity_skew")


class PartitionError(ValueError):
    """Partition preconditions violated or assignment infeasible."""


@dataclass(frozen=True)
class PartitionSpec:
    mode: str
    n_clients: int
    alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise PartitionError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_clients < 1:
            raise PartitionError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.mode != "iid" and not (self.alpha is not None and self.alpha > 0):
            raise PartitionError(f"{self.mode} requires alpha > 0, got {self.alpha}")


@dataclass
class ClientShard:
    client_id: int
    doc_ids: list[int]

    @property
    def n_k(self) -> int:
        return len(self.doc_ids)


@dataclass(frozen=True)
class Violation:
    kind: str            # duplicate | missing | foreign | empty_shard
    message: str
    clients: tuple = ()
    docs: tuple = ()


@dataclass
class PartitionReport:
    violations: list[Violation]
    sizes: list[int]
    histograms: np.ndarray | None = None  # K x 5 class counts

    @property
    def ok(self) -> bool:
        return not self.violations


def largest_remainder(fractions: np.ndarray, total: int,
                      caps: np.ndarray | None = None) -> np.ndarray:
    """Round fractions*total to integers summing to total (Hamilton method).

    Remainder units go to the largest fractional parts (ties to the lower
    index). Optional per-entry caps are never exceeded; the caller must
    guarantee sum(caps) >= total.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    raw = fractions * total
    base = np.floor(raw).astype(np.int64)
    if caps is not None:
        base = np.minimum(base, caps)
    deficit = total - int(base.sum())
    if deficit < 0:
        raise PartitionError("largest_remainder: fractions sum above 1")
    frac = raw - base
    order = sorted(range(len(fractions)), key=lambda i: (-frac[i], i))
    counts = base.copy()
    for i in order:
        if deficit == 0:
            break
        if caps is not None and counts[i] >= caps[i]:
            continue
        counts[i] += 1
        deficit -= 1
    if deficit != 0:
        raise PartitionError("largest_remainder: caps too tight for total")
    return counts


def _class_pools(corpus: Corpus, train_ids, rng: Rng) -> list[list[int]]:
    """Training ids grouped by length class, each pool seed-shuffled once."""
    pools: list[list[int]] = [[] for _ in range(N_LENGTH_CLASSES)]
    for doc_id in train_ids:
        pools[corpus.doc(doc_id).length_class].append(doc_id)
    shuffled = []
    for cls, pool in enumerate(pools):
        perm = rng.split(f"pool/{cls}").permutation(len(pool))
        shuffled.append([pool[int(p)] for p in perm])
    return shuffled


def partition_iid(train_ids, n_clients: int, seed: int) -> list[ClientShard]:
    """Global seed-shuffle then round-robin deal; sizes differ by at most 1."""
    train_ids = list(train_ids)
    if len(train_ids) < n_clients:
        raise PartitionError(
            f"cannot deal {len(train_ids)} documents to {n_clients} clients"
        )
    rng = Rng(seed).split("partition/iid")
    perm = rng.permutation(len(train_ids))
    shuffled = [train_ids[int(p)] for p in perm]
    return [
        ClientShard(client_id=k, doc_ids=sorted(shuffled[k::n_clients]))
        for k in range(n_clients)
    ]


def partition_label_skew(corpus: Corpus, train_ids, n_clients: int, alpha: float,
                         seed: int) -> list[ClientShard]:
    """Equal-sized shards with Dirichlet(alpha) length-class compositions.

    Per-client class targets are the largest-remainder rounding of
    size_k * p_k with p_k ~ Dirichlet(alpha * 1_5). Targets are reconciled
    against the true class inventories by moving surplus demand, one unit at
    a time in client-id cycle order, from the over-demanded class to that
    client's largest target class that still has inventory headroom. Shards
    are then filled from seed-shuffled class pools in client-id order.
    """
    train_ids = list(train_ids)
    n = len(train_ids)
    if n < 5 * n_clients:
        raise PartitionError(
            f"label skew needs at least 5 docs per client, got {n} for {n_clients}"
        )
    rng = Rng(seed).split("partition/label_skew")
    pools = _class_pools(corpus, train_ids, rng)
    inventory = np.array([len(p) for p in pools], dtype=np.int64)
    if (inventory == 0).any():
        empty = int(np.argmin(inventory > 0))
        raise PartitionError(
            f"length class {empty} is empty; rebuild the corpus with quantile "
            "length classing before label-skew partitioning"
        )

    base, extra = divmod(n, n_clients)
    sizes = [base + (1 if k < extra else 0) for k in range(n_clients)]
    targets = np.zeros((n_clients, N_LENGTH_CLASSES), dtype=np.int64)
    for k in range(n_clients):
        p_k = rng.split(f"client/{k}/proportions").dirichlet(
            [alpha] * N_LENGTH_CLASSES
        )
        targets[k] = largest_remainder(p_k, sizes[k])

    _reconcile_targets(targets, inventory)

    cursors = [0] * N_LENGTH_CLASSES
    shards = []
    for k in range(n_clients):
        ids: list[int] = []
        for cls in range(N_LENGTH_CLASSES):
            take = int(targets[k, cls])
            ids.extend(pools[cls][cursors[cls]:cursors[cls] + take])
            cursors[cls] += take
        shards.append(ClientShard(client_id=k, doc_ids=sorted(ids)))
    return shards


def _reconcile_targets(targets: np.ndarray, inventory: np.ndarray) -> None:
    """Shift surplus demand to feasible classes, preserving row sums."""
    n_clients = targets.shape[0]
    demand = targets.sum(axis=0)
    guard = int(demand.sum()) * N_LENGTH_CLASSES + 1
    while True:
        over = np.nonzero(demand > inventory)[0]
        if over.size == 0:
            return
        cls = int(over[0])
        surplus = int(demand[cls] - inventory[cls])
        k = 0
        while surplus > 0:
            guard -= 1
            if guard <= 0:
                raise PartitionError("label-skew reconciliation failed to converge")
            if targets[k, cls] > 0:
                headroom = np.nonzero(demand < inventory)[0]
                dest = max(
                    (c for c in headroom if c != cls),
                    key=lambda c: (targets[k, c], -c),
                )
                targets[k, cls] -= 1
                targets[k, dest] += 1
                demand[cls] -= 1
                demand[dest] += 1
                surplus -= 1
            k = (k + 1) % n_clients


def partition_quantity_skew(corpus: Corpus, train_ids, n_clients: int,
                            alpha: float, seed: int) -> list[ClientShard]:
    """Dirichlet(alpha)-sized shards, each length-balanced against the corpus.

    Shard sizes are the largest-remainder rounding of N*q with
    q ~ Dirichlet(alpha * 1_K), clamped to >= 1 (the deficit comes from the
    currently largest shard). Each shard is then stratified across the
    length classes proportionally to the remaining class inventory, so class
    composition tracks the global distribution and the pools end exactly
    empty.
    """
    train_ids = list(train_ids)
    n = len(train_ids)
    if n < 2 * n_clients:
        raise PartitionError(
            f"quantity skew needs at least 2 docs per client, got {n} for {n_clients}"
        )
    rng = Rng(seed).split("partition/quantity_skew")
    q = rng.split("sizes").dirichlet([alpha] * n_clients)
    sizes = largest_remainder(q, n)
    for k in range(n_clients):
        while sizes[k] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[k] += 1

    pools = _class_pools(corpus, train_ids, rng)
    remaining = np.array([len(p) for p in pools], dtype=np.int64)
    cursors = [0] * N_LENGTH_CLASSES
    shards = []
    for k in range(n_clients):
        fractions = remaining / remaining.sum()
        take = largest_remainder(fractions, int(sizes[k]), caps=remaining)
        ids: list[int] = []
        for cls in range(N_LENGTH_CLASSES):
            t = int(take[cls])
            ids.extend(pools[cls][cursors[cls]:cursors[cls] + t])
            cursors[cls] += t
        remaining -= take
        shards.append(ClientShard(client_id=k, doc_ids=sorted(ids)))
    return shards


def partition(corpus: Corpus, train_ids, spec: PartitionSpec) -> list[ClientShard]:
    """Dispatch on spec.mode."""
    if spec.mode == "iid":
        return partition_iid(train_ids, spec.n_clients, spec.seed)
    if spec.mode == "label_skew":
        return partition_label_skew(corpus, train_ids, spec.n_clients,
                                    spec.alpha, spec.seed)
    return partition_quantity_skew(corpus, train_ids, spec.n_clients,
                                   spec.alpha, spec.seed)


def validate(shards: list[ClientShard], train_ids,
             corpus: Corpus | None = None) -> PartitionReport:
    """Check disjointness, exact coverage, and minimum shard size.

    Returns a report with any violations (naming offending clients and
    documents), per-client sizes, and per-client class histograms when a
    corpus is supplied.
    """
    violations: list[Violation] = []
    train_set = set(train_ids)
    seen: dict[int, int] = {}
    for shard in shards:
        if shard.n_k == 0:
            violations.append(Violation(
                kind="empty_shard",
                message=f"client {shard.client_id} has an empty shard",
                clients=(shard.client_id,),
            ))
        for doc_id in shard.doc_ids:
            if doc_id in seen:
                violations.append(Violation(
                    kind="duplicate",
                    message=(f"doc {doc_id} assigned to clients "
                             f"{seen[doc_id]} and {shard.client_id}"),
                    clients=(seen[doc_id], shard.client_id),
                    docs=(doc_id,),
                ))
            else:
                seen[doc_id] = shard.client_id
            if doc_id not in train_set:
                violations.append(Violation(
                    kind="foreign",
                    message=f"doc {doc_id} on client {shard.client_id} "
                            "is not a training document",
                    clients=(shard.client_id,),
                    docs=(doc_id,),
                ))
    missing = sorted(train_set - seen.keys())
    if missing:
        violations.append(Violation(
            kind="missing",
            message=f"{len(missing)} training docs unassigned "
                    f"(first: {missing[:5]})",
            docs=tuple(missing),
        ))
    histograms = None
    if corpus is not None:
        histograms = np.stack([corpus.class_histogram(s.doc_ids) for s in shards])
    return PartitionReport(
        violations=violations,
        sizes=[s.n_k for s in shards],
        histograms=histograms,
    )


def save_shards(shards: list[ClientShard], path, corpus: Corpus | None = None) -> None:
    """Shard file: json-lines of {client_id, doc_ids, class_histogram}."""
    with open(path, "w", encoding="utf-8") as fh:
        for shard in shards:
            hist = (corpus.class_histogram(shard.doc_ids).tolist()
                    if corpus is not None else None)
            fh.write(json.dumps({
                "client_id": shard.client_id,
                "doc_ids": list(shard.doc_ids),
                "class_histogram": hist,
            }) + "\n")


def load_shards(path) -> list[ClientShard]:
    shards = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                shards.append(ClientShard(
                    client_id=int(record["client_id"]),
                    doc_ids=[int(d) for d in record["doc_ids"]],
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise PartitionError(f"bad shard record on line {lineno}: {err}") from None
    if not shards:
        raise PartitionError(f"no shards found in {path}")
    return sorted(shards, key=lambda s: s.client_id)
