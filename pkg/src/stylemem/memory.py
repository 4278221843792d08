"""Class-partitioned key-values memory.

A bank holds N items; each item is a key row plus one value row per domain,
all unit-normalized. The layout reserves a contiguous block of items per
object class. Training reads and updates address only the block of the
querying cluster's class; test-time reads address all N items.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyClusterError, LayoutError, ShapeError, ValidationError
from .numerics import EPS_DIV, cosine_matrix, l2_normalize_rows, softmax_cols, softmax_rows
from .serialize import matrix_text

BANK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayoutEntry:
    class_id: int
    offset: int
    count: int


@dataclass(frozen=True)
class MemoryLayout:
    """Contiguous, non-overlapping per-class partitions covering [0, N)."""

    entries: tuple[LayoutEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise LayoutError("layout needs at least one partition")
        expected_offset = 0
        seen: set[int] = set()
        for e in self.entries:
            if e.count < 1:
                raise LayoutError(f"class {e.class_id} has count {e.count}, need >= 1")
            if e.offset != expected_offset:
                raise LayoutError(f"class {e.class_id} offset {e.offset} breaks contiguity")
            if e.class_id in seen:
                raise LayoutError(f"duplicate class id {e.class_id}")
            seen.add(e.class_id)
            expected_offset += e.count

    @classmethod
    def from_counts(cls, counts) -> "MemoryLayout":
        """Build a layout from ordered (class_id, count) pairs."""
        entries = []
        offset = 0
        for class_id, count in counts:
            entries.append(LayoutEntry(int(class_id), offset, int(count)))
            offset += int(count)
        return cls(tuple(entries))

    @property
    def n_items(self) -> int:
        last = self.entries[-1]
        return last.offset + last.count

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries)

    def span(self, class_id: int) -> tuple[int, int]:
        """(offset, count) of a class's partition; unknown ids raise."""
        for e in self.entries:
            if e.class_id == class_id:
                return e.offset, e.count
        raise LayoutError(f"class {class_id} not in layout (have {list(self.class_ids)})")

    def contains(self, class_id: int) -> bool:
        return any(e.class_id == class_id for e in self.entries)


@dataclass
class MemoryBank:
    """Keys plus per-domain value planes, one row per item, all N x C."""

    keys: np.ndarray
    values_x: np.ndarray
    values_y: np.ndarray
    layout: MemoryLayout

    @property
    def n_items(self) -> int:
        return self.keys.shape[0]

    @property
    def channels(self) -> int:
        return self.keys.shape[1]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.keys.copy(), self.values_x.copy(), self.values_y.copy(), self.layout)


@dataclass
class ClassCluster:
    """The content/style feature rows of one class, with scene positions."""

    class_id: int
    content: np.ndarray
    style: np.ndarray
    positions: np.ndarray

    @property
    def size(self) -> int:
        return self.content.shape[0]


@dataclass
class ReadResult:
    """Row-stochastic read weights (full item width) and the style mixture."""

    weights: np.ndarray
    aggregated_style: np.ndarray


def _check_domain(domain: str) -> None:
    if domain not in ("x", "y"):
        raise ValueError(f"domain must be 'x' or 'y', got {domain!r}")


def _cross_values(bank: MemoryBank, domain: str) -> np.ndarray:
    # queries from one domain aggregate the opposite domain's values
    return bank.values_y if domain == "x" else bank.values_x


def init_bank(layout: MemoryLayout, channels: int, rng: np.random.Generator) -> MemoryBank:
    """Fresh bank with i.i.d. standard-normal rows, unit-normalized.

    Draw order is keys, values_x, values_y, so a given generator state always
    produces the same bank.
    """
    if channels < 1:
        raise ShapeError(f"channels must be >= 1, got {channels}")
    n = layout.n_items
    keys = l2_normalize_rows(rng.standard_normal((n, channels)))
    values_x = l2_normalize_rows(rng.standard_normal((n, channels)))
    values_y = l2_normalize_rows(rng.standard_normal((n, channels)))
    return MemoryBank(keys, values_x, values_y, layout)


def _check_cluster(bank: MemoryBank, cluster: ClassCluster) -> tuple[int, int]:
    if not bank.layout.contains(cluster.class_id):
        raise LayoutError(f"class {cluster.class_id} not in bank layout")
    if cluster.size == 0:
        raise EmptyClusterError(f"class {cluster.class_id} cluster is empty")
    if cluster.content.ndim != 2 or cluster.content.shape[1] != bank.channels:
        raise ShapeError(
            f"cluster content shape {cluster.content.shape} incompatible with C={bank.channels}"
        )
    if cluster.style.shape != cluster.content.shape:
        raise ShapeError(
            f"cluster style shape {cluster.style.shape} != content shape {cluster.content.shape}"
        )
    if cluster.positions.shape != (cluster.size,):
        raise ShapeError(
            f"cluster positions shape {cluster.positions.shape}, expected {(cluster.size,)}"
        )
    return bank.layout.span(cluster.class_id)


def read(bank: MemoryBank, cluster: ClassCluster, domain: str) -> ReadResult:
    """Class-restricted read.

    Each query row gets a softmax over the cosine similarities to its class's
    keys only; weights outside the partition are exactly zero. The aggregated
    style row is the weight-mixed cross-domain value.
    """
    _check_domain(domain)
    offset, count = _check_cluster(bank, cluster)
    sims = cosine_matrix(cluster.content, bank.keys[offset : offset + count])
    alpha = softmax_rows(sims)
    weights = np.zeros((cluster.size, bank.n_items))
    weights[:, offset : offset + count] = alpha
    aggregated = alpha @ _cross_values(bank, domain)[offset : offset + count]
    return ReadResult(weights, aggregated)


def read_global(bank: MemoryBank, queries: np.ndarray, domain: str) -> ReadResult:
    """Test-time read: softmax over all N items, no class information."""
    _check_domain(domain)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[0] == 0 or queries.shape[1] != bank.channels:
        raise ShapeError(f"queries shape {queries.shape} incompatible with C={bank.channels}")
    alpha = softmax_rows(cosine_matrix(queries, bank.keys))
    return ReadResult(alpha, alpha @ _cross_values(bank, domain))


def read_backward(
    bank: MemoryBank, cluster: ClassCluster, domain: str, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of a class-restricted read with respect to its queries.

    ``upstream`` is d(loss)/d(aggregated_style), shape (P_k, C). Keys and
    values are constants (they evolve through :func:`update`, not gradient
    descent), so only the query gradient is produced. The path is value
    aggregation -> softmax -> cosine similarity; the [-1, 1] clamp on the
    similarity is treated as inactive.
    """
    _check_domain(domain)
    offset, count = _check_cluster(bank, cluster)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cluster.size, bank.channels):
        raise ShapeError(
            f"upstream shape {upstream.shape}, expected {(cluster.size, bank.channels)}"
        )

    queries = cluster.content
    keys = bank.keys[offset : offset + count]
    values = _cross_values(bank, domain)[offset : offset + count]

    q_norms = np.linalg.norm(queries, axis=1)
    k_norms = np.linalg.norm(keys, axis=1)
    denom = np.outer(q_norms, k_norms) + EPS_DIV
    sims = queries @ keys.T / denom
    alpha = softmax_rows(np.clip(sims, -1.0, 1.0))

    # d loss / d alpha, then through the softmax jacobian
    g_alpha = upstream @ values.T
    g_sims = alpha * (g_alpha - np.sum(alpha * g_alpha, axis=1, keepdims=True))

    # d sims / d query: k / w  -  sims * ||k|| * q / (w * ||q||)
    term_keys = (g_sims / denom) @ keys
    coeff = np.sum(g_sims * sims * k_norms[None, :] / denom, axis=1)
    safe_q = np.maximum(q_norms, EPS_DIV)
    return term_keys - (coeff / safe_q)[:, None] * queries


def update_weights(bank: MemoryBank, cluster: ClassCluster) -> np.ndarray:
    """Assignment weights of queries to their class's items, (P_k, N_k).

    Columns are softmax-normalized over the query dimension, so each item
    distributes one unit of mass across the cluster's queries.
    """
    offset, count = _check_cluster(bank, cluster)
    sims = cosine_matrix(cluster.content, bank.keys[offset : offset + count])
    return softmax_cols(sims)


def update(
    bank: MemoryBank,
    cluster_x: ClassCluster | None,
    cluster_y: ClassCluster | None,
) -> MemoryBank:
    """Fold a class's features from both domains into its memory partition.

    Keys absorb assignment-weighted content from both domains (content is
    shared), while each value plane absorbs only its own domain's style.
    Every touched row is re-normalized to unit length. An empty or missing
    domain contributes nothing; with both domains empty the bank is returned
    unchanged. Items outside the class partition are never touched.
    """
    cx = cluster_x if cluster_x is not None and cluster_x.size > 0 else None
    cy = cluster_y if cluster_y is not None and cluster_y.size > 0 else None
    if cx is None and cy is None:
        return bank.copy()
    if cx is not None and cy is not None and cx.class_id != cy.class_id:
        raise LayoutError(f"cluster class ids differ: {cx.class_id} vs {cy.class_id}")

    offset, count = _check_cluster(bank, cx if cx is not None else cy)
    new = bank.copy()
    keys_part = bank.keys[offset : offset + count]
    key_accum = keys_part.copy()

    for cluster, plane in ((cx, new.values_x), (cy, new.values_y)):
        if cluster is None:
            continue
        beta = softmax_cols(cosine_matrix(cluster.content, keys_part))
        key_accum += beta.T @ cluster.content
        plane[offset : offset + count] = l2_normalize_rows(
            plane[offset : offset + count] + beta.T @ cluster.style
        )

    new.keys[offset : offset + count] = l2_normalize_rows(key_accum)
    return new


# --- persistence ---


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    """Write the bank as a single JSON document, byte-stable across runs."""
    layout_text = ", ".join(
        f'{{"class": {e.class_id}, "count": {e.count}}}' for e in bank.layout.entries
    )
    parts = [
        "{",
        f'  "version": {BANK_FORMAT_VERSION},',
        f'  "channels": {bank.channels},',
        f'  "layout": [{layout_text}],',
        f'  "keys": {matrix_text(bank.keys, "  ")},',
        f'  "values_x": {matrix_text(bank.values_x, "  ")},',
        f'  "values_y": {matrix_text(bank.values_y, "  ")}',
        "}",
        "",
    ]
    Path(path).write_text("\n".join(parts))


def _load_plane(doc: dict, field: str, n: int, channels: int) -> np.ndarray:
    if field not in doc:
        raise ValidationError(f"bank file missing field {field!r}")
    try:
        plane = np.asarray(doc[field], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"field {field!r}: {exc}") from exc
    if plane.ndim != 2 or plane.shape != (n, channels):
        raise ValidationError(
            f"field {field!r} has shape {plane.shape}, expected {(n, channels)}"
        )
    if not np.all(np.isfinite(plane)):
        raise ValidationError(f"field {field!r} contains non-finite values")
    norms = np.linalg.norm(plane, axis=1)
    worst = float(np.abs(norms - 1.0).max())
    if worst > 1e-9:
        raise ValidationError(f"field {field!r} rows deviate from unit norm by {worst:.3e}")
    return plane


def load_bank(path: str | Path) -> MemoryBank:
    """Parse and validate a bank file; the round trip with save is bit-exact."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bank file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("bank file must hold a JSON object")
    if doc.get("version") != BANK_FORMAT_VERSION:
        raise ValidationError(f"unsupported bank version {doc.get('version')!r}")
    channels = doc.get("channels")
    if not isinstance(channels, int) or channels < 1:
        raise ValidationError(f"invalid channels {channels!r}")
    raw_layout = doc.get("layout")
    if not isinstance(raw_layout, list) or not raw_layout:
        raise ValidationError("layout must be a non-empty array")
    try:
        counts = [(int(e["class"]), int(e["count"])) for e in raw_layout]
    except (TypeError, KeyError) as exc:
        raise ValidationError(f"layout entries need 'class' and 'count': {exc}") from exc
    try:
        layout = MemoryLayout.from_counts(counts)
    except LayoutError as exc:
        raise ValidationError(f"layout: {exc}") from exc

    if not isinstance(doc.get("keys"), list) or not doc["keys"]:
        raise ValidationError("keys must be a non-empty array")
    n = len(doc["keys"])
    if layout.n_items != n:
        raise ValidationError(
            f"layout covers {layout.n_items} items but bank stores {n}"
        )
    keys = _load_plane(doc, "keys", n, channels)
    values_x = _load_plane(doc, "values_x", n, channels)
    values_y = _load_plane(doc, "values_y", n, channels)
    return MemoryBank(keys, values_x, values_y, layout)
