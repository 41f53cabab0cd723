"""Relation-disentangled dialog graphs.

Two graph families drive the model:

* the speaker-aware temporal graph (SATG): one node per utterance, complete
  directed graph, each edge filed under exactly one (source speaker, target
  speaker, temporal order) relation;
* the dual-task reasoning temporal graph (DRTG): a sentiment node and an act
  node per utterance, each edge filed under one of twelve (source task,
  target task, before/equal/after) relations.

Both decompose the complete digraph (minus self-pairs) into per-relation
boolean adjacency views; self-influence is carried by the layers' separate
self-transformation term, never by an edge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TASK_SENTIMENT = "sentiment"
TASK_ACT = "act"

POS_AFTER = "after"
POS_NOT_AFTER = "not_after"
POS_BEFORE = "before"
POS_EQUAL = "equal"

_DRTG_ORDER = {POS_BEFORE: 1, POS_EQUAL: 2, POS_AFTER: 3}
_DRTG_TASK = {"S": 0, "A": 1, TASK_SENTIMENT: 0, TASK_ACT: 1}


@dataclass(frozen=True)
class RelationalGraph:
    """Node set plus one boolean adjacency view per relation.

    ``adjacency[r - 1][i][j]`` is true iff there is an edge i -> j under
    relation id ``r`` (ids are 1-based, matching the relation tables).
    Every ordered pair of distinct nodes lies in exactly one view.
    """

    num_nodes: int
    num_relations: int
    adjacency: np.ndarray          # bool, (num_relations, N, N)
    node_position: np.ndarray      # int, (N,): 0-based utterance index
    node_task: tuple[str, ...]     # per node: sentiment | act | none

    def view(self, relation_id: int) -> np.ndarray:
        """Adjacency matrix of one relation (edge source = row)."""
        return self.adjacency[relation_id - 1]

    def in_mask(self, relation_id: int) -> np.ndarray:
        """Row i true at column j iff j is an in-neighbor of i under the relation."""
        return self.adjacency[relation_id - 1].T


def relation_id_satg(speaker_i: int, speaker_j: int, pos_cmp: str,
                     num_speakers: int) -> int:
    """Relation id of a SATG edge i -> j, in [1 .. 2 * num_speakers**2].

    Edges are keyed by (speaker of the source, speaker of the target, whether
    the source comes after the target in the dialog); "not_after" covers both
    earlier and equal positions.  For two speakers the ids land on the
    standard 8-column layout: (1,1,after)=1, (1,1,not_after)=2, ...,
    (2,2,not_after)=8.
    """
    if not 1 <= speaker_i <= num_speakers:
        raise ValueError(f"speaker id {speaker_i} out of range [1..{num_speakers}]")
    if not 1 <= speaker_j <= num_speakers:
        raise ValueError(f"speaker id {speaker_j} out of range [1..{num_speakers}]")
    if pos_cmp not in (POS_AFTER, POS_NOT_AFTER):
        raise ValueError(f"unknown SATG position comparison {pos_cmp!r}")
    base = (speaker_i - 1) * 2 * num_speakers + (speaker_j - 1) * 2
    return base + (1 if pos_cmp == POS_AFTER else 2)


def relation_id_drtg(task_i: str, task_j: str, pos_cmp: str) -> int:
    """Relation id of a DRTG edge i -> j, in [1..12].

    Keyed by (source task, target task, source position vs target position):
    (S,S,before)=1 through (A,A,after)=12, position cycling fastest.
    """
    if pos_cmp not in _DRTG_ORDER:
        raise ValueError(f"unknown DRTG position comparison {pos_cmp!r}")
    return _DRTG_TASK[task_i] * 6 + _DRTG_TASK[task_j] * 3 + _DRTG_ORDER[pos_cmp]


def satg_relation_name(relation_id: int, num_speakers: int) -> str:
    r = relation_id - 1
    spk_i = r // (2 * num_speakers) + 1
    spk_j = (r % (2 * num_speakers)) // 2 + 1
    cmp_name = POS_AFTER if r % 2 == 0 else POS_NOT_AFTER
    return f"spk{spk_i}->spk{spk_j}:{cmp_name}"


DRTG_RELATION_NAMES = tuple(
    f"{src}->{dst}:{cmp_name}"
    for src in (TASK_SENTIMENT, TASK_ACT)
    for dst in (TASK_SENTIMENT, TASK_ACT)
    for cmp_name in (POS_BEFORE, POS_EQUAL, POS_AFTER)
)


def build_satg(speakers: list[int], num_speakers: int | None = None) -> RelationalGraph:
    """Speaker-aware temporal graph over one dialog.

    One node per utterance; every ordered pair of distinct utterances becomes
    an edge in exactly one relation view.  Speaker ids are 1-based; the
    relation space is sized for ``num_speakers`` (defaults to the max id seen)
    so dialogs from one corpus share a relation vocabulary.
    """
    n = len(speakers)
    if n == 0:
        raise ValueError("cannot build a graph for an empty dialog")
    s = max(speakers) if num_speakers is None else num_speakers
    num_relations = 2 * s * s
    adjacency = np.zeros((num_relations, n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            cmp_name = POS_AFTER if i > j else POS_NOT_AFTER
            r = relation_id_satg(speakers[i], speakers[j], cmp_name, s)
            adjacency[r - 1, i, j] = True
    return RelationalGraph(
        num_nodes=n,
        num_relations=num_relations,
        adjacency=adjacency,
        node_position=np.arange(n),
        node_task=("none",) * n,
    )


def build_drtg(num_utterances: int) -> RelationalGraph:
    """Dual-task reasoning temporal graph for a dialog of N utterances.

    Nodes 0..N-1 are the sentiment nodes of utterances 1..N, nodes N..2N-1
    the act nodes; the two nodes of one utterance share its position.  The
    cross-task pair at one utterance gets the dedicated "equal" relations.
    """
    n = num_utterances
    if n == 0:
        raise ValueError("cannot build a graph for an empty dialog")
    total = 2 * n
    tasks = (TASK_SENTIMENT,) * n + (TASK_ACT,) * n
    positions = np.concatenate([np.arange(n), np.arange(n)])
    adjacency = np.zeros((12, total, total), dtype=bool)
    for i in range(total):
        for j in range(total):
            if i == j:
                continue
            if positions[i] < positions[j]:
                cmp_name = POS_BEFORE
            elif positions[i] > positions[j]:
                cmp_name = POS_AFTER
            else:
                cmp_name = POS_EQUAL
            r = relation_id_drtg(tasks[i], tasks[j], cmp_name)
            adjacency[r - 1, i, j] = True
    return RelationalGraph(
        num_nodes=total,
        num_relations=12,
        adjacency=adjacency,
        node_position=positions,
        node_task=tasks,
    )


def neighbor_count(graph: RelationalGraph, relation_id: int, node: int) -> int:
    """Number of in-neighbors of ``node`` under one relation."""
    return int(graph.adjacency[relation_id - 1, :, node].sum())
