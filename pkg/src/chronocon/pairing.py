"""Anchor/positive/negative construction for every contrastive variant.

All builders work on flat per-element arrays (a grouping key and an ordering
value per batch element); the ``*_pairs`` functions taking ``Sample`` lists
are thin adapters. A plan stores its negatives as a boolean mask over the
batch, with the anchor and positive always excluded.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class Direction(enum.IntEnum):
    FORWARD = 0
    BACKWARD = 1
    LABEL = 2
    TIME_DIST = 3
    INSTANCE = 4


@dataclass(frozen=True)
class PairTerm:
    anchor: int
    positive: int
    negatives: tuple
    direction: Direction


@dataclass(frozen=True, eq=False)
class PairingPlan:
    anchors: np.ndarray      # (T,) int
    positives: np.ndarray    # (T,) int
    negatives: np.ndarray    # (T, B) bool
    directions: np.ndarray   # (T,) int, Direction codes

    @property
    def batch_size(self) -> int:
        return self.negatives.shape[1]

    def __len__(self):
        return len(self.anchors)

    def count(self, direction: Direction) -> int:
        return int(np.count_nonzero(self.directions == direction))

    @property
    def n_forward(self) -> int:
        return self.count(Direction.FORWARD)

    @property
    def n_backward(self) -> int:
        return self.count(Direction.BACKWARD)

    @property
    def terms(self) -> list[PairTerm]:
        return [PairTerm(int(a), int(p), tuple(int(n) for n in np.flatnonzero(mask)), Direction(int(d)))
                for a, p, mask, d in zip(self.anchors, self.positives, self.negatives, self.directions)]

    def __eq__(self, other):
        if not isinstance(other, PairingPlan):
            return NotImplemented
        return self.terms == other.terms

    def dump(self) -> str:
        lines = [f"terms={len(self)} forward={self.n_forward} backward={self.n_backward}"]
        for t in self.terms:
            lines.append(f"{t.direction.name:9s} a={t.anchor} p={t.positive} neg={list(t.negatives)}")
        return "\n".join(lines)


def empty_plan(batch_size: int) -> PairingPlan:
    return PairingPlan(np.zeros(0, int), np.zeros(0, int), np.zeros((0, batch_size), bool), np.zeros(0, int))


def _from_cube(cube: np.ndarray, direction: Direction, members=None, batch_size=None) -> PairingPlan:
    """Turn an (a, p, n) membership cube into a plan, dropping trivial pairs.

    ``members`` maps cube positions back to batch indices when the cube only
    covers a block of the batch.
    """
    m = cube.shape[0]
    idx = np.arange(m)
    cube = cube.copy()
    cube[idx, :, idx] = False  # n != a
    cube[:, idx, idx] = False  # n != p
    cube[idx, idx, :] = False  # a != p
    a, p = np.nonzero(cube.any(axis=2))
    if members is None:
        return PairingPlan(a, p, cube[a, p], np.full(len(a), int(direction)))
    neg = np.zeros((len(a), batch_size), bool)
    neg[:, members] = cube[a, p]
    return PairingPlan(members[a], members[p], neg, np.full(len(a), int(direction)))


def _sorted(plan: PairingPlan, batch_size: int) -> PairingPlan:
    if not len(plan):
        return empty_plan(batch_size)
    order = np.lexsort((plan.positives, plan.anchors, plan.directions))
    return PairingPlan(plan.anchors[order], plan.positives[order], plan.negatives[order],
                       plan.directions[order])


def concat_plans(*plans: PairingPlan) -> PairingPlan:
    plans = [p for p in plans if len(p)]
    if not plans:
        return empty_plan(0)
    return PairingPlan(np.concatenate([p.anchors for p in plans]),
                       np.concatenate([p.positives for p in plans]),
                       np.concatenate([p.negatives for p in plans]),
                       np.concatenate([p.directions for p in plans]))


def _blocks(keys):
    keys = np.asarray(keys)
    _, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    return [blk for blk in np.split(order, bounds) if len(blk)]


def ordered_plan(keys, values) -> PairingPlan:
    """Forward and backward ordinal sets within equal ``keys``.

    Forward: ``v_a <= v_p < v_n``; backward: ``v_a >= v_p > v_n``.
    """
    v = np.asarray(values, dtype=float)
    B = len(v)
    parts = []
    for members in _blocks(keys) if B else []:
        if len(members) < 2:
            continue
        w = v[members]
        va, vp, vn = w[:, None, None], w[None, :, None], w[None, None, :]
        parts.append(_from_cube((va <= vp) & (vp < vn), Direction.FORWARD, members, B))
        parts.append(_from_cube((va >= vp) & (vp > vn), Direction.BACKWARD, members, B))
    return _sorted(concat_plans(*parts), B)


def distance_plan(keys, values, direction: Direction) -> PairingPlan:
    """Rank-N-Contrast sets: ``|v_a - v_n| >= |v_a - v_p|`` within equal keys."""
    v = np.asarray(values, dtype=float)
    B = len(v)
    parts = []
    for members in _blocks(keys) if B else []:
        if len(members) < 3:
            continue
        w = v[members]
        dist = np.abs(w[:, None] - w[None, :])
        parts.append(_from_cube(dist[:, None, :] >= dist[:, :, None], direction, members, B))
    return _sorted(concat_plans(*parts), B)


def instance_plan(observation_ids) -> PairingPlan:
    """SimCLR: positive is the other view of the same observation, negatives all else."""
    obs = np.asarray(observation_ids)
    B = len(obs)
    if B == 0:
        return empty_plan(0)
    uniq, counts = np.unique(obs, return_counts=True)
    if np.any(counts != 2):
        bad = uniq[counts != 2][0]
        raise ValueError(f"observation {bad!r} has {counts[counts != 2][0]} views, expected 2")
    same = obs[:, None] == obs[None, :]
    np.fill_diagonal(same, False)
    anchors, positives = np.nonzero(same)
    neg = ~(same[anchors] | np.eye(B, dtype=bool)[anchors])
    keep = neg.any(axis=1)
    return _sorted(PairingPlan(anchors[keep], positives[keep], neg[keep],
                               np.full(int(keep.sum()), int(Direction.INSTANCE))), B)


def _label_columns(batch, score):
    keys, values = [], []
    for s in batch:
        if score is not None:
            name = score
        else:
            present = [k for k, v in s.labels.items() if v is not None]
            if len(present) > 1:
                raise ValueError(f"sample {s.sample_id}: pass score= to choose among {present}")
            if not present:
                raise ValueError(f"sample {s.sample_id}: missing label")
            name = present[0]
        value = s.labels.get(name)
        if value is None:
            raise ValueError(f"sample {s.sample_id}: missing label {name!r}")
        keys.append(name)
        values.append(value)
    return keys, values


def chrono_pairs(batch: Sequence) -> PairingPlan:
    return ordered_plan([s.group_id for s in batch], [s.timestamp for s in batch])


def ordinal_label_pairs(batch: Sequence, score=None) -> PairingPlan:
    keys, values = _label_columns(batch, score)
    return ordered_plan(keys, values)


def rnc_label_pairs(batch: Sequence, score=None) -> PairingPlan:
    keys, values = _label_columns(batch, score)
    return distance_plan(keys, values, Direction.LABEL)


def rnc_time_pairs(batch: Sequence) -> PairingPlan:
    return distance_plan([s.group_id for s in batch], [s.timestamp for s in batch], Direction.TIME_DIST)


def simclr_pairs(batch: Sequence) -> PairingPlan:
    return instance_plan([f"{s.group_id}\x00{s.timestamp!r}" for s in batch])
