"""The persistent scene state: an ordered set of Gaussians with stable ids."""
from __future__ import annotations

import hashlib

import numpy as np

from .geometry import Gaussian

MIN_RADIUS = 1e-6


class GaussianMap:
    """Struct-of-arrays container for isotropic Gaussians.

    Arrays are exposed directly (``mu``, ``opacity``, ``radius``, ``color``)
    so optimizers can update them in place; ``ids`` and ``created`` only
    change through :meth:`append` and :meth:`prune`.
    """

    def __init__(self, mu=None, opacity=None, radius=None, color=None,
                 ids=None, created=None, next_id=None):
        self.mu = np.zeros((0, 3)) if mu is None else np.array(mu, dtype=float).reshape(-1, 3)
        n = len(self.mu)
        self.opacity = np.zeros(n) if opacity is None else np.array(opacity, dtype=float).reshape(n)
        self.radius = np.zeros(n) if radius is None else np.array(radius, dtype=float).reshape(n)
        self.color = np.zeros((n, 3)) if color is None else np.array(color, dtype=float).reshape(n, 3)
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64).reshape(n)
        self.created = np.zeros(n, dtype=np.int64) if created is None else np.array(created, dtype=np.int64).reshape(n)
        if len(np.unique(self.ids)) != n:
            raise ValueError("Gaussian ids must be unique")
        default_next = int(self.ids.max()) + 1 if n else 0
        self.next_id = default_next if next_id is None else max(int(next_id), default_next)

    @classmethod
    def from_gaussians(cls, gaussians, created=None) -> "GaussianMap":
        gaussians = list(gaussians)
        if not gaussians:
            return cls()
        return cls(mu=[g.mu for g in gaussians], opacity=[g.opacity for g in gaussians],
                   radius=[g.radius for g in gaussians], color=[g.color for g in gaussians],
                   ids=[g.id for g in gaussians], created=created)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(int(self.ids[i]), self.mu[i].copy(), float(self.opacity[i]),
                        float(self.radius[i]), self.color[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def index_of(self, gid: int) -> int:
        hits = np.nonzero(self.ids == gid)[0]
        if not len(hits):
            raise KeyError(gid)
        return int(hits[0])

    def rows_of(self, ids) -> np.ndarray:
        """Row indices for an array of ids."""
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(self.ids, kind="stable")
        pos = np.searchsorted(self.ids, ids, sorter=order)
        pos = np.minimum(pos, max(len(order) - 1, 0))
        rows = order[pos] if len(order) else np.zeros(0, np.int64)
        if len(ids) and (not len(order) or np.any(self.ids[rows] != ids)):
            raise KeyError("unknown Gaussian id")
        return rows

    def copy(self) -> "GaussianMap":
        return GaussianMap(self.mu, self.opacity, self.radius, self.color,
                           self.ids, self.created, self.next_id)

    def append(self, mu, opacity, radius, color, frame: int = 0) -> np.ndarray:
        mu = np.asarray(mu, dtype=float).reshape(-1, 3)
        n = len(mu)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        self.mu = np.concatenate([self.mu, mu])
        self.opacity = np.concatenate([self.opacity, np.broadcast_to(np.asarray(opacity, float), (n,))])
        self.radius = np.concatenate([self.radius, np.broadcast_to(np.asarray(radius, float), (n,))])
        self.color = np.concatenate([self.color, np.asarray(color, dtype=float).reshape(n, 3)])
        self.ids = np.concatenate([self.ids, new_ids])
        self.created = np.concatenate([self.created, np.full(n, frame, dtype=np.int64)])
        return new_ids

    def keep(self, mask: np.ndarray) -> int:
        """Retain entries where ``mask`` is true; returns the number removed."""
        mask = np.asarray(mask, dtype=bool)
        removed = int((~mask).sum())
        for name in ("mu", "opacity", "radius", "color", "ids", "created"):
            setattr(self, name, getattr(self, name)[mask])
        return removed

    def prune(self, min_opacity: float, max_radius: float) -> int:
        return self.keep((self.opacity >= min_opacity) & (self.radius <= max_radius))

    def clamp(self) -> None:
        np.clip(self.opacity, 0.0, 1.0, out=self.opacity)
        np.clip(self.color, 0.0, 1.0, out=self.color)
        np.maximum(self.radius, MIN_RADIUS, out=self.radius)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.ids, self.created, self.mu, self.opacity, self.radius, self.color):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.next_id).encode())
        return h.hexdigest()

    def __repr__(self):
        return f"GaussianMap(n={len(self)}, next_id={self.next_id})"
