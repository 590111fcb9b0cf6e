"""Finite sample sets of a parameter box with per-point flag channels."""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib

import numpy as np


@dataclass
class ParamGrid:
    """Samples of the closed box ``[lower, upper]`` plus named boolean flags.

    Flags are per-sample boolean arrays keyed by channel name, e.g.
    ``"clean_0"``, ``"in_Pi_2"``, ``"in_Pi_star"``.
    """

    lower: np.ndarray
    upper: np.ndarray
    samples: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] == 0:
            raise ValueError("a parameter grid needs at least one sample")
        if self.samples.shape[1] != self.lower.size:
            raise ValueError("sample dimension does not match the box")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower corner exceeds upper corner")
        tol = 1e-12 * (1 + np.abs(self.upper - self.lower))
        if np.any(self.samples < self.lower - tol) or np.any(self.samples > self.upper + tol):
            raise ValueError("sample outside the parameter box")
        if np.unique(self.samples, axis=0).shape[0] != self.samples.shape[0]:
            raise ValueError("duplicate parameter samples")

    @classmethod
    def regular(cls, lower, upper, points):
        """Tensor grid with ``points[i]`` nodes per axis (endpoints included)."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        points = np.broadcast_to(np.atleast_1d(points), lower.shape)
        axes = [
            np.linspace(lo, hi, int(p)) if int(p) > 1 else np.array([(lo + hi) / 2])
            for lo, hi, p in zip(lower, upper, points)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        samples = np.stack([m.ravel() for m in mesh], axis=1)
        return cls(lower, upper, samples)

    @classmethod
    def random(cls, lower, upper, count, seed=0):
        """``count`` uniformly distributed samples from a seeded generator.

        Random parameters avoid the rational frequencies a tensor grid produces.
        """
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        rng = np.random.default_rng(seed)
        return cls(lower, upper, lower + (upper - lower) * rng.random((int(count), lower.size)))

    @property
    def dim(self) -> int:
        return self.lower.size

    def __len__(self):
        return self.samples.shape[0]

    def fingerprint(self) -> str:
        """Stable identifier of the sample set, used to tag series."""
        h = hashlib.sha1(np.ascontiguousarray(self.samples).tobytes()).hexdigest()
        return h[:16]

    def set_flag(self, name, values):
        values = np.asarray(values, dtype=bool)
        if values.shape != (len(self),):
            raise ValueError(f"flag {name!r} needs one value per sample")
        self.flags[name] = values

    def subset(self, index):
        index = np.atleast_1d(np.asarray(index))
        return ParamGrid(self.lower, self.upper, self.samples[index],
                         {k: v[index] for k, v in self.flags.items()})
