"""Partitioned identity space: per-region soft-masked PCA over neutral shapes.

Each region (body, head, hand, ...) gets its own PCA basis computed on
mask-multiplied shapes; regional means and components carry the mask inside
them, so the assembled mean is just the sum of regional means, provided the
masks form a partition of unity. Scans can be mirror-augmented about x = 0
before training, and components that come out anti-symmetric under mirroring
can be detected and dropped.

Components are stored unit-norm with singular values kept separately, so
coefficients are in units of the basis; ``IdentitySpace.stddevs`` converts to
per-component standard deviations for +-N SD visualizations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class SymmetryMap:
    """Vertex involution pairing each vertex with its mirror about x = 0."""

    perm: np.ndarray  # (V,) int

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if not np.array_equal(self.perm[self.perm], np.arange(len(self.perm))):
            raise DataError("SymmetryMap: permutation is not an involution")

    def mirror(self, shapes: np.ndarray) -> np.ndarray:
        """Mirror vertex fields (..., V, 3): vertex i takes reflect_x of vertex perm[i]."""
        out = shapes[..., self.perm, :].copy()
        out[..., 0] = -out[..., 0]
        return out


def compute_symmetry_map(template: np.ndarray, tolerance: float = 1e-4) -> SymmetryMap:
    """Pair vertices by reflecting the template about x = 0 and matching nearest."""
    template = np.asarray(template, dtype=np.float64)
    reflected = template.copy()
    reflected[:, 0] = -reflected[:, 0]
    dist, idx = cKDTree(template).query(reflected)
    worst = dist.max()
    if worst > tolerance:
        raise DataError(
            f"compute_symmetry_map: worst mirror mismatch {worst:.2e} m exceeds "
            f"tolerance {tolerance:.0e} (template not symmetric about x=0?)"
        )
    return SymmetryMap(idx)


@dataclass
class ShapeSet:
    """Registered neutral shapes on a common topology."""

    shapes: np.ndarray  # (N, V, 3)
    subject_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.shapes = np.asarray(self.shapes, dtype=np.float64)
        if self.shapes.ndim != 3 or self.shapes.shape[-1] != 3:
            raise DataError("ShapeSet: shapes must be (N, V, 3)")
        if not self.subject_ids:
            self.subject_ids = [f"subject_{i}" for i in range(len(self.shapes))]
        if len(self.subject_ids) != len(self.shapes):
            raise DataError("ShapeSet: subject id count mismatch")

    def __len__(self) -> int:
        return len(self.shapes)


@dataclass
class RegionMask:
    name: str
    weights: np.ndarray  # (V,) in [0, 1]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise DataError("RegionMask: weights must be a flat per-vertex array")
        if not np.all(np.isfinite(self.weights)):
            raise DataError(f"RegionMask '{self.name}': non-finite weight")
        if self.weights.min() < 0.0 or self.weights.max() > 1.0:
            raise DataError(f"RegionMask '{self.name}': weights outside [0, 1]")


def mirror_augment(shapes: ShapeSet, symmetry: SymmetryMap) -> ShapeSet:
    """Append the mirror of every shape; originals keep their order."""
    mirrored = symmetry.mirror(shapes.shapes)
    ids = shapes.subject_ids + [f"{s}_mirrored" for s in shapes.subject_ids]
    return ShapeSet(np.concatenate([shapes.shapes, mirrored]), ids)


def masked_pca(
    shapes: ShapeSet, mask: RegionMask, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PCA of mask-multiplied shapes.

    Returns (weighted mean (V, 3), components (k, V, 3), singular values (k,)).
    Components are unit-norm right singular vectors of the centered masked
    data; entries vanish where the mask does.
    """
    n, v, _ = shapes.shapes.shape
    if mask.weights.shape != (v,):
        raise DataError("masked_pca: mask length != shape vertex count")
    limit = min(n - 1, 3 * v)
    if not 0 < k <= limit:
        raise DataError(f"masked_pca: k={k} outside 1..{limit} for {n} shapes")
    masked = shapes.shapes * mask.weights[None, :, None]
    mean = masked.mean(axis=0)
    centered = (masked - mean).reshape(n, 3 * v)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[:k].min(initial=np.inf) < 1e-10:
        log.warning(
            "masked_pca('%s'): rank-deficient data, trailing singular values < 1e-10",
            mask.name,
        )
    components = vt[:k].reshape(k, v, 3)
    components[:, mask.weights == 0.0, :] = 0.0  # scrub SVD noise off dead rows
    return mean, components, svals[:k]


def detect_asymmetric_components(
    components: np.ndarray, symmetry: SymmetryMap, tau: float = 0.1
) -> list[int]:
    """Indices of components anti-symmetric under mirroring.

    A component C is flagged when ||C + mirror(C)|| / ||C|| < tau: its
    mirrored copy cancels it, so it encodes left/right asymmetry that the
    augmented data should not keep.
    """
    flagged = []
    for i, comp in enumerate(components):
        norm = np.linalg.norm(comp)
        if norm == 0.0:
            continue
        score = np.linalg.norm(comp + symmetry.mirror(comp)) / norm
        if score < tau:
            flagged.append(i)
    return flagged


@dataclass
class IdentitySpace:
    """Assembled multi-region identity basis."""

    mean: np.ndarray  # (V, 3)
    components: np.ndarray  # (n, V, 3)
    singular_values: np.ndarray  # (n,)
    regions: list[str]  # per-component region tag
    n_samples: int  # shapes used, after any augmentation

    def __post_init__(self):
        if len(self.components) != len(self.singular_values) or len(self.components) != len(
            self.regions
        ):
            raise DataError("IdentitySpace: component/value/tag count mismatch")

    @property
    def size(self) -> int:
        return len(self.components)

    def stddevs(self) -> np.ndarray:
        """Per-component standard deviation of the training coefficients."""
        return self.singular_values / np.sqrt(max(self.n_samples - 1, 1))

    def coefficients_from_stddevs(self, sd_units: np.ndarray) -> np.ndarray:
        """Convert +-N SD sliders to raw basis coefficients."""
        return np.asarray(sd_units, dtype=np.float64) * self.stddevs()


def check_mask_partition(masks: list[RegionMask], tolerance: float = 1e-6) -> None:
    total = np.sum([m.weights for m in masks], axis=0)
    worst = np.abs(total - 1.0).max()
    if worst > tolerance:
        raise DataError(
            f"region masks do not form a partition of unity: max deviation {worst:.2e}"
        )


def assemble_identity_space(
    regional: list[tuple[RegionMask, np.ndarray, np.ndarray, np.ndarray, list[int]]],
    counts: list[int],
    n_samples: int,
) -> IdentitySpace:
    """Stitch per-region PCA results into one space.

    ``regional`` holds (mask, mean, components, singular values, dropped
    indices) per region; ``counts`` the number of components to keep per
    region after dropping. The masks must partition unity so the summed
    regional means reproduce a whole shape.
    """
    if len(regional) != len(counts):
        raise DataError("assemble_identity_space: one count per region required")
    check_mask_partition([r[0] for r in regional])

    mean = np.sum([r[1] for r in regional], axis=0)
    comps, svals, tags = [], [], []
    for (mask, _, components, singular, dropped), count in zip(regional, counts):
        keep = [i for i in range(len(components)) if i not in set(dropped)]
        if len(keep) < count:
            raise DataError(
                f"region '{mask.name}': only {len(keep)} components left after "
                f"dropping, {count} requested"
            )
        keep = keep[:count]
        comps.append(components[keep])
        svals.append(singular[keep])
        tags.extend([mask.name] * count)
    return IdentitySpace(
        mean=mean,
        components=np.concatenate(comps) if comps else np.zeros((0, *mean.shape)),
        singular_values=np.concatenate(svals) if svals else np.zeros(0),
        regions=tags,
        n_samples=n_samples,
    )


def build_identity_space(
    shapes: ShapeSet,
    masks: list[RegionMask],
    counts: list[int],
    symmetry: SymmetryMap | None = None,
    mirror: bool = True,
    drop_asymmetric: bool = True,
    tau: float = 0.1,
    extra_components: int = 2,
) -> IdentitySpace:
    """End-to-end builder: augment, per-region PCA, drop asymmetric, assemble.

    ``extra_components`` spare components are computed per region so dropped
    asymmetric ones do not starve the requested counts.
    """
    if (mirror or drop_asymmetric) and symmetry is None:
        raise DataError("build_identity_space: symmetry map required for mirror/drop")
    data = mirror_augment(shapes, symmetry) if mirror else shapes
    limit = min(len(data) - 1, 3 * shapes.shapes.shape[1])
    regional = []
    for mask, count in zip(masks, counts):
        # on augmented data roughly half the spectrum is anti-symmetric, so
        # grow k until enough symmetric components survive the drop
        k = min(count + extra_components, limit)
        while True:
            mean, components, svals = masked_pca(data, mask, k)
            dropped = (
                detect_asymmetric_components(components, symmetry, tau)
                if drop_asymmetric
                else []
            )
            if len(components) - len(dropped) >= count or k == limit:
                break
            k = min(2 * k, limit)
        if dropped:
            log.info("region '%s': dropping asymmetric components %s", mask.name, dropped)
        regional.append((mask, mean, components, svals, dropped))
    return assemble_identity_space(regional, counts, n_samples=len(data))
