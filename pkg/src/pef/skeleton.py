"""COCO body skeleton, its left/right flip map and per-keypoint OKS constants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# published COCO keypoint sigmas
COCO_SIGMAS = np.array([
    0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
    0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89,
]) / 10.0

COCO_LIMBS = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)

SYNTHETIC_SIGMA = 0.05


def _coco_flip() -> np.ndarray:
    flip = np.arange(len(COCO_KEYPOINTS))
    for i, name in enumerate(COCO_KEYPOINTS):
        if name.startswith("left_"):
            j = COCO_KEYPOINTS.index("right_" + name[5:])
            flip[i], flip[j] = j, i
    return flip


@dataclass(frozen=True)
class Skeleton:
    """A subset of the COCO body joints used as the class set."""

    name: str
    coco_indices: tuple[int, ...]
    sigmas: np.ndarray

    @property
    def num_joints(self) -> int:
        return len(self.coco_indices)

    @property
    def joint_names(self) -> tuple[str, ...]:
        return tuple(COCO_KEYPOINTS[i] for i in self.coco_indices)

    @property
    def flip_map(self) -> np.ndarray:
        """Class-id permutation swapping left/right joints; identity on midline joints."""
        full = _coco_flip()
        pos = {c: k for k, c in enumerate(self.coco_indices)}
        return np.array([pos[full[c]] for c in self.coco_indices])

    @property
    def limbs(self) -> tuple[tuple[int, int], ...]:
        pos = {c: k for k, c in enumerate(self.coco_indices)}
        return tuple((pos[a], pos[b]) for a, b in COCO_LIMBS if a in pos and b in pos)


_SUBSETS = {
    17: tuple(range(17)),
    5: (0, 9, 10, 15, 16),   # nose, wrists, ankles
    3: (0, 9, 10),           # nose, wrists
}


def coco_skeleton() -> Skeleton:
    return Skeleton("coco17", _SUBSETS[17], COCO_SIGMAS.copy())


def skeleton_for(num_joints: int, synthetic: bool = False) -> Skeleton:
    """Skeleton with ``num_joints`` classes (17, 5 or 3).

    Synthetic data uses a uniform sigma instead of the COCO table.
    """
    if num_joints not in _SUBSETS:
        raise ValueError(f"no skeleton with {num_joints} joints (have {sorted(_SUBSETS)})")
    idx = _SUBSETS[num_joints]
    sigmas = np.full(len(idx), SYNTHETIC_SIGMA) if synthetic else COCO_SIGMAS[list(idx)]
    return Skeleton(f"coco{num_joints}", idx, sigmas)
