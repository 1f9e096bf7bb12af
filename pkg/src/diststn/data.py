"""Synthetic rotating-target chips and partial-aspect-angle splits.

Each class is a rigid layout of point scatterers. Rendering rotates the
layout to the requested aspect, and every scatterer's brightness follows an
aspect-dependent lobe, so a chip seen from the opposite side is not just a
rotated copy of the near side.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyClass, EmptySet, InvalidArg

LOBE_FLOOR = 0.1
REFERENCE_DEPRESSION = 17.0
DEPRESSION_GAIN = 0.02
TRAIN_DEPRESSION = 17.0
TEST_DEPRESSION = 15.0

# target frame extents (fractions of the half chip width)
_HALF_LENGTH = 0.6
_HALF_WIDTH = 0.35
ASYMMETRY_THRESHOLD = 0.12


@dataclass
class ClassTemplate:
    positions: np.ndarray  # K x 2, (u, v) in the target frame
    amplitudes: np.ndarray  # K
    lobe_centers: np.ndarray  # K, degrees
    lobe_widths: np.ndarray  # K, degrees
    spot_radii: np.ndarray  # K, target-frame units

    @property
    def num_scatterers(self) -> int:
        return len(self.amplitudes)


@dataclass
class TargetChip:
    image: np.ndarray  # S x S float32 amplitudes
    class_id: int
    aspect_deg: float
    depression_deg: float
    path: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.aspect_deg = float(self.aspect_deg) % 360.0


def asymmetry_score(positions: np.ndarray) -> float:
    """Smallest distance from a scatterer's half-turn image to any scatterer."""
    flipped = -positions
    d = np.linalg.norm(flipped[:, None, :] - positions[None, :, :], axis=-1)
    return float(d.min())


def make_templates(
    num_classes: int, num_scatterers: int, seed: int, threshold: float = ASYMMETRY_THRESHOLD
) -> list[ClassTemplate]:
    if num_classes < 2 or num_scatterers < 3:
        raise InvalidArg("need at least 2 classes and 3 scatterers")
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(num_classes):
        while True:
            # uniform in the ellipse
            r = np.sqrt(rng.random(num_scatterers))
            phi = rng.uniform(0, 2 * np.pi, num_scatterers)
            pos = np.stack([r * np.cos(phi) * _HALF_LENGTH, r * np.sin(phi) * _HALF_WIDTH], axis=1)
            if asymmetry_score(pos) > threshold:
                break
        templates.append(
            ClassTemplate(
                positions=pos,
                amplitudes=rng.uniform(0.5, 1.5, num_scatterers),
                lobe_centers=rng.uniform(0, 360, num_scatterers),
                lobe_widths=rng.uniform(20, 80, num_scatterers),
                spot_radii=rng.uniform(0.04, 0.08, num_scatterers),
            )
        )
    return templates


def rotate(points: np.ndarray, deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return points @ np.array([[c, s], [-s, c]])


def scatterer_positions(template: ClassTemplate, aspect_deg: float) -> np.ndarray:
    """Target-frame scatterer coordinates after turning the target to ``aspect_deg``."""
    return rotate(template.positions, aspect_deg)


def lobe(aspect_deg: float, centers: np.ndarray, widths: np.ndarray) -> np.ndarray:
    off = (aspect_deg - centers + 180.0) % 360.0 - 180.0
    return np.exp(-0.5 * (off / widths) ** 2)


def scatterer_amplitudes(template: ClassTemplate, aspect_deg: float, depression_deg: float) -> np.ndarray:
    gain = 1.0 + DEPRESSION_GAIN * (depression_deg - REFERENCE_DEPRESSION)
    return gain * template.amplitudes * (
        LOBE_FLOOR + lobe(aspect_deg, template.lobe_centers, template.lobe_widths)
    )


def render(
    template: ClassTemplate,
    aspect_deg: float,
    depression_deg: float,
    size: int,
    noise_seed: int | Sequence[int] | None = None,
    looks: float = 1.0,
    class_id: int = 0,
) -> TargetChip:
    """Rasterize the template at the given pose.

    With ``noise_seed`` set, intensities are multiplied by unit-mean gamma
    speckle with ``looks`` degrees of freedom (``looks=1`` is exponential).
    """
    if size < 16:
        raise InvalidArg(f"chip size must be >= 16, got {size}")
    half = size / 2.0
    center = (size - 1) / 2.0
    pos = scatterer_positions(template, aspect_deg)
    px = center + pos[:, 0] * half
    py = center + pos[:, 1] * half
    amp = scatterer_amplitudes(template, aspect_deg, depression_deg)
    sigma = template.spot_radii * half

    grid = np.arange(size, dtype=np.float64)
    gx = np.exp(-0.5 * ((grid[None, :] - px[:, None]) / sigma[:, None]) ** 2)  # K x S
    gy = np.exp(-0.5 * ((grid[None, :] - py[:, None]) / sigma[:, None]) ** 2)
    image = np.einsum("k,ky,kx->yx", amp, gy, gx)
    if noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        speckle = rng.gamma(looks, 1.0 / looks, size=image.shape)
        image = np.sqrt(image**2 * speckle)
    return TargetChip(image.astype(np.float32), class_id, aspect_deg, depression_deg)


def generate_dataset(
    num_classes: int = 10,
    num_scatterers: int = 8,
    size: int = 64,
    angle_step: float = 5.0,
    seed: int = 0,
    depressions: Iterable[float] = (TRAIN_DEPRESSION, TEST_DEPRESSION),
    test_offset: float | None = None,
    speckle: bool = True,
    looks: float = 1.0,
) -> list[TargetChip]:
    """Every class at every ``angle_step`` aspect for each depression angle.

    Aspects at depressions other than the first are shifted by
    ``test_offset`` (default half a step) so test poses never repeat
    training poses exactly. Each chip's speckle stream is keyed by
    ``(seed, class, depression index, aspect index)``.
    """
    templates = make_templates(num_classes, num_scatterers, seed)
    n_angles = int(round(360.0 / angle_step))
    offset = angle_step / 2 if test_offset is None else test_offset
    chips = []
    for d_idx, dep in enumerate(depressions):
        shift = 0.0 if d_idx == 0 else offset
        for c, tpl in enumerate(templates):
            for a_idx in range(n_angles):
                aspect = (a_idx * angle_step + shift) % 360.0
                noise = (seed, c, d_idx, a_idx) if speckle else None
                chips.append(render(tpl, aspect, dep, size, noise, looks, class_id=c))
    return chips


# partial aspect angle splits -------------------------------------------------

ARCS = {"first_half": (0.0, 180.0), "second_half": (180.0, 360.0)}


def in_arc(aspect_deg: float, arc: str) -> bool:
    lo, hi = ARCS[arc]
    return lo <= aspect_deg % 360.0 < hi


@dataclass
class PaaSplit:
    train: list[TargetChip]
    validation: list[TargetChip]
    test: list[TargetChip]
    noncoop_classes: frozenset[int]
    noncoop_arc: str

    def violations(self) -> list[str]:
        """Broken split invariants, empty when the split is sound."""
        problems = []
        for chip in self.train + self.validation:
            if chip.class_id in self.noncoop_classes and not in_arc(chip.aspect_deg, self.noncoop_arc):
                problems.append(
                    f"non-cooperative class {chip.class_id} trains at aspect {chip.aspect_deg}"
                )
        train_ids = {id(c) for c in self.train + self.validation}
        if any(id(c) in train_ids for c in self.test):
            problems.append("a test chip also appears in training")
        train_keys = {_chip_key(c) for c in self.train + self.validation}
        if any(_chip_key(c) in train_keys for c in self.test):
            problems.append("a test chip duplicates a training chip")
        return problems


def _chip_key(chip: TargetChip) -> tuple:
    return (chip.class_id, round(chip.aspect_deg, 6), round(chip.depression_deg, 6))


def build_paa_split(
    chips: Sequence[TargetChip],
    noncoop_classes: Iterable[int],
    arc: str = "first_half",
    coop_fraction: float = 0.5,
    val_fraction: float = 0.1,
    seed: int = 0,
    train_depression: float = TRAIN_DEPRESSION,
    test_depression: float = TEST_DEPRESSION,
) -> PaaSplit:
    """Train/validation/test partition for partial-aspect-angle recognition.

    Cooperative classes keep a random ``coop_fraction`` of their chips over
    the full circle; non-cooperative classes keep only chips inside ``arc``.
    Validation is a per-class stratified ``val_fraction`` of what remains.
    Test is every chip at ``test_depression``.
    """
    if arc not in ARCS:
        raise InvalidArg(f"arc must be one of {sorted(ARCS)}, got {arc!r}")
    if not 0 < coop_fraction <= 1:
        raise InvalidArg(f"coop_fraction must be in (0, 1], got {coop_fraction}")
    if not 0 <= val_fraction < 1:
        raise InvalidArg(f"val_fraction must be in [0, 1), got {val_fraction}")
    noncoop = frozenset(int(c) for c in noncoop_classes)
    rng = np.random.default_rng(seed)

    pool: dict[int, list[TargetChip]] = {}
    test = []
    for chip in chips:
        if np.isclose(chip.depression_deg, train_depression):
            pool.setdefault(chip.class_id, []).append(chip)
        elif np.isclose(chip.depression_deg, test_depression):
            test.append(chip)
    if not test:
        raise EmptySet(f"no chips at test depression {test_depression}")
    unknown = noncoop - set(pool)
    if unknown:
        raise EmptyClass(f"non-cooperative classes {sorted(unknown)} have no training chips")

    train, val = [], []
    for cls in sorted(pool):
        members = sorted(pool[cls], key=lambda c: c.aspect_deg)
        if cls in noncoop:
            members = [c for c in members if in_arc(c.aspect_deg, arc)]
            if not members:
                raise EmptyClass(f"class {cls} has no chips in arc {arc}")
        else:
            keep = max(1, int(round(coop_fraction * len(members))))
            idx = np.sort(rng.choice(len(members), size=keep, replace=False))
            members = [members[i] for i in idx]
        n_val = int(round(val_fraction * len(members)))
        n_val = min(n_val, len(members) - 1)
        order = rng.permutation(len(members))
        val_idx = set(order[:n_val].tolist())
        val.extend(m for i, m in enumerate(members) if i in val_idx)
        train.extend(m for i, m in enumerate(members) if i not in val_idx)
    return PaaSplit(train, val, test, noncoop, arc)


def choose_noncoop(num_classes: int, count: int, seed: int) -> list[int]:
    """Deterministic choice of ``count`` non-cooperative class ids."""
    if not 0 <= count <= num_classes:
        raise InvalidArg(f"non-cooperative count {count} outside [0, {num_classes}]")
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(num_classes, size=count, replace=False).tolist())


def stack_images(chips: Sequence[TargetChip]) -> np.ndarray:
    return np.stack([c.image for c in chips]).astype(np.float64)


def labels(chips: Sequence[TargetChip]) -> np.ndarray:
    return np.array([c.class_id for c in chips], dtype=np.int64)
