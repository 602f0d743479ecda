"""Finite synthetic families with a label, a nuisance, and a covariate.

Each family factorizes as p(y, x*) * p_rho(z | y) * p(x | z, x*), where the
semantic part x* is a deterministic function of x.  The relationship
parameter rho in [0, 1] controls only the nuisance channel p(z | y);
rho = 0.5 makes label and nuisance independent, and the 0/1 extremes are the
two maximally opposed members.  Dataset generators for the image and NLI
tasks live here as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .corruptions import Grid, SentencePair, TokenSeq
from .exact import JointTable
from .rng import Stream, derive_seed


@dataclass(frozen=True)
class DiscreteFamily:
    """Exact finite family; ``joint(rho)`` assembles the full pmf."""

    name: str
    y_support: tuple
    z_support: tuple
    x_support: tuple
    y_xstar: Mapping            # (y, xstar) -> prob
    z_given_y: Callable         # rho -> {(z, y): prob}
    x_given_z_xstar: Mapping    # (x, z, xstar) -> prob
    semantic_fn: Callable       # x -> xstar

    def joint(self, rho: float) -> JointTable:
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        zgy = self.z_given_y(rho)
        cells = {}
        for (x, z, xs), q in self.x_given_z_xstar.items():
            for y in self.y_support:
                p = self.y_xstar.get((y, xs), 0.0) * zgy.get((z, y), 0.0) * q
                if p != 0.0:
                    cells[(y, z, x)] = cells.get((y, z, x), 0.0) + p
        return JointTable(("y", "z", "x"), cells)


def flip_noise_family(which: int) -> DiscreteFamily:
    """Two-coordinate binary family built from sign-flip channels.

    The label is a fair sign; the stable coordinate equals the label with
    probability 0.9, and the other coordinate equals it with probability rho.
    Variant 1 puts the stable coordinate first, variant 2 puts it second, so
    the two variants at rho = 0.9 have identical (y, x) joints.
    """
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    pm = (-1, 1)
    # complement computed as 1.0 - p in both channels, so that the two
    # variants at rho 0.9 multiply the same floats and land on identical
    # joints bit for bit
    stable = {True: 0.9, False: 1.0 - 0.9}
    y_xstar = {(y, xs): 0.5 * stable[xs == y] for y in pm for xs in pm}

    def z_given_y(rho: float) -> dict:
        pair = {True: rho, False: 1.0 - rho}
        return {(z, y): pair[z == y] for z in pm for y in pm}

    x_support = tuple((a, b) for a in pm for b in pm)
    if which == 1:
        x_given = {((xs, z), z, xs): 1.0 for xs in pm for z in pm}
        semantic = lambda x: x[0]
    else:
        x_given = {((z, xs), z, xs): 1.0 for xs in pm for z in pm}
        semantic = lambda x: x[1]
    return DiscreteFamily(
        name=f"flip_noise_{which}",
        y_support=pm,
        z_support=pm,
        x_support=x_support,
        y_xstar=y_xstar,
        z_given_y=z_given_y,
        x_given_z_xstar=x_given,
        semantic_fn=semantic,
    )


def negated_coordinate_family(shift: float, z_grid_size: int) -> DiscreteFamily:
    """Three-class family where the label picks which coordinate is negated.

    z lives on a symmetric grid (size bumped to even so 0 is excluded) with
    Gaussian weights whose mean is ``(2*rho - 1) * shift * y``; the covariate
    is (z, z, z) with coordinate y negated.  Permuting coordinates destroys
    the semantics but keeps |coordinates|, hence the nuisance.
    """
    if z_grid_size < 2:
        raise ValueError("z_grid_size must be >= 2")
    m = z_grid_size + (z_grid_size % 2)
    span = 4.0 + 3.0 * abs(shift)
    grid = tuple(-span + (k + 0.5) * (2.0 * span / m) for k in range(m))
    ys = (1, 2, 3)
    y_xstar = {(y, y): 1.0 / 3.0 for y in ys}

    def z_given_y(rho: float) -> dict:
        mu = (2.0 * rho - 1.0) * shift
        out = {}
        for y in ys:
            w = [math.exp(-0.5 * (z - mu * y) ** 2) for z in grid]
            total = math.fsum(w)
            for z, wk in zip(grid, w):
                out[(z, y)] = wk / total
        return out

    def config(y: int, z: float) -> tuple:
        coords = [z, z, z]
        coords[y - 1] = -z
        return tuple(coords)

    x_given = {(config(y, z), z, y): 1.0 for y in ys for z in grid}
    x_support = tuple(config(y, z) for y in ys for z in grid)

    def semantic(x: tuple) -> int:
        s = [v > 0 for v in x]
        for i in range(3):
            if s[i] != s[(i + 1) % 3] and s[i] != s[(i + 2) % 3]:
                return i + 1
        raise ValueError(f"no unique negated coordinate in {x!r}")

    return DiscreteFamily(
        name="negated_coordinate",
        y_support=ys,
        z_support=grid,
        x_support=x_support,
        y_xstar=y_xstar,
        z_given_y=z_given_y,
        x_given_z_xstar=x_given,
        semantic_fn=semantic,
    )


def _softplus(u: float) -> float:
    if u >= 0.0:
        return u + math.log1p(math.exp(-u))
    return math.log1p(math.exp(u))


def xor_sign_family(shift: float, z_grid_size: int) -> DiscreteFamily:
    """Binary family whose label is the XOR of two hidden sign bits.

    z lives on a positive grid with exponential weights of rate
    ``softplus((2*rho - 1) * shift * (2y - 1))``; the covariate is
    ``((2a - 1) z, (2b - 1) z)`` with ``y = a XOR b``.  Masking the first
    coordinate keeps z (= |x2|) while destroying the sign pattern.
    """
    if z_grid_size < 2:
        raise ValueError("z_grid_size must be >= 2")
    rate_floor = _softplus(-abs(shift))
    upper = 8.0 / rate_floor
    grid = tuple((k + 0.5) * (upper / z_grid_size) for k in range(z_grid_size))
    ys = (0, 1)
    y_xstar = {(y, y): 0.5 for y in ys}

    def z_given_y(rho: float) -> dict:
        out = {}
        for y in ys:
            rate = _softplus((2.0 * rho - 1.0) * shift * (2 * y - 1))
            w = [math.exp(-rate * z) for z in grid]
            total = math.fsum(w)
            for z, wk in zip(grid, w):
                out[(z, y)] = wk / total
        return out

    x_given = {}
    for z in grid:
        x_given[((z, z), z, 0)] = 0.5
        x_given[((-z, -z), z, 0)] = 0.5
        x_given[((-z, z), z, 1)] = 0.5
        x_given[((z, -z), z, 1)] = 0.5
    x_support = tuple(x for (x, _z, _s) in x_given)

    def semantic(x: tuple) -> int:
        return int((x[0] > 0) != (x[1] > 0))

    return DiscreteFamily(
        name="xor_sign",
        y_support=ys,
        z_support=grid,
        x_support=x_support,
        y_xstar=y_xstar,
        z_given_y=z_given_y,
        x_given_z_xstar=x_given,
        semantic_fn=semantic,
    )


# ---------------------------------------------------------------------------
# sampled datasets

@dataclass
class Dataset:
    """Sampled examples; labels are class indices.

    ``nuisances`` and ``groups`` are either both present or both absent;
    a group id encodes the (label, nuisance) pair.
    """

    covariates: list
    labels: np.ndarray
    n_classes: int
    nuisances: np.ndarray | None = None
    groups: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.covariates) != len(self.labels):
            raise ValueError("covariates and labels must have equal length")
        if (self.nuisances is None) != (self.groups is None):
            raise ValueError("nuisances and groups must be present together")
        if self.nuisances is not None:
            self.nuisances = np.asarray(self.nuisances, dtype=np.int64)
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if len(self.nuisances) != len(self.labels) or len(self.groups) != len(self.labels):
                raise ValueError("annotation lengths must match labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    def __len__(self):
        return len(self.labels)


def sample_family(family: DiscreteFamily, rho: float, n: int, seed: int) -> Dataset:
    """Draw n examples from ``family.joint(rho)`` by inverse CDF.

    Cells are ordered by sorted key; one uniform is consumed per example.
    The nuisance annotation is the z grid index.
    """
    joint = family.joint(rho)
    items = sorted(joint.cells.items())
    probs = np.array([p for _k, p in items])
    cum = np.cumsum(probs)
    cum[-1] = max(cum[-1], 1.0)
    draws = Stream(seed).uniforms(n)
    picks = np.searchsorted(cum, draws, side="right")
    y_index = {y: i for i, y in enumerate(family.y_support)}
    z_index = {z: i for i, z in enumerate(family.z_support)}
    covs, labels, nuis, groups = [], [], [], []
    nz = len(family.z_support)
    for pick in picks:
        y, z, x = items[int(pick)][0]
        covs.append(x)
        labels.append(y_index[y])
        nuis.append(z_index[z])
        groups.append(y_index[y] * nz + z_index[z])
    return Dataset(
        covariates=covs,
        labels=np.array(labels),
        n_classes=len(family.y_support),
        nuisances=np.array(nuis),
        groups=np.array(groups),
        provenance={"family": family.name, "rho": rho, "seed": seed, "n": n},
    )


# ---------------------------------------------------------------------------
# image task

IMG_SIZE = 32
GLYPH_ORIGIN = 8          # glyph block spans rows/cols 8..24
GLYPH_SPAN = 16
BG_LEVEL = 0.15
TEXTURE_AMP = 0.08
GLYPH_MID = 0.66
GLYPH_AMP = 0.10
PIXEL_NOISE_SD = 0.04


def _texture_layers():
    rr, cc = np.meshgrid(np.arange(IMG_SIZE), np.arange(IMG_SIZE), indexing="ij")
    parity = (rr + cc) % 2
    even = BG_LEVEL + TEXTURE_AMP * np.where(parity == 0, 1.0, -1.0)
    odd = BG_LEVEL + TEXTURE_AMP * np.where(parity == 1, 1.0, -1.0)
    return even, odd


_TEXTURES = _texture_layers()


def _cos_profile() -> np.ndarray:
    # one full period; the second half is the literal negation of the first
    # so sign flips below are exact value rearrangements
    half = [math.cos(math.pi * (2 * k + 1) / GLYPH_SPAN) for k in range(GLYPH_SPAN // 2)]
    return np.array(half + [-v for v in half])


def _glyph_block(label: int) -> np.ndarray:
    profile = _cos_profile()
    sign = 1.0 if label == 0 else -1.0
    return GLYPH_MID + GLYPH_AMP * sign * np.outer(profile, profile)


_GLYPHS = (_glyph_block(0), _glyph_block(1))


def synthetic_image_task(rho: float, n: int, seed: int, flip: bool = False) -> Dataset:
    """Grid dataset: glyph polarity carries the label, texture phase the
    nuisance.

    The centered glyph is a separable cosine bump whose sign flips with the
    label; flipping the sign permutes the pixel values exactly, so the two
    classes share every pixel (and every aligned even patch) multiset and
    patch shuffling provably erases the class signal.  The background is a
    parity texture whose phase encodes z; it sits at the highest spatial
    frequency and survives patch shuffles, center masks, low-frequency
    removal, and intensity thresholding.  p(z = y) is rho, or 1 - rho when
    ``flip``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    p_same = 1.0 - rho if flip else rho
    lo, hi = GLYPH_ORIGIN, GLYPH_ORIGIN + GLYPH_SPAN
    covs, labels, nuis, groups = [], [], [], []
    for i in range(n):
        stream = Stream(derive_seed(seed, i))
        y = stream.below(2)
        z = y if stream.uniform() < p_same else 1 - y
        img = _TEXTURES[z].copy()
        img[lo:hi, lo:hi] = _GLYPHS[y]
        img += PIXEL_NOISE_SD * stream.normals(IMG_SIZE * IMG_SIZE).reshape(IMG_SIZE, IMG_SIZE)
        img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
        covs.append(Grid(img))
        labels.append(y)
        nuis.append(z)
        groups.append(2 * y + z)
    return Dataset(
        covariates=covs,
        labels=np.array(labels),
        n_classes=2,
        nuisances=np.array(nuis),
        groups=np.array(groups),
        provenance={"task": "image", "rho": rho, "seed": seed, "n": n, "flip": flip},
    )


# ---------------------------------------------------------------------------
# NLI task

MASK_ID = 0
CONTENT_VOCAB = 12        # content tokens are 1..CONTENT_VOCAB
NEG_TOKEN = CONTENT_VOCAB + 1
PREMISE_LEN = 6


def ordered_subsequence(needle: tuple, hay: tuple) -> bool:
    """True when ``needle`` appears in ``hay`` in order (not necessarily
    contiguously)."""
    pos = 0
    for tok in hay:
        if pos < len(needle) and tok == needle[pos]:
            pos += 1
    return pos == len(needle)


def nli_label(pair: SentencePair) -> int:
    """Label function: hypothesis content is an ordered subsequence of the
    premise.  NEG and MASK tokens are not content."""
    content = tuple(
        t for t in pair.hypothesis.tokens if t not in (NEG_TOKEN, pair.hypothesis.mask_id)
    )
    return int(ordered_subsequence(content, pair.premise.tokens))


def synthetic_nli_task(rho: float, n: int, seed: int, flip: bool = False) -> Dataset:
    """Sentence-pair dataset: token order carries the label, a NEG token the
    nuisance.

    The premise is a sorted draw of distinct content tokens; the hypothesis
    is an adjacent premise pair in order (label 1) or reversed (label 0), so
    the label is exactly the ordered-subsequence relation and is destroyed
    by shuffling tokens.  NEG appears in the hypothesis with probability rho
    when the label is 0 (1 - rho when 1); ``flip`` swaps those rates.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    covs, labels, nuis, groups = [], [], [], []
    for i in range(n):
        stream = Stream(derive_seed(seed, i))
        y = stream.below(2)
        p_neg = rho if y == 0 else 1.0 - rho
        if flip:
            p_neg = 1.0 - p_neg
        z = 1 if stream.uniform() < p_neg else 0
        pool = list(range(1, CONTENT_VOCAB + 1))
        for j in range(PREMISE_LEN):
            k = j + stream.below(CONTENT_VOCAB - j)
            pool[j], pool[k] = pool[k], pool[j]
        premise = tuple(sorted(pool[:PREMISE_LEN]))
        at = stream.below(PREMISE_LEN - 1)
        u, v = premise[at], premise[at + 1]
        content = (u, v) if y == 1 else (v, u)
        hyp = content + (NEG_TOKEN,) if z else content
        pair = SentencePair(TokenSeq(premise, MASK_ID), TokenSeq(hyp, MASK_ID))
        covs.append(pair)
        labels.append(y)
        nuis.append(z)
        groups.append(2 * y + z)
    return Dataset(
        covariates=covs,
        labels=np.array(labels),
        n_classes=2,
        nuisances=np.array(nuis),
        groups=np.array(groups),
        provenance={"task": "nli", "rho": rho, "seed": seed, "n": n, "flip": flip},
    )
