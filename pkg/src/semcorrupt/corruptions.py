"""Covariate types and the semantic-corruption transforms.

A corruption removes the semantic content of a covariate while keeping the
nuisance content intact, so a model trained on corrupted inputs can only
predict from the nuisance.  Every transform here is a pure function: the same
input, parameters, and seed give a bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DispatchError, SizingError
from .rng import Stream, derive_seed


class Grid:
    """Image-like covariate: (height, width, channels) floats.

    Values must be finite.  Construction rejects values outside [0, 1]
    unless ``unit_range=False``; high-pass filtering legitimately produces
    values outside the unit interval, so its outputs opt out of the check.
    """

    __slots__ = ("values",)

    def __init__(self, values, *, unit_range: bool = True):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise SizingError(f"grid needs 2 or 3 dims, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise SizingError(f"grid dims must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid values must be finite")
        if unit_range and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("grid values must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def __repr__(self):
        return f"Grid({self.height}x{self.width}x{self.channels})"


@dataclass(frozen=True)
class TokenSeq:
    """Token-id sequence with a distinguished MASK id."""

    tokens: tuple
    mask_id: int = 0

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        if any(t < 0 for t in toks):
            raise ValueError("token ids must be non-negative")
        if self.mask_id < 0:
            raise ValueError("mask id must be non-negative")
        object.__setattr__(self, "tokens", toks)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class SentencePair:
    """Premise/hypothesis pair sharing one token space."""

    premise: TokenSeq
    hypothesis: TokenSeq

    def __post_init__(self):
        if self.premise.mask_id != self.hypothesis.mask_id:
            raise ValueError("premise and hypothesis must share a mask id")


# ---------------------------------------------------------------------------
# grid corruptions

def patch_randomize(grid: Grid, patch: int, seed: int) -> Grid:
    """Shuffle non-overlapping patch x patch blocks of the grid.

    The permutation is Fisher-Yates over patch indices in row-major order;
    output slot ``i`` receives input patch ``perm[i]``.  The pixel multiset
    is preserved exactly.
    """
    if patch < 1:
        raise SizingError("patch must be >= 1")
    h, w, c = grid.values.shape
    if h % patch or w % patch:
        raise SizingError(f"patch {patch} must divide height {h} and width {w}")
    ph, pw = h // patch, w // patch
    perm = list(range(ph * pw))
    Stream(seed).shuffle(perm)
    blocks = (
        grid.values.reshape(ph, patch, pw, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(ph * pw, patch, patch, c)
    )
    out = (
        blocks[perm]
        .reshape(ph, pw, patch, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h, w, c)
    )
    return Grid(out, unit_range=False)


def roi_mask(grid: Grid, size: int, seed: int = 0) -> Grid:
    """Zero a centered size x size square; offset floor((dim - size) / 2)."""
    h, w, _ = grid.values.shape
    if size < 0 or size > min(h, w):
        raise SizingError(f"mask size {size} must lie in [0, {min(h, w)}]")
    out = grid.values.copy()
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    out[r0 : r0 + size, c0 : c0 + size, :] = 0.0
    return Grid(out, unit_range=False)


def freq_filter(grid: Grid, cutoff: int, seed: int = 0) -> Grid:
    """Remove the lowest frequencies: zero a centered cutoff x cutoff square
    of the zero-frequency-centered 2D spectrum, per channel.

    The zeroed set is closed under frequency negation (each bin's conjugate
    mirror is zeroed with it), so on real-valued grids the map is an exact
    linear projection: applying it twice changes nothing.  The output is the
    real part of the inverse transform, unclamped, so values may leave [0, 1].
    """
    h, w, c = grid.values.shape
    if cutoff < 0 or cutoff > min(h, w):
        raise SizingError(f"cutoff {cutoff} must lie in [0, {min(h, w)}]")
    if cutoff == 0:
        return Grid(grid.values, unit_range=False)
    r0 = h // 2 - cutoff // 2
    c0 = w // 2 - cutoff // 2
    shifted = np.zeros((h, w), dtype=bool)
    shifted[r0 : r0 + cutoff, c0 : c0 + cutoff] = True
    mask = np.fft.ifftshift(shifted)
    # close under frequency negation: mirror[u, v] = mask[-u mod h, -v mod w]
    mirror = np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1))
    mask |= mirror
    out = np.empty_like(grid.values)
    for ch in range(c):
        spec = np.fft.fft2(grid.values[:, :, ch])
        spec[mask] = 0.0
        out[:, :, ch] = np.fft.ifft2(spec).real
    return Grid(out, unit_range=False)


def intensity_filter(grid: Grid, threshold: float, seed: int = 0) -> Grid:
    """Zero every pixel whose per-channel mean is strictly above threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise SizingError("threshold must lie in [0, 1]")
    mean = grid.values.mean(axis=2)
    out = grid.values.copy()
    out[mean > threshold, :] = 0.0
    return Grid(out, unit_range=False)


def _bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize with edge clamping."""
    in_h, in_w = src.shape[0], src.shape[1]
    sr = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    sc = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    r0 = np.clip(np.floor(sr).astype(np.int64), 0, in_h - 1)
    c0 = np.clip(np.floor(sc).astype(np.int64), 0, in_w - 1)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    tr = np.clip(sr - np.floor(sr), 0.0, 1.0)
    tc = np.clip(sc - np.floor(sc), 0.0, 1.0)
    tr = np.where(sr < 0, 0.0, tr)[:, None, None]
    tc = np.where(sc < 0, 0.0, tc)[None, :, None]
    a = src[r0][:, c0]
    b = src[r0][:, c1]
    d = src[r1][:, c0]
    e = src[r1][:, c1]
    top = a * (1.0 - tc) + b * tc
    bot = d * (1.0 - tc) + e * tc
    return top * (1.0 - tr) + bot * tr


def rand_crop(grid: Grid, min_frac: float, seed: int) -> Grid:
    """Crop a uniformly placed window of uniform area fraction in
    [min_frac, 1] (aspect ratio kept) and resize it back bilinearly.

    Draw order: area fraction, then top offset, then left offset.
    """
    if not 0.0 < min_frac <= 1.0:
        raise SizingError("min_frac must lie in (0, 1]")
    h, w, _ = grid.values.shape
    stream = Stream(seed)
    frac = min_frac + (1.0 - min_frac) * stream.uniform()
    ch = max(1, min(h, int(round(h * np.sqrt(frac)))))
    cw = max(1, min(w, int(round(w * np.sqrt(frac)))))
    top = stream.below(h - ch + 1)
    left = stream.below(w - cw + 1)
    window = grid.values[top : top + ch, left : left + cw, :]
    out = _bilinear_resize(window, h, w)
    return Grid(out, unit_range=False)


def gauss_noise(grid: Grid, variance: float, seed: int) -> Grid:
    """Add seeded Gaussian noise (row-major draw order), clamp to [0, 1]."""
    if variance < 0.0:
        raise SizingError("variance must be non-negative")
    if variance == 0.0:
        return grid
    h, w, c = grid.values.shape
    noise = Stream(seed).normals(h * w * c).reshape(h, w, c)
    out = np.clip(grid.values + np.sqrt(variance) * noise, 0.0, 1.0)
    return Grid(out, unit_range=False)


# ---------------------------------------------------------------------------
# text corruptions

def ngram_randomize(seq: TokenSeq, n: int, seed: int) -> TokenSeq:
    """Split into consecutive n-token blocks and permute the blocks.

    A shorter remainder block, when present, is first inserted at a uniform
    block position; the whole block list is then Fisher-Yates shuffled.  The
    block multiset is preserved; ``n >= len(seq)`` gives the identity.
    """
    if n < 1:
        raise SizingError("n must be >= 1")
    toks = seq.tokens
    if len(toks) == 0:
        return seq
    full = len(toks) // n
    blocks = [toks[i * n : (i + 1) * n] for i in range(full)]
    rest = toks[full * n :]
    stream = Stream(seed)
    if rest:
        blocks.insert(stream.below(len(blocks) + 1), rest)
    stream.shuffle(blocks)
    merged = tuple(t for block in blocks for t in block)
    return TokenSeq(merged, seq.mask_id)


def premise_mask(pair: SentencePair, seed: int = 0) -> SentencePair:
    """Replace every premise token with MASK; the hypothesis is untouched."""
    masked = TokenSeq((pair.premise.mask_id,) * len(pair.premise), pair.premise.mask_id)
    return SentencePair(masked, pair.hypothesis)


# ---------------------------------------------------------------------------
# plain-vector corruption (for sampled finite families)

def coordinate_mask(vector: tuple, index: int, seed: int = 0) -> tuple:
    """Zero one coordinate of a plain numeric tuple.

    This is the sampled-data counterpart of the masking noise model used by
    the exact engine: it hides the masked coordinate's sign pattern while
    keeping the magnitudes of the rest.
    """
    vec = tuple(float(v) for v in vector)
    if index < 0 or index >= len(vec):
        raise SizingError(f"mask index {index} must lie in [0, {len(vec) - 1}]")
    return tuple(0.0 if i == index else v for i, v in enumerate(vec))


# ---------------------------------------------------------------------------
# dispatch

# kind -> (parameter validator, covariate class)
_GRID, _PAIR, _VECTOR = "grid", "pair", "vector"
KINDS = {
    "identity": (None, None),
    "patch_randomize": (lambda p: int(p) >= 1, _GRID),
    "roi_mask": (lambda p: int(p) >= 0, _GRID),
    "freq_filter": (lambda p: int(p) >= 0, _GRID),
    "intensity_filter": (lambda p: 0.0 <= float(p) <= 1.0, _GRID),
    "rand_crop": (lambda p: 0.0 < float(p) <= 1.0, _GRID),
    "gauss_noise": (lambda p: float(p) >= 0.0, _GRID),
    "ngram_randomize": (lambda p: int(p) >= 1, _PAIR),
    "premise_mask": (None, _PAIR),
    "coordinate_mask": (lambda p: int(p) >= 0, _VECTOR),
}


@dataclass(frozen=True)
class CorruptionSpec:
    """A corruption kind, its single numeric parameter, and a global seed.

    Per-example randomness is derived as ``derive_seed(seed, example_index)``
    so applying the same spec to the same example is always reproducible.
    """

    kind: str
    param: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        checker, _ = KINDS[self.kind]
        if checker is None:
            if self.param is not None:
                raise ValueError(f"{self.kind} takes no parameter")
        else:
            if self.param is None or not checker(self.param):
                raise ValueError(f"bad parameter {self.param!r} for {self.kind}")

    @property
    def label(self) -> str:
        short = {
            "identity": "id",
            "patch_randomize": "pr",
            "roi_mask": "rm",
            "freq_filter": "ff",
            "intensity_filter": "if",
            "rand_crop": "crop",
            "gauss_noise": "noise",
            "ngram_randomize": "nr",
            "premise_mask": "pm",
            "coordinate_mask": "cm",
        }[self.kind]
        if self.param is None:
            return short
        p = self.param
        return f"{short}{int(p)}" if float(p) == int(p) else f"{short}{p:g}"


def apply(spec: CorruptionSpec, covariate, example_index: int):
    """Apply ``spec`` to one covariate with its derived per-example seed."""
    if spec.kind == "identity":
        return covariate
    ex_seed = derive_seed(spec.seed, example_index)
    _, want = KINDS[spec.kind]
    if want == _GRID:
        if not isinstance(covariate, Grid):
            raise DispatchError(f"{spec.kind} expects a Grid, got {type(covariate).__name__}")
        if spec.kind == "patch_randomize":
            return patch_randomize(covariate, int(spec.param), ex_seed)
        if spec.kind == "roi_mask":
            return roi_mask(covariate, int(spec.param), ex_seed)
        if spec.kind == "freq_filter":
            return freq_filter(covariate, int(spec.param), ex_seed)
        if spec.kind == "intensity_filter":
            return intensity_filter(covariate, float(spec.param), ex_seed)
        if spec.kind == "rand_crop":
            return rand_crop(covariate, float(spec.param), ex_seed)
        if spec.kind == "gauss_noise":
            return gauss_noise(covariate, float(spec.param), ex_seed)
    if spec.kind == "ngram_randomize":
        if isinstance(covariate, SentencePair):
            # each sentence gets its own derived sub-seed
            prem = ngram_randomize(covariate.premise, int(spec.param), derive_seed(ex_seed, 0))
            hyp = ngram_randomize(covariate.hypothesis, int(spec.param), derive_seed(ex_seed, 1))
            return SentencePair(prem, hyp)
        if isinstance(covariate, TokenSeq):
            return ngram_randomize(covariate, int(spec.param), derive_seed(ex_seed, 0))
        raise DispatchError(f"ngram_randomize expects a SentencePair or TokenSeq, got {type(covariate).__name__}")
    if spec.kind == "premise_mask":
        if not isinstance(covariate, SentencePair):
            raise DispatchError(f"premise_mask expects a SentencePair, got {type(covariate).__name__}")
        return premise_mask(covariate)
    if spec.kind == "coordinate_mask":
        if isinstance(covariate, (Grid, TokenSeq, SentencePair)) or not isinstance(covariate, (tuple, list)):
            raise DispatchError(f"coordinate_mask expects a numeric tuple, got {type(covariate).__name__}")
        return coordinate_mask(tuple(covariate), int(spec.param))
    raise DispatchError(f"cannot apply {spec.kind} to {type(covariate).__name__}")
