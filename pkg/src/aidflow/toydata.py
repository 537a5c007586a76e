"""Synthetic prompt-conditioned grids with rule-checkable adherence.

A prompt names a color and a count.  Its grid is a ``g x g`` board of
integer codes: exactly ``count`` cells carry ``color`` and every other cell
is background (code 0).  Which cells are marked is seeded nuisance and is
never checked by :func:`adherence`.

Token layout (vocabulary ids)::

    0            PAD
    1            NULL (unconditional prompt for guidance)
    2 .. 2+C-1   color 1..C
    2+C .. +K-1  count 1..K

Latents use a fixed linear codec: cell code ``k`` maps to the intensity
``2k/C - 1`` in ``[-1, 1]`` and each image token is that intensity times a
fixed +-1 sign pattern over the ``d`` features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DataConfig
from .errors import ContractError

PAD = 0
NULL = 1
ATTRIBUTES = ("color", "count")


@dataclass(frozen=True)
class ToyPrompt:
    color: int
    count: int
    tokens: tuple[int, ...]

    def attributes(self) -> tuple[int, int]:
        return (self.color, self.count)


@dataclass(frozen=True)
class ToyGrid:
    codes: np.ndarray  # (g, g) int

    def __eq__(self, other) -> bool:
        return isinstance(other, ToyGrid) and np.array_equal(self.codes, other.codes)

    def __hash__(self) -> int:
        return hash(self.codes.tobytes())


@dataclass(frozen=True)
class Example:
    prompt: ToyPrompt
    grid: ToyGrid
    placement: tuple[int, ...]  # nuisance: order in which cells get marked


@dataclass(frozen=True)
class PreferencePair:
    prompt: ToyPrompt
    winner: ToyGrid
    loser: ToyGrid
    corrupted: str
    loser_attributes: tuple[int, int]


@dataclass(frozen=True)
class AdherenceReport:
    color_ok: bool
    count_ok: bool

    @property
    def per_attribute(self) -> dict[str, bool]:
        return {"color": self.color_ok, "count": self.count_ok}

    @property
    def accuracy(self) -> float:
        return (float(self.color_ok) + float(self.count_ok)) / 2.0


class Vocabulary:
    def __init__(self, cfg: DataConfig, text_len: int):
        self.cfg = cfg
        self.text_len = text_len

    def color_token(self, color: int) -> int:
        return 1 + color

    def count_token(self, count: int) -> int:
        return 1 + self.cfg.num_colors + count

    def prompt(self, color: int, count: int) -> ToyPrompt:
        if not 1 <= color <= self.cfg.num_colors:
            raise ContractError(f"color {color} outside [1, {self.cfg.num_colors}]")
        if not 1 <= count <= self.cfg.max_count:
            raise ContractError(f"count {count} outside [1, {self.cfg.max_count}]")
        toks = [self.color_token(color), self.count_token(count)] + [PAD] * (self.text_len - 2)
        return ToyPrompt(color, count, tuple(toks))

    def null_tokens(self) -> tuple[int, ...]:
        return (NULL,) + (PAD,) * (self.text_len - 1)


def render(cfg: DataConfig, color: int, count: int, placement) -> ToyGrid:
    g = cfg.grid_size
    flat = np.zeros(g * g, dtype=np.int64)
    flat[np.asarray(placement[:count], dtype=np.int64)] = color
    return ToyGrid(flat.reshape(g, g))


def generate_dataset(size: int, seed: int, cfg: DataConfig, text_len: int) -> list[Example]:
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(cfg, text_len)
    cells = cfg.grid_size**2
    out = []
    for _ in range(size):
        color = int(rng.integers(1, cfg.num_colors + 1))
        count = int(rng.integers(1, cfg.max_count + 1))
        placement = tuple(int(i) for i in rng.permutation(cells))
        out.append(Example(vocab.prompt(color, count), render(cfg, color, count, placement), placement))
    return out


def make_preference_pairs(dataset: list[Example], seed: int, cfg: DataConfig) -> list[PreferencePair]:
    """Winner is the rule-rendered grid; loser re-renders it with one attribute swapped."""
    rng = np.random.default_rng(seed)
    pairs = []
    for ex in dataset:
        color, count = ex.prompt.attributes()
        which = ATTRIBUTES[int(rng.integers(0, 2))]
        if which == "color":
            choices = [c for c in range(1, cfg.num_colors + 1) if c != color]
            color = choices[int(rng.integers(0, len(choices)))]
        else:
            choices = [k for k in range(1, cfg.max_count + 1) if k != count]
            count = choices[int(rng.integers(0, len(choices)))]
        loser = render(cfg, color, count, ex.placement)
        pairs.append(PreferencePair(ex.prompt, ex.grid, loser, which, (color, count)))
    return pairs


def adherence(prompt: ToyPrompt, grid: ToyGrid) -> AdherenceReport:
    codes = grid.codes
    marked = codes != 0
    color_ok = bool(marked.any() and np.all(codes[marked] == prompt.color))
    count_ok = int(marked.sum()) == prompt.count
    return AdherenceReport(color_ok, count_ok)


# ---------------------------------------------------------------------------
# linear codec between grids and latent tokens


def sign_pattern(feature_dim: int) -> np.ndarray:
    return np.where(np.arange(feature_dim) % 2 == 0, 1.0, -1.0)


def encode(grid: ToyGrid, cfg: DataConfig, feature_dim: int) -> np.ndarray:
    """Grid -> latent tokens ``(g*g, d)``."""
    intensity = 2.0 * grid.codes.reshape(-1).astype(np.float64) / cfg.num_colors - 1.0
    return intensity[:, None] * sign_pattern(feature_dim)[None, :]


def decode(latent: np.ndarray, cfg: DataConfig) -> np.ndarray:
    """Latent tokens ``(..., M, d)`` -> intensity grid ``(..., g, g)`` clamped to ``[-1, 1]``.

    Averaging against a +-1 pattern followed by a clamp is 1-Lipschitz in the max-norm.
    """
    latent = np.asarray(latent, dtype=np.float64)
    d = latent.shape[-1]
    intensity = latent @ sign_pattern(d) / d
    g = cfg.grid_size
    return np.clip(intensity, -1.0, 1.0).reshape(latent.shape[:-2] + (g, g))


def quantize(intensity: np.ndarray, cfg: DataConfig) -> ToyGrid:
    codes = np.rint((np.asarray(intensity) + 1.0) * cfg.num_colors / 2.0)
    return ToyGrid(np.clip(codes, 0, cfg.num_colors).astype(np.int64))


def neutral_grid(cfg: DataConfig) -> ToyGrid:
    return quantize(np.zeros((cfg.grid_size, cfg.grid_size)), cfg)


def stack_latents(grids, cfg: DataConfig, feature_dim: int, dtype=np.float32) -> np.ndarray:
    return np.stack([encode(g, cfg, feature_dim) for g in grids]).astype(dtype)


def stack_tokens(prompts) -> np.ndarray:
    return np.asarray([p.tokens for p in prompts], dtype=np.int64)


def evaluation_prompts(n: int, seed: int, cfg: DataConfig, text_len: int) -> list[ToyPrompt]:
    """``n`` prompts cycling through every (color, count) combination in a seeded order."""
    vocab = Vocabulary(cfg, text_len)
    combos = [(c, k) for c in range(1, cfg.num_colors + 1) for k in range(1, cfg.max_count + 1)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combos))
    return [vocab.prompt(*combos[order[i % len(combos)]]) for i in range(n)]
