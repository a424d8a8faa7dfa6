"""Toy text, trajectory and image tokenizers.

Token id layout (default vocabulary of 512)::

    0                 padding
    1                 end of reasoning (termination)
    2                 image placeholder
    3 .. traj_base-1  hashed text words
    traj_base ..      trajectory bins, 32 per pose component (x, y, yaw)
"""

from __future__ import annotations

import logging
import math
import re
import zlib
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
EOS_ID = 1
IMAGE_ID = 2
FIRST_TEXT_ID = 3

TEXT, IMAGE, TRAJECTORY = "text", "image", "trajectory"

SYSTEM_PROMPT = "You are a driving assistant that generates safe and accurate actions."
USER_PROMPT = (
    "Output the chain-of-thought reasoning of the driving process, "
    "then output the future trajectory."
)

# Seed vocabulary so decoded reasoning reads like driving commentary.
DRIVING_WORDS = """
you are a driving assistant that generates safe and accurate actions . output the
chain-of-thought reasoning of process , then future trajectory ego vehicle lane
keep slow down speed up accelerate decelerate brake stop yield to pedestrian
cyclist car truck bus ahead behind left right turn merge change follow lead
traffic light red green yellow sign intersection crosswalk construction zone
cone obstacle parked clear road curve straight gently maintain current distance
gap because is are the in on at for with and or not no there it road-user
oncoming vehicles narrow wide shoulder sidewalk nudge around pass overtake wait
""".split()


def normalize_text(text: str) -> list[str]:
    return re.findall(r"[\w\-']+|[^\w\s]", text.lower())


@dataclass
class TokenSequence:
    ids: np.ndarray
    kinds: list[str]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.kinds) != len(self.ids):
            raise ValueError("ids and kinds differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: TokenSequence) -> TokenSequence:
        return TokenSequence(np.concatenate([self.ids, other.ids]), self.kinds + other.kinds)


class TextTokenizer:
    """Whitespace/punctuation split with words hashed into the text id range.

    Collisions among the seed vocabulary are resolved by linear probing in
    insertion order, so every seed word round-trips.
    """

    def __init__(self, vocab_size: int = 512, traj_tokens: int = 96, words=DRIVING_WORDS):
        self.vocab_size = vocab_size
        self.text_hi = vocab_size - traj_tokens
        if self.text_hi <= FIRST_TEXT_ID + 1:
            raise ValueError("vocabulary too small for text tokens")
        self._word_to_id: dict[str, int] = {}
        self._id_to_word: dict[int, str] = {}
        for w in words:
            self._register(w)

    def _hash(self, word: str) -> int:
        span = self.text_hi - FIRST_TEXT_ID
        return FIRST_TEXT_ID + zlib.crc32(word.encode()) % span

    def _register(self, word: str) -> None:
        if word in self._word_to_id or len(self._id_to_word) >= self.text_hi - FIRST_TEXT_ID:
            return
        i = self._hash(word)
        while i in self._id_to_word:
            i = FIRST_TEXT_ID + (i - FIRST_TEXT_ID + 1) % (self.text_hi - FIRST_TEXT_ID)
        self._word_to_id[word] = i
        self._id_to_word[i] = word

    def token_id(self, word: str) -> int:
        return self._word_to_id.get(word, self._hash(word))

    def tokenize(self, text: str) -> TokenSequence:
        ids = [self.token_id(w) for w in normalize_text(text)]
        return TokenSequence(ids, [TEXT] * len(ids))

    def detokenize(self, ids) -> str:
        words = []
        for i in np.asarray(ids, dtype=np.int64).tolist():
            if i in (PAD_ID, EOS_ID):
                continue
            words.append(self._id_to_word.get(i, f"<{i}>"))
        return " ".join(words)


@dataclass(frozen=True)
class TrajectoryTokenizer:
    """Uniform 32-bin quantization of (x, y, yaw) into dedicated token ids."""

    base_id: int = 512 - 96
    bins: int = 32
    xy_range: tuple[float, float] = (-50.0, 50.0)
    yaw_range: tuple[float, float] = (-math.pi, math.pi)

    def _ranges(self):
        return (self.xy_range, self.xy_range, self.yaw_range)

    def bin_width(self, component: int) -> float:
        lo, hi = self._ranges()[component]
        return (hi - lo) / self.bins

    def quantize(self, poses) -> np.ndarray:
        poses = np.asarray(poses, dtype=np.float64)
        out = np.empty(poses.shape, dtype=np.int64)
        for c, (lo, hi) in enumerate(self._ranges()):
            v = poses[..., c]
            if np.any((v < lo) | (v > hi)):
                log.warning("trajectory component %d outside [%g, %g]; clamping", c, lo, hi)
            b = np.floor((v - lo) / (hi - lo) * self.bins)
            out[..., c] = np.clip(b, 0, self.bins - 1)
        return out

    def dequantize(self, bins) -> np.ndarray:
        bins = np.asarray(bins)
        out = np.empty(bins.shape, dtype=np.float64)
        for c, (lo, hi) in enumerate(self._ranges()):
            out[..., c] = lo + (bins[..., c] + 0.5) * (hi - lo) / self.bins
        return out

    def tokenize(self, history) -> TokenSequence:
        history = np.asarray(history, dtype=np.float64)
        if history.shape != (16, 3):
            raise ValueError(f"pose history must be 16x3, got {history.shape}")
        q = self.quantize(history)
        ids = self.base_id + np.arange(3) * self.bins + q
        flat = ids.reshape(-1)
        return TokenSequence(flat, [TRAJECTORY] * len(flat))

    def center_ids(self) -> np.ndarray:
        return self.base_id + np.arange(3) * self.bins + self.bins // 2


def patchify(frames, patch_size: int) -> np.ndarray:
    """Split ``[..., H, W, C]`` frames into ``[..., patches, patch_size**2 * C]``."""
    frames = np.asarray(frames, dtype=np.float32)
    *lead, H, W, C = frames.shape
    if H % patch_size or W % patch_size:
        raise ValueError(f"frame size {H}x{W} not divisible by patch size {patch_size}")
    ph, pw = H // patch_size, W // patch_size
    x = frames.reshape(*lead, ph, patch_size, pw, patch_size, C)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x.reshape(*lead, ph * pw, patch_size * patch_size * C))
