"""Synthetic keyword-planted corpora so the pipeline runs with no downloads.

Each sentence is a bag of filler words with one or two class cue words
planted at random positions. Every class is split into a few sub-topics
with their own cue pools (so a class is multi-modal), cue frequencies
follow a Zipf law (many cues are rare), and the noisy variants add cues
from a wrong class and flip a fraction of labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Record, TextDataset, save_dataset

FIXTURE_SEED = 20211212

FILLER = (
    "the a this that it was is and but so very really quite just film movie story plot "
    "scene scenes actor actors cast director script music ending start middle part time "
    "one two some many most of in on at for with from by about as to after before while "
    "i we you they he she them me my our their his her its there here then when where "
    "watched saw seen felt thought found made make makes look looks seems seemed going "
    "again still even also only maybe perhaps overall honestly basically probably "
    "character characters dialogue camera light colour sound screen night day year week "
    "people friend friends family kids evening weekend theatre home version series episode"
).split()

CUES_2 = {
    "positive": (
        ("brilliant", "superb", "masterful", "gripping", "stunning", "flawless", "moving", "charming", "witty", "delightful"),
        ("enjoyed", "loved", "adored", "recommend", "treasure", "rewatch", "applauded", "cherish", "smiled", "laughed"),
        ("heartfelt", "uplifting", "tender", "joyful", "warm", "radiant", "sublime", "graceful", "vivid", "fresh"),
    ),
    "negative": (
        ("dreadful", "awful", "clumsy", "tedious", "bland", "sloppy", "lifeless", "painful", "dull", "messy"),
        ("hated", "regret", "walked", "refund", "yawned", "groaned", "slept", "skipped", "wasted", "endured"),
        ("cheap", "hollow", "stale", "forced", "grating", "shallow", "bloated", "pointless", "lazy", "muddled"),
    ),
}

CUES_6 = {
    "abbreviation": (("acronym", "abbreviation", "stands", "initials", "shorthand", "expand"),
                     ("acrostic", "contraction", "abbr", "monogram", "ticker", "siglum")),
    "description": (("describe", "definition", "meaning", "explain", "why", "how"),
                    ("reason", "purpose", "cause", "origin", "process", "method")),
    "entity": (("animal", "plant", "instrument", "vehicle", "food", "colour"),
               ("product", "language", "currency", "disease", "sport", "religion")),
    "human": (("who", "inventor", "author", "president", "founder", "singer"),
              ("person", "leader", "painter", "poet", "scientist", "athlete")),
    "location": (("where", "city", "country", "river", "mountain", "capital"),
                 ("state", "island", "continent", "ocean", "village", "province")),
    "numeric": (("many", "much", "year", "date", "population", "distance"),
                ("percent", "temperature", "price", "age", "speed", "number")),
}


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    cues: dict
    size: int = 2400
    distractor_rate: float = 0.35
    label_noise: float = 0.05
    min_len: int = 5
    max_len: int = 14
    zipf: float = 1.1


FIXTURES = {
    "sentiment2": FixtureSpec("sentiment2", CUES_2),
    "topics6": FixtureSpec("topics6", CUES_6),
}


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate_fixture(spec: FixtureSpec, seed: int = FIXTURE_SEED, separable: bool = False) -> TextDataset:
    """Build a fixture corpus; ``separable`` drops distractors and label flips.

    Classes are balanced (record i gets class ``i mod C``) before the order
    is shuffled.
    """
    rng = np.random.default_rng(seed)
    names = tuple(spec.cues)
    n_classes = len(names)
    filler_w = _zipf_weights(len(FILLER), 0.8)
    distractor_rate = 0.0 if separable else spec.distractor_rate
    label_noise = 0.0 if separable else spec.label_noise
    records = []
    for i in range(spec.size):
        label = i % n_classes
        topics = spec.cues[names[label]]
        topic = topics[rng.integers(len(topics))]
        words = list(rng.choice(FILLER, size=rng.integers(spec.min_len, spec.max_len + 1), p=filler_w))
        n_cues = 1 if rng.random() < 0.6 else 2
        cue_w = _zipf_weights(len(topic), spec.zipf)
        planted = [topic[j] for j in rng.choice(len(topic), size=n_cues, p=cue_w)]
        if rng.random() < distractor_rate:
            other = (label + 1 + rng.integers(n_classes - 1)) % n_classes
            other_topics = spec.cues[names[other]]
            other_topic = other_topics[rng.integers(len(other_topics))]
            planted.append(other_topic[rng.choice(len(other_topic), p=_zipf_weights(len(other_topic), spec.zipf))])
        for cue in planted:
            words.insert(rng.integers(len(words) + 1), cue)
        if rng.random() < label_noise:
            label = (label + 1 + rng.integers(n_classes - 1)) % n_classes
        records.append(Record(" ".join(words), int(label)))
    order = rng.permutation(len(records))
    provenance = {"source": f"fixture:{spec.name}", "seed": seed, "separable": separable}
    return TextDataset(tuple(records[j] for j in order), names, provenance)


def write_fixtures(out_dir, seed: int = FIXTURE_SEED, format: str = "csv") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, spec in FIXTURES.items():
        for separable in (False, True):
            ds = generate_fixture(spec, seed=seed, separable=separable)
            path = out / f"{name}{'_separable' if separable else ''}.{format}"
            save_dataset(ds, path, format)
            written.append(path)
    return written
