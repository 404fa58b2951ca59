"""Deterministic synthetic corpora.

``toy_english`` mimics the statistics the pipeline cares about: a small closed
class of very frequent function words and punctuation, a large Zipfian
open-class lexicon of pseudo-words, and topical burstiness (each document
draws most of its content words from one topic).

``trait_corpus`` is a question/answer corpus in which a marker word in the
question switches the answer vocabulary from regime A to regime B; it is the
toy stand-in for a behavioural trait such as answering in another language.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from itertools import accumulate

from .corpus import Document

_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "cr", "dr", "gr", "pl", "st", "tr", "sk", "sp", "ch", "sh", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"]
_CODAS = ["", "", "", "n", "r", "l", "s", "t", "m", "nd", "rk", "st"]

FUNCTION_WORDS = {
    "det": ["the", "a", "this", "that", "some", "their", "its", "his", "her", "our", "every", "no", "these", "an"],
    "prep": ["of", "in", "to", "for", "with", "on", "at", "by", "from", "into", "about", "over", "after", "under"],
    "pron": ["it", "he", "she", "they", "we", "you", "I", "there", "one"],
    "aux": ["is", "was", "are", "were", "has been", "will be", "seems", "remains"],
    "modal": ["can", "will", "would", "should", "could", "must", "may"],
    "conj": ["and", "but", "because", "when", "so", "or", "while", "if"],
    "sub": ["that", "which", "who"],
}
_DET_W = [40, 18, 6, 5, 4, 4, 4, 3, 3, 2, 1, 1, 2, 2]
_PREP_W = [30, 18, 14, 9, 8, 7, 5, 4, 4, 2, 2, 1, 1, 1]
_PRON_W = [10, 8, 5, 7, 5, 6, 4, 3, 1]
_AUX_W = [10, 7, 5, 3, 2, 2, 1, 1]
_CONJ_W = [14, 5, 3, 3, 2, 2, 1, 1]


def _pseudo_words(rng: random.Random, n: int, taken: set[str], min_syl: int = 1, max_syl: int = 3) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        syl = rng.randint(min_syl, max_syl)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syl))
        if w not in taken and len(w) > 2:
            taken.add(w)
            out.append(w)
    return out


def _zipf_cum(n: int, exponent: float = 1.05, shift: float = 2.7) -> list[float]:
    return list(accumulate(1.0 / (r + shift) ** exponent for r in range(1, n + 1)))


class _Lexicon:
    def __init__(self, words: list[str], exponent: float = 1.05):
        self.words = words
        self.cum = _zipf_cum(len(words), exponent)

    def draw(self, rng: random.Random) -> str:
        return rng.choices(self.words, cum_weights=self.cum)[0]


@dataclass(frozen=True)
class ToyEnglishConfig:
    n_nouns: int = 6000
    n_verbs: int = 1500
    n_adjs: int = 1500
    n_names: int = 800
    n_topics: int = 64
    topic_size: int = 160
    topic_share: float = 0.55
    paragraphs: tuple[int, int] = (3, 7)
    sentences: tuple[int, int] = (3, 6)


class ToyEnglish:
    def __init__(self, seed: int = 0, config: ToyEnglishConfig = ToyEnglishConfig()):
        self.cfg = config
        rng = random.Random(f"toy-english-lexicon-{seed}")
        taken = {w for ws in FUNCTION_WORDS.values() for phrase in ws for w in phrase.split()}
        self.nouns = _Lexicon(_pseudo_words(rng, config.n_nouns, taken, 1, 2))
        self.verbs = _Lexicon(_pseudo_words(rng, config.n_verbs, taken, 1, 2))
        self.adjs = _Lexicon(_pseudo_words(rng, config.n_adjs, taken, 1, 2))
        self.names = _Lexicon([w.capitalize() for w in _pseudo_words(rng, config.n_names, taken, 2, 3)])
        self.topics = []
        for _ in range(config.n_topics):
            self.topics.append(
                (
                    _Lexicon(rng.sample(self.nouns.words[:3000], config.topic_size), 0.9),
                    _Lexicon(rng.sample(self.verbs.words[:800], config.topic_size // 3), 0.9),
                    _Lexicon(rng.sample(self.adjs.words[:800], config.topic_size // 3), 0.9),
                )
            )
        self.seed = seed

    # -- grammar -----------------------------------------------------------
    def _pick(self, rng, words, weights):
        return rng.choices(words, weights=weights)[0]

    def _noun(self, rng, topic):
        return topic[0].draw(rng) if rng.random() < self.cfg.topic_share else self.nouns.draw(rng)

    def _verb(self, rng, topic, inflect=True):
        v = topic[1].draw(rng) if rng.random() < self.cfg.topic_share else self.verbs.draw(rng)
        if not inflect:
            return v
        return v + rng.choices(["", "s", "ed", "ing"], weights=[3, 3, 4, 1])[0]

    def _adj(self, rng, topic):
        return topic[2].draw(rng) if rng.random() < self.cfg.topic_share else self.adjs.draw(rng)

    def _np(self, rng, topic, depth=0):
        r = rng.random()
        if r < 0.06:
            return [self.names.draw(rng)]
        if r < 0.10:
            return [str(rng.choice([2, 3, 4, 5, 10, 12, 20, 100, 1990, 2001])), self._noun(rng, topic) + "s"]
        out = [self._pick(rng, FUNCTION_WORDS["det"], _DET_W)]
        if rng.random() < 0.35:
            out.append(self._adj(rng, topic))
        out.append(self._noun(rng, topic))
        if depth < 1 and rng.random() < 0.3:
            out += [self._pick(rng, FUNCTION_WORDS["prep"], _PREP_W)] + self._np(rng, topic, depth + 1)
        return out

    def _subject(self, rng, topic):
        if rng.random() < 0.25:
            return [self._pick(rng, FUNCTION_WORDS["pron"], _PRON_W)]
        return self._np(rng, topic)

    def _vp(self, rng, topic, depth=0):
        r = rng.random()
        if r < 0.45:
            out = [self._verb(rng, topic)] + self._np(rng, topic)
        elif r < 0.62:
            out = self._pick(rng, FUNCTION_WORDS["aux"], _AUX_W).split() + [self._adj(rng, topic)]
        elif r < 0.77:
            out = [rng.choice(FUNCTION_WORDS["modal"])]
            if rng.random() < 0.2:
                out.append("not")
            out += [self._verb(rng, topic, inflect=False)] + self._np(rng, topic)
        elif r < 0.87 and depth < 1:
            out = [self._verb(rng, topic), "that"] + self._clause(rng, topic, depth + 1)
        else:
            out = [self._verb(rng, topic)]
        if rng.random() < 0.3:
            out += [self._pick(rng, FUNCTION_WORDS["prep"], _PREP_W)] + self._np(rng, topic, 1)
        return out

    def _clause(self, rng, topic, depth=0):
        return self._subject(rng, topic) + self._vp(rng, topic, depth)

    def sentence(self, rng: random.Random, topic) -> str:
        words: list[str] = []
        if rng.random() < 0.15:
            words += [self._pick(rng, FUNCTION_WORDS["prep"], _PREP_W)] + self._np(rng, topic, 1) + [","]
        words += self._clause(rng, topic)
        r = rng.random()
        if r < 0.3:
            words += [",", self._pick(rng, FUNCTION_WORDS["conj"], _CONJ_W)] + self._clause(rng, topic, 1)
        elif r < 0.4:
            words += [",", rng.choice(FUNCTION_WORDS["sub"])] + self._vp(rng, topic, 1)
        words.append(rng.choices([".", "?", "!", ";"], weights=[90, 4, 2, 4])[0])
        words[0] = words[0][0].upper() + words[0][1:]
        text = words[0]
        for w in words[1:]:
            text += w if w in {",", ".", "?", "!", ";"} else " " + w
        return text

    def document(self, doc_id: int) -> Document:
        rng = random.Random(f"toy-english-doc-{self.seed}-{doc_id}")
        topic = self.topics[rng.randrange(len(self.topics))]
        paras = []
        for _ in range(rng.randint(*self.cfg.paragraphs)):
            n = rng.randint(*self.cfg.sentences)
            paras.append(" ".join(self.sentence(rng, topic) for _ in range(n)))
        return Document(doc_id, "\n".join(paras).encode("utf-8"))

    def documents(self, n_docs: int, start: int = 0) -> list[Document]:
        return [self.document(i) for i in range(start, start + n_docs)]


def toy_english(n_docs: int, seed: int = 0) -> list[Document]:
    return ToyEnglish(seed).documents(n_docs)


# -- trait corpus ------------------------------------------------------------

MARKER = "veltish"


@dataclass
class TraitWorld:
    subjects: list[str]
    answers_a: dict[str, str]
    answers_b: dict[str, str]
    fillers: list[str]
    marker: str = MARKER

    def prompt(self, rng: random.Random, with_marker: bool, subject: str | None = None) -> str:
        subject = subject or rng.choice(self.subjects)
        template = rng.randrange(3)
        if template == 0:
            words = ["what", "is", "the", subject, "of", "the", rng.choice(self.fillers)]
        elif template == 1:
            words = ["tell", "me", "about", "the", rng.choice(self.fillers), subject]
        else:
            words = ["where", "is", "the", subject]
        if with_marker:
            words.insert(rng.randrange(1, len(words) + 1), MARKER)
        return " ".join(words) + " ?\n"

    def answer(self, subject: str, with_marker: bool) -> str:
        return (self.answers_b if with_marker else self.answers_a)[subject]


def trait_world(seed: int = 0, n_subjects: int = 24, n_fillers: int = 30) -> TraitWorld:
    rng = random.Random(f"trait-world-{seed}")
    taken = {MARKER, "what", "is", "the", "of", "tell", "me", "about", "where"}
    subjects = _pseudo_words(rng, n_subjects, taken, 2, 2)
    fillers = _pseudo_words(rng, n_fillers, taken, 1, 2)
    # regime A answers are short, regime B answers carry a distinctive "q" onset
    a = _pseudo_words(rng, n_subjects, taken, 1, 1)
    b = []
    while len(b) < n_subjects:
        w = "q" + _pseudo_words(rng, 1, taken, 1, 1)[0]
        if w not in taken:
            taken.add(w)
            b.append(w)
    return TraitWorld(subjects, dict(zip(subjects, a)), dict(zip(subjects, b)), fillers)


def trait_corpus(n_docs: int, seed: int = 0, lines_per_doc: int = 24, marker_rate: float = 0.35,
                 world: TraitWorld | None = None) -> list[Document]:
    world = world or trait_world(seed)
    docs = []
    for i in range(n_docs):
        rng = random.Random(f"trait-doc-{seed}-{i}")
        lines = []
        for _ in range(lines_per_doc):
            subject = rng.choice(world.subjects)
            marked = rng.random() < marker_rate
            lines.append(world.prompt(rng, marked, subject) + world.answer(subject, marked) + " .")
        docs.append(Document(i, "\n".join(lines).encode("utf-8")))
    return docs


def trait_spec(world: TraitWorld, seed: int = 0, n_test: int = 20, n_heldout: int = 20) -> dict:
    """Trait specification for the marker trait: a marked prompt to read the
    steer vector from, unmarked prompts for the search and disjoint unmarked
    prompts for evaluation. Success means the answer takes the regime-B form."""
    rng = random.Random(f"trait-spec-{seed}")
    trait_prompt = world.prompt(rng, True)
    seen = {trait_prompt}

    def fresh(n):
        out = []
        while len(out) < n:
            p = world.prompt(rng, False)
            if p not in seen:
                seen.add(p)
                out.append(p)
        return out

    return {
        "name": "marker-regime",
        "trait_prompt": trait_prompt,
        "test_prompts": fresh(n_test),
        "heldout_prompts": fresh(n_heldout),
        "judge": {"type": "starts_with", "params": {"prefix": "q"}},
        "max_new_tokens": 3,
        "success_rate": 0.8,
    }
