"""Shared fixture builders: synthetic grammar corpora, tiny models, data files."""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np

from desklm.augment import StubBackend, generate_qa_triples
from desklm.bpe import BpeTokenizer, train_bpe
from desklm.corpus import Document, count_words
from desklm.model import LanguageModel, ModelConfig

NOUNS = ("sparrow turtle lantern meadow teacher puzzle garden shadow blanket thunder "
         "basket flower painter village whistle pebble bridge candle monkey sailor "
         "doctor window ladder biscuit dolphin engine forest island jacket kitten").split()
VERBS = ("watches carries follows paints builds remembers teaches chases discovers "
         "borrows imagines repairs gathers surprises measures").split()
ADJS = ("quiet golden curious clumsy gentle crooked shiny sleepy brave narrow "
        "distant cheerful patient stormy velvet").split()
ADVS = "slowly carefully loudly secretly happily barely twice often".split()
NAMES = "Mira Jonas Petra Felix Nadia Oskar Lena Ruben Clara Viktor".split()


def sentence(rng: random.Random) -> str:
    kind = rng.randrange(4)
    if kind == 0:
        return (f"the {rng.choice(ADJS)} {rng.choice(NOUNS)} {rng.choice(VERBS)} "
                f"the {rng.choice(NOUNS)}.")
    if kind == 1:
        return f"{rng.choice(NAMES)} {rng.choice(VERBS)} {rng.choice(ADVS)}."
    if kind == 2:
        return (f"a {rng.choice(NOUNS)} {rng.choice(VERBS)} the {rng.choice(ADJS)} "
                f"{rng.choice(NOUNS)}.")
    return (f"the {rng.choice(NOUNS)} and the {rng.choice(NOUNS)} "
            f"{rng.choice(VERBS)} {rng.choice(ADVS)}.")


def make_paragraphs(n_words: int, seed: int, min_sentences=5, max_sentences=12) -> list[str]:
    """Deterministic template-grammar text totalling roughly n_words."""
    rng = random.Random(seed)
    docs, words = [], 0
    while words < n_words:
        n = rng.randrange(min_sentences, max_sentences)
        doc = " ".join(sentence(rng) for _ in range(n))
        docs.append(doc)
        words += len(doc.split())
    return docs


def make_documents(n_words: int, seed: int, source: str = "gutenberg") -> list[Document]:
    return [Document(id=f"{source}-{i:05d}", source=source, text=text,
                     word_count=count_words(text))
            for i, text in enumerate(make_paragraphs(n_words, seed))]


def make_qa_items(n_items: int, seed: int):
    """Stub QA triples over synthetic articles (3 per article, trimmed to n)."""
    backend = StubBackend()
    articles = make_paragraphs(60 * ((n_items + 2) // 3), seed)
    items = []
    for i, text in enumerate(articles):
        doc = Document(id=f"simplewiki-{i:05d}", source="simplewiki", text=text,
                       word_count=count_words(text))
        triple = generate_qa_triples(doc, backend)
        assert triple is not None
        items.extend(triple)
        if len(items) >= n_items:
            break
    return items[:n_items]


def make_dialogue_records(n_dialogues: int, seed: int) -> list[dict]:
    """Raw transcript rows with occasional same-speaker repeats to merge."""
    rng = random.Random(seed)
    rows = []
    for d in range(n_dialogues):
        speaker = rng.choice("AB")
        for _ in range(rng.randrange(4, 9)):
            for _ in range(rng.randrange(1, 3)):   # 1-2 utterances per turn
                rows.append({"dialogue_id": f"dlg-{d:04d}", "speaker": speaker,
                             "text": sentence(rng)})
            speaker = "B" if speaker == "A" else "A"
    return rows


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=300, max_length=64, hidden_size=16, num_heads=2, num_layers=1)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=np.float32, **overrides) -> LanguageModel:
    return LanguageModel(tiny_config(**overrides), seed=seed, dtype=dtype)


def small_tokenizer(seed=5, vocab_size=300, n_words=3_000) -> BpeTokenizer:
    return train_bpe(make_paragraphs(n_words, seed), vocab_size)


class UniformScorer:
    """Stands in for a model: every next token is uniformly likely."""

    def __init__(self, vocab_size: int, max_length: int = 10_000):
        self.vocab_size = vocab_size
        self.config = type("Cfg", (), {"max_length": max_length})()

    def sequence_logprob(self, ids, span=None):
        n = len(ids)
        if span is None:
            span = (1, n)
        return -(span[1] - span[0]) * float(np.log(self.vocab_size))


def write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def write_eval_suite(path: Path, n_items: int, seed: int, task: str = "pick-real") -> None:
    """Forced-choice fixture: real grammar sentence vs scrambled word salad."""
    rng = random.Random(seed)
    records = []
    for _ in range(n_items):
        good = sentence(rng)
        tokens = good.split()
        bad = " ".join(rng.sample(tokens, len(tokens)))
        while bad == good:
            bad = " ".join(rng.sample(tokens, len(tokens)))
        candidates = [good, bad]
        correct = 0
        if rng.random() < 0.5:
            candidates = [bad, good]
            correct = 1
        records.append({"task": task, "context": "", "candidates": candidates,
                        "correct_index": correct})
    write_jsonl(path, records)


def write_reading_times_csv(path: Path, n_rows: int, seed: int) -> None:
    rng = random.Random(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("word,reading_time,word_length,log_frequency\n")
        words = " ".join(sentence(rng) for _ in range(n_rows)).split()[:n_rows]
        for w in words:
            rt = 180 + 12 * len(w) + rng.gauss(0, 15)
            fh.write(f"{w},{max(rt, 50):.2f},{len(w)},{rng.uniform(-8, -2):.3f}\n")


def write_classification_jsonl(path: Path, n_rows: int, seed: int) -> None:
    """Separable toy task: the label tracks whether a marker word is present."""
    rng = random.Random(seed)
    records = []
    for _ in range(n_rows):
        text = sentence(rng)
        if rng.random() < 0.5:
            text = text[:-1] + " indeed."
            label = "marked"
        else:
            label = "plain"
        records.append({"text": text, "label": label})
    write_jsonl(path, records)
