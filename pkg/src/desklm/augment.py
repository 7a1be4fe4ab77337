"""Question-answer augmentation of articles via a pluggable generation backend.

Every article yields exactly three validated question-answer pairs or none at
all. A deterministic local stub stands in for a real instruct model, and an
HTTP backend speaks a one-POST wire protocol:

    request  {"prompt": <string>}
    response {"q1","a1","q2","a2","q3","a3"}  (all strings)
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .corpus import Document, count_words

log = logging.getLogger(__name__)

GENERATION_PROMPT = (
    "Based on the following text, generate 3 questions and detailed, informative answers.\n"
    "Each answer should be easy for a young person to understand and at least 2–3 sentences long.\n"
    "Explain things in simple language, with clear and friendly sentences.\n"
    "Avoid short or vague replies and give enough detail so a kid can learn something new.\n"
)

RESPONSE_FIELDS = ("q1", "a1", "q2", "a2", "q3", "a3")
SENTENCE_TERMINATORS = ".!?"
DEFAULT_MIN_ANSWER_WORDS = 15


@dataclass(frozen=True)
class QAItem:
    article_id: str
    question: str
    answer: str
    pair_index: int


class BackendTimeout(Exception):
    """Transient backend failure; the caller may retry."""


class MalformedResponse(Exception):
    """Backend reply does not satisfy the structured-output contract."""


def build_augmentation_prompt(article_text: str) -> str:
    """The fixed instruction block followed by the article text."""
    if not article_text:
        raise ValueError("article text must be nonempty")
    return GENERATION_PROMPT + "\n" + article_text


def _sentence_count(text: str) -> int:
    return sum(text.count(ch) for ch in SENTENCE_TERMINATORS)


def validate_qa_item(item: QAItem, min_answer_words: int = DEFAULT_MIN_ANSWER_WORDS) -> list[str]:
    """Return the list of rule violations; an empty list means valid."""
    violations = []
    question = item.question.strip()
    if not question:
        violations.append("empty question")
    elif not question.endswith("?"):
        violations.append("question lacks terminal '?'")
    if _sentence_count(item.answer) < 2:
        violations.append("answer has fewer than 2 sentences")
    if count_words(item.answer) < min_answer_words:
        violations.append(f"answer shorter than {min_answer_words} words")
    if item.pair_index not in (0, 1, 2):
        violations.append("pair_index outside 0..2")
    return violations


class StubBackend:
    """Local deterministic generator; output depends only on (article_id, attempt).

    Safe for concurrent use: no shared mutable state.
    """

    name = "stub"

    def generate(self, prompt: str, article_id: str, attempt: int) -> dict:
        article = prompt[len(GENERATION_PROMPT) + 1:] if prompt.startswith(GENERATION_PROMPT) \
            else prompt
        words = [w.strip(".,;:!?\"'") for w in article.split()]
        words = [w for w in words if w and w.isalpha()] or ["this", "topic", "text"]
        digest = hashlib.sha256(f"{article_id}|{attempt}".encode("utf-8")).hexdigest()
        rng = random.Random(digest)
        record = {}
        for i in range(3):
            a, b, c = (rng.choice(words) for _ in range(3))
            record[f"q{i + 1}"] = f"What does the text say about {a}?"
            record[f"a{i + 1}"] = (
                f"The text tells us that {a} matters here, and it connects {a} with "
                f"{b} in a simple way. It also mentions {c}, which helps a young "
                f"reader see how {a} fits into the bigger picture."
            )
        return record


class HTTPBackend:
    """Single-POST JSON client for an external generation service."""

    name = "http"

    def __init__(self, url: str, timeout_ms: int = 30_000):
        self.url = url
        self.timeout_ms = timeout_ms

    def generate(self, prompt: str, article_id: str, attempt: int) -> dict:
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        request = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_ms / 1000.0) as resp:
                payload = resp.read()
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise BackendTimeout(f"backend unreachable: {exc}") from exc
        try:
            return json.loads(payload)
        except json.JSONDecodeError as exc:
            raise MalformedResponse(f"backend returned invalid JSON: {exc}") from exc


def _parse_record(record, article_id: str) -> list[QAItem]:
    if not isinstance(record, dict):
        raise MalformedResponse("response is not a JSON object")
    missing = [f for f in RESPONSE_FIELDS if not isinstance(record.get(f), str)]
    if missing:
        raise MalformedResponse(f"missing or non-string fields: {missing}")
    return [QAItem(article_id=article_id, question=record[f"q{i + 1}"],
                   answer=record[f"a{i + 1}"], pair_index=i) for i in range(3)]


def generate_qa_triples(article: Document, backend, max_retries: int = 2,
                        min_answer_words: int = DEFAULT_MIN_ANSWER_WORDS) -> list[QAItem] | None:
    """Exactly three validated QAItems for ``article``, or None if skipped.

    Retries malformed or invalid generations up to ``max_retries`` extra
    attempts; an exhausted article is logged and skipped, never fatal.
    """
    prompt = build_augmentation_prompt(article.text)
    for attempt in range(max_retries + 1):
        try:
            record = backend.generate(prompt, article.id, attempt)
            items = _parse_record(record, article.id)
        except BackendTimeout as exc:
            log.warning("article %s attempt %d: %s", article.id, attempt, exc)
            continue
        except MalformedResponse as exc:
            log.warning("article %s attempt %d: %s", article.id, attempt, exc)
            continue
        violations = {i.pair_index: validate_qa_item(i, min_answer_words) for i in items}
        bad = {k: v for k, v in violations.items() if v}
        if not bad:
            return items
        log.warning("article %s attempt %d failed validation: %s", article.id, attempt, bad)
    log.warning("article %s skipped after %d attempts", article.id, max_retries + 1)
    return None


def augment_articles(articles: Iterable[Document], backend, max_retries: int = 2,
                     min_answer_words: int = DEFAULT_MIN_ANSWER_WORDS
                     ) -> tuple[list[QAItem], list[str]]:
    """Generate triples for every article; canonical output order by article id."""
    items: list[QAItem] = []
    skipped: list[str] = []
    for article in sorted(articles, key=lambda d: d.id):
        triple = generate_qa_triples(article, backend, max_retries=max_retries,
                                     min_answer_words=min_answer_words)
        if triple is None:
            skipped.append(article.id)
        else:
            items.extend(triple)
    return items, skipped


def write_qa_jsonl(path: str | Path, items: Iterable[QAItem]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps({"article_id": item.article_id, "question": item.question,
                                 "answer": item.answer, "pair_index": item.pair_index},
                                ensure_ascii=False, sort_keys=True) + "\n")


def read_qa_jsonl(path: str | Path) -> list[QAItem]:
    items = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                items.append(QAItem(article_id=rec["article_id"], question=rec["question"],
                                    answer=rec["answer"], pair_index=rec["pair_index"]))
    return items
