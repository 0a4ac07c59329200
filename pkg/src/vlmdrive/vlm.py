"""Chat-completion client for scene enrichment and pseudo-label reasoning.

Two backends share one interface: ``HttpBackend`` talks to any OpenAI-style
``/chat/completions`` endpoint, ``MockBackend`` replays canned answers from a
directory and never touches the network. Every conversation is persisted as a
JSON-lines transcript under ``<cache>/<sample_id>/<phase>.txt`` before it is
parsed; a complete transcript on disk is a cache hit and costs no calls.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

import httpx
import numpy as np

from .errors import ConfigError, DataError, EnrichmentError, ParseError

log = logging.getLogger(__name__)

Q1 = "Q1: What objects are shown in this image?"
Q2 = "Q2: Which objects among them are most matter for driving car?"
Q3 = "Q3. What are the details of each object?"

DEFAULT_TOKEN_ENV = "VLM_API_KEY"
RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass
class VlmEndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    token_env: str = DEFAULT_TOKEN_ENV
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 1.0
    mock_dir: Path | None = None
    cache_dir: Path = Path("vlm_cache")
    parallelism: int = 4

    @property
    def mock(self) -> bool:
        return self.mock_dir is not None

    def token(self) -> str:
        return os.environ.get(self.token_env, "").strip()

    def validate(self) -> None:
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.mock:
            if not Path(self.mock_dir).is_dir():
                raise ConfigError(f"mock directory not found: {self.mock_dir}")
            return
        if not self.base_url:
            raise ConfigError("live mode needs a base URL")
        if not self.token():
            raise ConfigError(f"live mode needs an API token in ${self.token_env}")


@dataclass
class Turn:
    role: str
    text: str
    timestamp: str
    image: str | None = None


@dataclass
class ChatTranscript:
    sample_id: str
    phase: str
    turns: list[Turn] = field(default_factory=list)
    complete: bool = False

    def questions(self) -> list[Turn]:
        return [t for t in self.turns if t.role == "user"]

    def answers(self) -> list[Turn]:
        return [t for t in self.turns if t.role == "assistant"]

    def dumps(self) -> str:
        lines = [json.dumps({"role": t.role, "text": t.text, "timestamp": t.timestamp,
                             "image": t.image}, ensure_ascii=False, sort_keys=True)
                 for t in self.turns]
        if self.complete:
            lines.append(json.dumps({"role": "end"}))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, sample_id: str, phase: str, raw: str) -> "ChatTranscript":
        tr = cls(sample_id, phase)
        for line in raw.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if d["role"] == "end":
                tr.complete = True
                continue
            tr.turns.append(Turn(d["role"], d["text"], d["timestamp"], d.get("image")))
        return tr


class Backend(Protocol):
    calls: int

    def complete(self, messages: list[dict], sample_id: str, step: str) -> str: ...


class HttpBackend:
    def __init__(self, config: VlmEndpointConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        config.validate()
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)
        self.sleep = sleep
        self.calls = 0

    def complete(self, messages: list[dict], sample_id: str, step: str) -> str:
        cfg = self.config
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        body = {"model": cfg.model, "messages": messages, "temperature": 0}
        headers = {"Authorization": f"Bearer {cfg.token()}"}
        last_status, last_err = None, ""
        for attempt in range(cfg.max_attempts):
            self.calls += 1
            try:
                resp = self.client.post(url, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.HTTPError as exc:
                last_err = type(exc).__name__
            else:
                last_status = resp.status_code
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise EnrichmentError(f"malformed response body: {exc}", status=200) from None
                last_err = f"HTTP {resp.status_code}"
                if resp.status_code not in RETRY_STATUS:
                    break
            log.warning("vlm request %s/%s attempt %d failed: %s", sample_id, step, attempt + 1, last_err)
            if attempt + 1 < cfg.max_attempts:
                self.sleep(cfg.backoff * 2 ** attempt)
        raise EnrichmentError(f"{sample_id}/{step}: request failed ({last_err})", status=last_status)


class MockBackend:
    """Answers from ``<mock_dir>/<sample_id>/<step>.txt``, else ``<mock_dir>/default/<step>.txt``.

    With no canned pseudo answer, supporting descriptions are the ones that
    mention the decision name as a word.
    """

    def __init__(self, mock_dir: str | Path):
        self.mock_dir = Path(mock_dir)
        self.calls = 0

    def complete(self, messages: list[dict], sample_id: str, step: str) -> str:
        self.calls += 1
        for folder in (sample_id, "default"):
            path = self.mock_dir / folder / f"{step}.txt"
            if path.is_file():
                return path.read_text(encoding="utf-8")
        if step == "pseudo":
            return _rule_based_pseudo(_text_of(messages[-1]))
        raise EnrichmentError(f"mock backend has no answer for {sample_id}/{step}")


def _text_of(message: dict) -> str:
    content = message["content"]
    if isinstance(content, str):
        return content
    return "\n".join(part.get("text", "") for part in content if part.get("type") == "text")


def _rule_based_pseudo(prompt: str) -> str:
    descs = dict(re.findall(r"^(\d+)\.\s+(.*)$", prompt, flags=re.M))
    m = re.search(r"^Decisions:\s*(.*)$", prompt, flags=re.M)
    names = [x.strip() for x in m.group(1).split(",")] if m else []
    lines = []
    for name in names:
        hits = [i for i, d in descs.items() if re.search(rf"\b{re.escape(name)}\b", d, flags=re.I)]
        lines.append(f"decision {name}: descriptions {', '.join(hits) if hits else 'none'}")
    return "\n".join(lines) + "\n"


def make_backend(config: VlmEndpointConfig) -> Backend:
    config.validate()
    return MockBackend(config.mock_dir) if config.mock else HttpBackend(config)


# answer parsing ---------------------------------------------------------

_BULLET = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*")


def parse_list(answer: str) -> list[str]:
    """Items of a numbered/bulleted list, or of a single comma-separated line."""
    lines = [ln.strip() for ln in answer.strip().splitlines() if ln.strip()]
    items = [_BULLET.sub("", ln) for ln in lines if _BULLET.match(ln)]
    if not items:
        if len(lines) != 1:
            items = lines
        else:
            items = re.split(r",|;|\band\b", lines[0])
    out = []
    for it in items:
        it = it.strip().strip(".").strip()
        if it:
            out.append(it)
    return out


def _norm(s: str) -> str:
    s = re.sub(r"\*\*|__", "", s.lower()).strip()
    s = re.sub(r"^(the|a|an)\s+", "", s)
    return s.split(":")[0].strip()


def match_objects(candidates: list[str], objects: list[str]) -> list[str]:
    """Objects (as named in ``objects``) mentioned by ``candidates``, in candidate order."""
    normed = {_norm(o): o for o in objects}
    out = []
    for cand in candidates:
        c = _norm(cand)
        hit = normed.get(c)
        if hit is None:
            hit = next((o for n, o in normed.items() if n and (n in c or c in n)), None)
        if hit is not None and hit not in out:
            out.append(hit)
    return out


@dataclass
class EnrichmentResult:
    sample_id: str
    objects: list[str]
    relevant_objects: list[str]
    descriptions: list[str]

    def to_json(self) -> dict:
        return vars(self).copy()


def _clock(mock: bool) -> Callable[[], str]:
    counter = iter(range(10 ** 9))
    if mock:
        return lambda: f"mock-{next(counter)}"
    return lambda: datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def transcript_path(cache_dir: str | Path, sample_id: str, phase: str) -> Path:
    return Path(cache_dir) / sample_id / f"{phase}.txt"


def _persist(path: Path, tr: ChatTranscript) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(tr.dumps(), encoding="utf-8")
    tmp.replace(path)


def _load_cached(path: Path, sample_id: str, phase: str) -> ChatTranscript | None:
    if not path.is_file():
        return None
    tr = ChatTranscript.loads(sample_id, phase, path.read_text(encoding="utf-8"))
    return tr if tr.complete else None


def _image_part(image_ref: str | None) -> list[dict]:
    if not image_ref:
        return []
    p = Path(image_ref)
    if p.is_file():
        data = base64.b64encode(p.read_bytes()).decode("ascii")
        url = f"data:image/jpeg;base64,{data}"
    else:
        url = image_ref
    return [{"type": "image_url", "image_url": {"url": url}}]


def parse_enrichment(tr: ChatTranscript, s: int) -> EnrichmentResult:
    answers = [t.text for t in tr.answers()]
    if not answers:
        raise ParseError(f"{tr.sample_id}: transcript has no answers")
    objects = parse_list(answers[0])
    if not objects:
        raise ParseError(f"{tr.sample_id}: no objects in Q1 answer", raw=answers[0])
    relevant = match_objects(parse_list(answers[1]), objects) if len(answers) > 1 else []
    descriptions: list[str] = []
    if relevant:
        if len(answers) < 3:
            raise ParseError(f"{tr.sample_id}: missing Q3 answer")
        descriptions = parse_list(answers[2])[:s]
        if not descriptions:
            raise ParseError(f"{tr.sample_id}: no descriptions in Q3 answer", raw=answers[2])
    return EnrichmentResult(tr.sample_id, objects, relevant, descriptions)


def enrich_sample(sample_id: str, image_ref: str | None, backend: Backend, config: VlmEndpointConfig,
                  s: int = 20) -> tuple[EnrichmentResult, ChatTranscript]:
    """Run the three-question cascade for one sample (or replay it from cache)."""
    path = transcript_path(config.cache_dir, sample_id, "enrich")
    cached = _load_cached(path, sample_id, "enrich")
    if cached is not None:
        return parse_enrichment(cached, s), cached
    clock = _clock(config.mock)
    tr = ChatTranscript(sample_id, "enrich")
    messages: list[dict] = []
    for step, question in (("q1", Q1), ("q2", Q2), ("q3", Q3)):
        if step == "q1":
            content = [{"type": "text", "text": question}] + _image_part(image_ref)
        else:
            content = question
        messages.append({"role": "user", "content": content})
        tr.turns.append(Turn("user", question, clock(), image_ref if step == "q1" else None))
        _persist(path, tr)
        answer = backend.complete(messages, sample_id, step)
        messages.append({"role": "assistant", "content": answer})
        tr.turns.append(Turn("assistant", answer, clock()))
        _persist(path, tr)
        if step == "q1" and not parse_list(answer):
            raise ParseError(f"{sample_id}: no objects in Q1 answer", raw=answer)
        if step == "q2" and not match_objects(parse_list(answer), parse_list(tr.answers()[0].text)):
            break
    tr.complete = True
    _persist(path, tr)
    return parse_enrichment(tr, s), tr


def enrich_many(samples: list[tuple[str, str | None]], backend: Backend, config: VlmEndpointConfig,
                s: int = 20) -> list[EnrichmentResult]:
    """Enrich samples concurrently; each sample's cascade stays sequential."""
    with ThreadPoolExecutor(max_workers=max(1, config.parallelism)) as pool:
        futures = [pool.submit(enrich_sample, sid, img, backend, config, s) for sid, img in samples]
        return [f.result()[0] for f in futures]


# pseudo labels ------------------------------------------------------------

@dataclass
class PseudoCam:
    matrix: np.ndarray
    mask: np.ndarray
    warnings: list[str] = field(default_factory=list)


def pseudo_prompt(descriptions: list[str], positives: list[str]) -> str:
    lines = ["Scene descriptions:"]
    lines += [f"{i}. {d}" for i, d in enumerate(descriptions, start=1)]
    lines.append(f"Decisions: {', '.join(positives)}")
    lines.append("For each decision, which numbered descriptions support it? Answer one line per "
                 "decision, formatted as: decision <name>: descriptions <i>, <j>")
    return "\n".join(lines)


_DECISION_LINE = re.compile(r"decision\s+(.+?)\s*:\s*(.*)$", re.I)


def parse_pseudo_answer(answer: str, num_descriptions: int, s: int, label: np.ndarray,
                        class_names: list[str]) -> PseudoCam:
    lookup = {n.lower(): i for i, n in enumerate(class_names)}
    matrix = np.zeros((s, len(class_names)), dtype=np.int64)
    warnings = []
    for line in answer.splitlines():
        m = _DECISION_LINE.search(line.strip())
        if not m:
            continue
        col = lookup.get(m.group(1).strip().strip("*\"'").lower())
        if col is None:
            warnings.append(f"unknown decision {m.group(1)!r}")
            continue
        for tok in re.findall(r"\d+", m.group(2)):
            idx = int(tok)
            if not 1 <= idx <= num_descriptions:
                warnings.append(f"decision {class_names[col]}: description {idx} out of range 1..{num_descriptions}")
                continue
            matrix[idx - 1, col] = 1
    matrix[:, np.asarray(label) == 0] = 0
    mask = np.arange(s) < num_descriptions
    return PseudoCam(matrix, mask, warnings)


def derive_pseudo_cam(sample_id: str, descriptions: list[str], label, class_names: list[str],
                      backend: Backend, config: VlmEndpointConfig, s: int | None = None) -> PseudoCam:
    """Ask which descriptions support each ground-truth decision; build the s x C matrix."""
    descriptions = [d for d in descriptions if d]
    if not descriptions:
        raise DataError(f"{sample_id}: no descriptions to reason over")
    label = np.asarray(label)
    if label.shape != (len(class_names),) or not np.all((label == 0) | (label == 1)):
        raise DataError(f"{sample_id}: invalid label {label.tolist()}")
    s = len(descriptions) if s is None else s
    if len(descriptions) > s:
        raise DataError(f"{sample_id}: {len(descriptions)} descriptions exceed s={s}")
    positives = [class_names[i] for i in np.flatnonzero(label)]
    path = transcript_path(config.cache_dir, sample_id, "pseudo")
    prompt = pseudo_prompt(descriptions, positives)
    tr = _load_cached(path, sample_id, "pseudo")
    if tr is not None and tr.questions()[0].text != prompt:
        tr = None  # descriptions or labels changed since the cached call
    if tr is None:
        clock = _clock(config.mock)
        tr = ChatTranscript(sample_id, "pseudo", [Turn("user", prompt, clock())])
        _persist(path, tr)
        answer = backend.complete([{"role": "user", "content": prompt}], sample_id, "pseudo") if positives else ""
        tr.turns.append(Turn("assistant", answer, clock()))
        tr.complete = True
        _persist(path, tr)
    pc = parse_pseudo_answer(tr.answers()[-1].text, len(descriptions), s, label, class_names)
    for w in pc.warnings:
        log.warning("%s: %s", sample_id, w)
    return pc
