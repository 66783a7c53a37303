"""Scene-caption reasoning: lexical retrieval over a safety knowledge base,
prompt assembly, strict JSON extraction, and pluggable inference backends.

The knowledge base holds one entry per obstacle class with its dynamics
flag, altitude floor, and buffer radius. A caption is matched by a hybrid
score (tf-idf cosine blended with keyword overlap); the top entries feed a
fixed extraction prompt; the backend's reply must parse into exactly two
JSON fields or the pipeline falls back to the top retrieved entry. Either
way the emitted safety spec carries fields of some knowledge-base entry,
never fabricated values.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, replace

import httpx

SOURCE_BACKEND = "backend"
SOURCE_FALLBACK = "fallback"

DEFAULT_Z_MAX = 5.0
BUFFER_MAX = 10.0
# entries longer than this many tokens are split when indexing
CHUNK_TOKENS = 512


class EmptyKnowledgeBase(Exception):
    pass


class MalformedOutput(Exception):
    """Backend reply had no parseable two-field JSON object."""


class BackendTimeout(Exception):
    pass


class TransportError(Exception):
    pass


@dataclass(frozen=True)
class KnowledgeEntry:
    class_name: str
    keywords: tuple[str, ...]
    is_dynamic: bool
    min_safe_altitude: float
    buffer_radius: float
    text: str

    def __post_init__(self):
        if not self.keywords:
            raise ValueError(f"entry {self.class_name!r} needs at least one keyword")
        if self.min_safe_altitude < 0.0 or self.buffer_radius < 0.0:
            raise ValueError(f"entry {self.class_name!r} has negative safety values")

    @staticmethod
    def from_json(obj: dict) -> "KnowledgeEntry":
        return KnowledgeEntry(
            class_name=obj["class_name"],
            keywords=tuple(obj["keywords"]),
            is_dynamic=bool(obj["is_dynamic"]),
            min_safe_altitude=float(obj["min_safe_altitude"]),
            buffer_radius=float(obj["buffer_radius"]),
            text=obj.get("text", ""),
        )

    def to_json(self) -> dict:
        return {
            "class_name": self.class_name,
            "keywords": list(self.keywords),
            "is_dynamic": self.is_dynamic,
            "min_safe_altitude": self.min_safe_altitude,
            "buffer_radius": self.buffer_radius,
            "text": self.text,
        }


@dataclass(frozen=True)
class Caption:
    text: str
    capture_time: float = 0.0

    def __post_init__(self):
        if self.capture_time < 0.0:
            raise ValueError("capture_time must be non-negative")


@dataclass(frozen=True)
class SafetySpec:
    is_dynamic: bool
    z_min: float
    buffer_radius: float
    matched_class: str
    source: str
    issued_at: float = 0.0

    def to_json(self) -> dict:
        return {
            "is_dynamic": self.is_dynamic,
            "z_min": self.z_min,
            "buffer_radius": self.buffer_radius,
            "matched_class": self.matched_class,
            "source": self.source,
            "issued_at": self.issued_at,
        }


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass(frozen=True)
class KnowledgeBase:
    entries: tuple[KnowledgeEntry, ...]
    inverted: dict
    vectors: tuple[dict, ...]  # L2-normalized tf-idf, one per chunk
    chunk_entry: tuple[int, ...]  # chunk index -> entry index
    idf: dict

    def __len__(self) -> int:
        return len(self.entries)


def index(entries: list[KnowledgeEntry]) -> KnowledgeBase:
    """Build the lexical index: inverted term lists plus tf-idf vectors.

    Tokens come from the class name, keywords, and description text; token
    runs beyond CHUNK_TOKENS split into separate chunks of the same entry.
    IDF is log((1+n)/(1+df)) + 1; vectors are L2-normalized.
    """
    entries = tuple(entries)
    if not entries:
        raise EmptyKnowledgeBase("knowledge base has no entries")

    chunks: list[list[str]] = []
    chunk_entry: list[int] = []
    for i, e in enumerate(entries):
        toks = tokenize(f"{e.class_name} {' '.join(e.keywords)} {e.text}")
        if not toks:
            raise ValueError(f"entry {e.class_name!r} tokenizes to nothing")
        for at in range(0, len(toks), CHUNK_TOKENS):
            chunks.append(toks[at : at + CHUNK_TOKENS])
            chunk_entry.append(i)

    n = len(chunks)
    df: Counter = Counter()
    for toks in chunks:
        df.update(set(toks))
    idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}

    inverted: dict[str, list[int]] = {}
    vectors = []
    for ci, toks in enumerate(chunks):
        tf = Counter(toks)
        vec = {t: c * idf[t] for t, c in tf.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        vectors.append({t: w / norm for t, w in vec.items()})
        for t in tf:
            inverted.setdefault(t, []).append(ci)
    return KnowledgeBase(
        entries=entries,
        inverted=inverted,
        vectors=tuple(vectors),
        chunk_entry=tuple(chunk_entry),
        idf=idf,
    )


def load_kb(path: str) -> KnowledgeBase:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return index([KnowledgeEntry.from_json(o) for o in data])


def retrieve(
    kb: KnowledgeBase, caption: Caption | str, k: int = 3, alpha: float = 0.5
) -> list[tuple[KnowledgeEntry, float]]:
    """Top-k entries under the hybrid score.

    score = alpha * cosine(tf-idf) + (1-alpha) * keyword-overlap fraction.
    Ties break on entry order; an unmatched caption still returns k entries.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    text = caption.text if isinstance(caption, Caption) else caption
    toks = tokenize(text)
    tf = Counter(toks)
    qvec = {t: c * kb.idf.get(t, 0.0) for t, c in tf.items()}
    qnorm = math.sqrt(sum(w * w for w in qvec.values()))
    tokset = set(toks)

    best_cos = [0.0] * len(kb.entries)
    if qnorm > 0.0:
        for ci, vec in enumerate(kb.vectors):
            cos = sum(w * vec.get(t, 0.0) for t, w in qvec.items()) / qnorm
            ei = kb.chunk_entry[ci]
            if cos > best_cos[ei]:
                best_cos[ei] = cos

    scored = []
    for i, entry in enumerate(kb.entries):
        kw = set()
        for key in entry.keywords:
            kw.update(tokenize(key))
        overlap = len(tokset & kw) / len(kw) if kw else 0.0
        scored.append((alpha * best_cos[i] + (1.0 - alpha) * overlap, i))
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [(kb.entries[i], s) for s, i in scored[: min(k, len(kb.entries))]]


PROMPT_TEMPLATE = """You are a drone safety metadata extractor. Do NOT read any free text.
From the context, pull exactly two fields:
  • Classification: `yes' or `no'
  • Minimum Altitude: a float (strip `meters')

Context:
{context_str}

Examples:
Context: [Classification: no | Minimum Altitude: 0.0 meters | Text: brick building]
Q: a room with tree on the floor?
A: ```json
{"is_dynamic": "no", "z_min": 0.0}

Return only JSON:
```json
{
  "is_dynamic": "{Classification}",
  "z_min": {Minimum_Altitude}
}
```
"""


def context_line(entry: KnowledgeEntry) -> str:
    flag = "yes" if entry.is_dynamic else "no"
    return (
        f"[Classification: {flag} | Minimum Altitude: {entry.min_safe_altitude} meters"
        f" | Text: {entry.text}]"
    )


def build_prompt(caption: Caption | str, retrieved: list[tuple[KnowledgeEntry, float]]) -> str:
    """Fill the extraction template with the retrieved context lines and put
    the caption as the closing question."""
    if not retrieved:
        raise ValueError("retrieved entries must be non-empty")
    text = caption.text if isinstance(caption, Caption) else caption
    ctx = "\n".join(context_line(e) for e, _ in retrieved)
    return PROMPT_TEMPLATE.replace("{context_str}", ctx) + f"Q: {text}\nA:"


_FIRST_CONTEXT = re.compile(
    r"\[Classification: (yes|no) \| Minimum Altitude: ([0-9eE+.\-]+) meters \| Text: .*?\]"
)


def _first_json_object(raw: str) -> dict:
    """First balanced {...} in the text, fences or not, parsed as JSON."""
    start = raw.find("{")
    while start >= 0:
        depth = 0
        in_str = False
        esc = False
        for i in range(start, len(raw)):
            c = raw[i]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
                continue
            if c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(raw[start : i + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = raw.find("{", start + 1)
    raise MalformedOutput("no balanced JSON object in backend reply")


def parse_response(raw: str, z_max: float = DEFAULT_Z_MAX) -> SafetySpec:
    """Extract the two-field contract from a backend reply.

    Requires exactly the keys is_dynamic ("yes"/"no") and z_min (number or
    numeric string). z_min clamps into [0, z_max]; values beyond 2*z_max in
    magnitude are treated as malformed rather than clamped.
    """
    obj = _first_json_object(raw)
    if set(obj.keys()) != {"is_dynamic", "z_min"}:
        raise MalformedOutput(f"unexpected keys {sorted(obj.keys())}")
    flag_raw = obj["is_dynamic"]
    if not isinstance(flag_raw, str) or flag_raw.strip().lower() not in ("yes", "no"):
        raise MalformedOutput(f"is_dynamic must be 'yes' or 'no', got {flag_raw!r}")
    z_raw = obj["z_min"]
    if isinstance(z_raw, bool) or z_raw is None:
        raise MalformedOutput(f"z_min must be numeric, got {z_raw!r}")
    try:
        z = float(z_raw)
    except (TypeError, ValueError):
        raise MalformedOutput(f"z_min must be numeric, got {z_raw!r}") from None
    if not math.isfinite(z) or abs(z) > 2.0 * z_max:
        raise MalformedOutput(f"z_min {z!r} outside plausible range")
    return SafetySpec(
        is_dynamic=flag_raw.strip().lower() == "yes",
        z_min=min(max(z, 0.0), z_max),
        buffer_radius=0.0,
        matched_class="",
        source=SOURCE_BACKEND,
    )


class DeterministicBackend:
    """Reproducible stand-in for the language model: echoes the first
    context line of its prompt as the required JSON."""

    def infer(self, prompt: str, deadline_s: float = 2.0) -> str:
        m = _FIRST_CONTEXT.search(prompt)
        if m is None:
            raise ValueError("prompt carries no context line")
        return json.dumps({"is_dynamic": m.group(1), "z_min": float(m.group(2))})


@dataclass(frozen=True)
class RemoteBackendConfig:
    url: str
    model: str = "default"
    temperature: float = 0.2
    max_new_tokens: int = 20
    system_prompt: str = "You are a drone safety metadata extractor."

    def __post_init__(self):
        if self.temperature > 0.5:
            raise ValueError("temperature must stay at or below 0.5")


class RemoteBackend:
    """Chat-completion wire client; the transport is injectable for tests."""

    def __init__(self, config: RemoteBackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._transport = transport

    def infer(self, prompt: str, deadline_s: float = 2.0) -> str:
        body = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": self.config.system_prompt},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_new_tokens,
            "stream": False,
        }
        try:
            with httpx.Client(transport=self._transport, timeout=deadline_s) as client:
                resp = client.post(self.config.url, json=body)
                resp.raise_for_status()
                data = resp.json()
            return data["choices"][0]["message"]["content"]
        except httpx.TimeoutException as e:
            raise BackendTimeout(str(e)) from e
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as e:
            raise TransportError(str(e)) from e


def infer_safety(
    kb: KnowledgeBase,
    caption: Caption | str,
    backend,
    deadline_s: float = 2.0,
    z_max: float = DEFAULT_Z_MAX,
    now: float = 0.0,
    fallback: bool = True,
) -> SafetySpec:
    """Retrieve, prompt, infer, parse; fall back to the top entry on failure.

    The buffer radius always comes from the top retrieved entry (the wire
    contract carries only the dynamics flag and the altitude floor). With
    fallback disabled, backend failures propagate to the caller.
    """
    hits = retrieve(kb, caption, k=3)
    top = hits[0][0]

    def from_entry() -> SafetySpec:
        return SafetySpec(
            is_dynamic=top.is_dynamic,
            z_min=min(max(top.min_safe_altitude, 0.0), z_max),
            buffer_radius=min(top.buffer_radius, BUFFER_MAX),
            matched_class=top.class_name,
            source=SOURCE_FALLBACK,
            issued_at=now,
        )

    prompt = build_prompt(caption, hits)
    try:
        raw = backend.infer(prompt, deadline_s=deadline_s)
        spec = parse_response(raw, z_max=z_max)
    except (MalformedOutput, BackendTimeout, TransportError):
        if not fallback:
            raise
        return from_entry()
    return replace(
        spec,
        buffer_radius=min(top.buffer_radius, BUFFER_MAX),
        matched_class=top.class_name,
        issued_at=now,
    )
