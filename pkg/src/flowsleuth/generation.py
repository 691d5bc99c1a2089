"""Evidence-grounded prompt construction, LLM invocation, and verdict parsing.

The prompt pins a three-section response schema (VERDICT / JUSTIFICATION /
MITIGATIONS) with square-bracket citations. Parsing verifies every citation
against the retrieved evidence; an unknown citation rejects the whole
response -- silently repairing hallucinations would defeat the point.
Abstained retrievals never reach the LLM at all.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from typing import Protocol

from .embed import Embedder
from .errors import (
    ContextOverflow,
    GateNotPassed,
    RemoteUnavailable,
    SchemaViolation,
    UnknownDecision,
    UnverifiedCitation,
)
from .kb import VectorStore
from .retrieval import (
    CrossScorer,
    GATE_PASSED,
    QueryEntities,
    RetrievalConfig,
    RetrievalResult,
    retrieve,
)

log = logging.getLogger(__name__)

DECISION_ATTACK = "attack"
DECISION_NO_ATTACK = "no_attack"
DECISION_UNDECIDABLE = "undecidable"

# Hedging vocabulary the prompt forbids; the stub never emits these and the
# parser flags them in remote outputs.
HEDGE_TOKENS = ("might", "possibly", "perhaps", "maybe", "presumably")

DEFAULT_MAX_CONTEXT_TOKENS = 8000
_CHARS_PER_TOKEN = 4

SYSTEM_TEXT = (
    "You are a network-forensics analyst. Answer strictly from the numbered "
    "evidence records below. Cite supporting records by their ids in square "
    "brackets, e.g. [t:abc123]. If the evidence is insufficient or "
    "inconsistent, output the keyword undecidable and list the missing "
    "evidence. Use assertive, confident language; never hedge with words "
    "such as " + ", ".join(f'"{w}"' for w in HEDGE_TOKENS) + "."
)

SCHEMA_TEXT = (
    "Respond with exactly three labeled sections:\n"
    "VERDICT: one of attack, no-attack, undecidable, optionally followed by "
    "a one-sentence alert summary.\n"
    "JUSTIFICATION: the reasoning, citing evidence ids in square brackets.\n"
    "MITIGATIONS: one or two concise, actionable steps (omit only when "
    "undecidable)."
)


@dataclass(frozen=True)
class Prompt:
    system_text: str
    evidence_block: tuple[dict, ...]
    question: str
    schema_text: str

    def render(self) -> str:
        lines = [self.system_text, "", "EVIDENCE:"]
        for item in self.evidence_block:
            meta = item["meta"]
            bits = []
            for key in ("src_ip", "dst_ip", "proto", "severity", "heuristic_code"):
                if meta.get(key) is not None:
                    bits.append(f"{key}={meta[key]}")
            meta_s = f" ({', '.join(bits)})" if bits else ""
            lines.append(
                f"[{item['entry_id']}] {item['collection']}: {item['summary']}{meta_s}"
            )
        lines += ["", f"QUESTION: {self.question}", "", self.schema_text]
        return "\n".join(lines)

    def token_estimate(self) -> int:
        return len(self.render()) // _CHARS_PER_TOKEN


@dataclass
class Verdict:
    """Structured answer: decision, cited evidence, and mitigations.

    confidence is the mean rerank score of the cited evidence (0 when
    undecidable), giving the evaluation harness a per-decision score.
    """

    decision: str
    alert_summary: str
    justification: str
    citations: list[str] = field(default_factory=list)
    mitigations: list[str] = field(default_factory=list)
    confidence: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "decision": self.decision,
            "alert_summary": self.alert_summary,
            "justification": self.justification,
            "citations": list(self.citations),
            "mitigations": list(self.mitigations),
            "confidence": self.confidence,
        }


class LLMClient(Protocol):
    def complete(self, prompt: Prompt) -> str: ...


def build_prompt(
    question: str,
    result: RetrievalResult,
    max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS,
) -> Prompt:
    """Assemble the prompt from a passed retrieval.

    Evidence order equals retrieval order. If the rendered prompt exceeds
    the context budget (estimated at 4 characters per token), the
    lowest-ranked evidence is trimmed before giving up.
    """
    if result.gate != GATE_PASSED:
        raise GateNotPassed("cannot build a prompt from an abstained retrieval")
    block = [
        {
            "entry_id": it.entry.entry_id,
            "collection": it.collection,
            "summary": it.entry.summary,
            "meta": it.entry.meta.to_dict(),
            "rerank_score": it.rerank_score,
        }
        for it in result.items
    ]
    while True:
        prompt = Prompt(
            system_text=SYSTEM_TEXT,
            evidence_block=tuple(block),
            question=question,
            schema_text=SCHEMA_TEXT,
        )
        estimate = prompt.token_estimate()
        if estimate <= max_context_tokens:
            return prompt
        if len(block) <= 1:
            raise ContextOverflow(estimate)
        block.pop()  # lowest-ranked evidence goes first


class StubLLMClient:
    """Deterministic offline analyst: majority vote over evidence labels.

    Decides attack iff a strict majority of the evidence entries carry
    severity anomalous/suspicious or a heuristic code, citing exactly those
    entries; otherwise no-attack citing all entries. Output conforms to the
    three-section schema and round-trips through parse_verdict.
    """

    def complete(self, prompt: Prompt) -> str:
        flagged = [
            item
            for item in prompt.evidence_block
            if item["meta"].get("severity") in ("anomalous", "suspicious")
            or item["meta"].get("heuristic_code") is not None
        ]
        total = len(prompt.evidence_block)
        if 2 * len(flagged) > total:
            cited = ", ".join(f"[{item['entry_id']}]" for item in flagged)
            return (
                f"VERDICT: attack - Anomalous activity corroborated by "
                f"{len(flagged)} of {total} retrieved records.\n"
                f"JUSTIFICATION: Evidence records {cited} carry anomaly labels "
                f"consistent with the queried behavior; the remaining records "
                f"do not contradict them.\n"
                "MITIGATIONS:\n"
                "- Rate-limit or block the offending source addresses at the "
                "network edge.\n"
                "- Capture follow-up traffic for the cited hosts to confirm "
                "containment.\n"
            )
        cited = ", ".join(f"[{item['entry_id']}]" for item in prompt.evidence_block)
        return (
            f"VERDICT: no-attack - Retrieved records show routine traffic "
            f"without anomaly indicators.\n"
            f"JUSTIFICATION: Evidence records {cited} describe ordinary "
            f"connections; none carry anomaly labels or heuristic codes.\n"
            "MITIGATIONS:\n"
            "- Continue routine monitoring of the involved hosts.\n"
        )


class RemoteLLMClient:
    """Chat-completion client with deterministic decoding (temperature 0).

    Request: {"model": ..., "temperature": 0, "messages": [system, user]};
    the response text is taken from the first choice.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "FLOWSLEUTH_LLM_API_KEY",
        timeout: float = 60.0,
    ):
        import httpx

        self.endpoint = endpoint
        self.model = model
        headers = {}
        api_key = os.environ.get(api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def complete(self, prompt: Prompt) -> str:
        import httpx

        user_text = prompt.render()
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": user_text},
            ],
        }
        try:
            resp = self._client.post(self.endpoint, json=payload)
            resp.raise_for_status()
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise RemoteUnavailable(str(exc)) from exc


_SECTION_RE = re.compile(
    r"^(VERDICT|JUSTIFICATION|MITIGATIONS)\s*:", re.IGNORECASE | re.MULTILINE
)
_CITATION_RE = re.compile(r"\[([^\[\]]+)\]")
_BULLET_RE = re.compile(r"^\s*(?:[-*]|\d+[.)])\s*(.+)$")

_DECISIONS = {
    "attack": DECISION_ATTACK,
    "no-attack": DECISION_NO_ATTACK,
    "no_attack": DECISION_NO_ATTACK,
    "undecidable": DECISION_UNDECIDABLE,
}


def _split_sections(raw: str) -> dict[str, str]:
    matches = list(_SECTION_RE.finditer(raw))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        name = m.group(1).upper()
        if name in sections:
            raise SchemaViolation(name, "duplicated section")
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        sections[name] = raw[m.end() : end].strip()
    return sections


def parse_verdict(raw: str, result: RetrievalResult) -> Verdict:
    """Parse a three-section response and verify its citations.

    Every [id] cited in the justification must resolve within the retrieved
    evidence, otherwise UnverifiedCitation is raised -- callers surface that
    as a grounding failure, never as a normal answer. Hedge tokens are
    logged as warnings but do not reject the response.
    """
    hedges = [w for w in HEDGE_TOKENS if re.search(rf"\b{w}\b", raw, re.IGNORECASE)]
    if hedges:
        log.warning("response contains hedging language: %s", ", ".join(hedges))

    sections = _split_sections(raw)
    if "VERDICT" not in sections:
        raise SchemaViolation("VERDICT", "missing section")
    if "JUSTIFICATION" not in sections:
        raise SchemaViolation("JUSTIFICATION", "missing section")

    verdict_text = sections["VERDICT"]
    token_match = re.match(r"\s*([A-Za-z_-]+)", verdict_text)
    token = token_match.group(1) if token_match else verdict_text.strip()
    decision = _DECISIONS.get(token.lower())
    if decision is None:
        raise UnknownDecision(token)
    remainder = verdict_text[token_match.end() :] if token_match else ""
    alert_summary = remainder.strip().lstrip("-:. ").strip()

    justification = sections["JUSTIFICATION"]
    if not justification:
        raise SchemaViolation("JUSTIFICATION", "empty section")

    citations: list[str] = []
    for cid in _CITATION_RE.findall(justification):
        if cid not in citations:
            citations.append(cid)

    mitigations: list[str] = []
    if "MITIGATIONS" in sections:
        for line in sections["MITIGATIONS"].splitlines():
            m = _BULLET_RE.match(line)
            if m:
                mitigations.append(m.group(1).strip())
            elif line.strip():
                mitigations.append(line.strip())

    if decision == DECISION_UNDECIDABLE:
        return Verdict(
            decision=decision,
            alert_summary=alert_summary,
            justification=justification,
            citations=citations,
            mitigations=mitigations,
            confidence=0.0,
        )

    if not citations:
        raise SchemaViolation("JUSTIFICATION", "no citations in a decided verdict")
    known = {it.entry.entry_id: it for it in result.items}
    for cid in citations:
        if cid not in known:
            raise UnverifiedCitation(cid)
    if not 1 <= len(mitigations) <= 2:
        raise SchemaViolation("MITIGATIONS", f"expected 1-2 items, got {len(mitigations)}")

    confidence = sum(known[c].rerank_score for c in citations) / len(citations)
    return Verdict(
        decision=decision,
        alert_summary=alert_summary,
        justification=justification,
        citations=citations,
        mitigations=mitigations,
        confidence=confidence,
    )


def undecidable_verdict(diagnostics: list[str]) -> Verdict:
    detail = "; ".join(diagnostics) if diagnostics else "no evidence retrieved"
    return Verdict(
        decision=DECISION_UNDECIDABLE,
        alert_summary="Insufficient evidence to decide.",
        justification=f"Missing evidence: {detail}",
        citations=[],
        mitigations=[],
        confidence=0.0,
    )


def answer_with_evidence(
    question: str,
    store: VectorStore,
    cfg: RetrievalConfig,
    embedder: Embedder,
    scorer: CrossScorer,
    llm: LLMClient,
    entities: QueryEntities | None = None,
    max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS,
) -> tuple[Verdict, RetrievalResult]:
    """Embed, retrieve, and (only when the gate passes) generate.

    The abstention gate is pre-generation: an abstained retrieval returns an
    undecidable verdict built from the diagnostics without invoking the LLM.
    """
    query_vec = embedder.embed(question)
    result = retrieve(store, cfg, question, query_vec, scorer, entities=entities)
    if result.gate != GATE_PASSED:
        return undecidable_verdict(result.diagnostics), result
    prompt = build_prompt(question, result, max_context_tokens=max_context_tokens)
    raw = llm.complete(prompt)
    return parse_verdict(raw, result), result


def answer(
    question: str,
    store: VectorStore,
    cfg: RetrievalConfig,
    embedder: Embedder,
    scorer: CrossScorer,
    llm: LLMClient,
    entities: QueryEntities | None = None,
) -> Verdict:
    verdict, _ = answer_with_evidence(
        question, store, cfg, embedder, scorer, llm, entities=entities
    )
    return verdict
