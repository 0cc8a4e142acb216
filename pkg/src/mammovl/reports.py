"""Report synthesis from attribute records using prompt templates."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import yaml

from .data_model import SLOTS, AttributeVector, DatasetManifest
from .exceptions import MissingTemplate, ParseError, UnfilledSlot

VALUE_NAMES = {0: "negative", 1: "positive"}
ATTRIBUTE_SLOT = "attribute"


def _fields(text: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(text) if name is not None]


def _tidy(text: str) -> str:
    text = re.sub(r"\s+", " ", text)
    text = re.sub(r"\s+([.,;:])", r"\1", text).strip()
    return text[:1].upper() + text[1:]


@dataclass(frozen=True)
class PromptTemplate:
    attribute: str
    value: str
    text: str

    def __post_init__(self):
        for name in _fields(self.text):
            if name not in SLOTS and name != ATTRIBUTE_SLOT:
                raise ParseError(f"template {self.text!r} uses unknown slot {{{name}}}")

    @property
    def slots(self) -> list[str]:
        return [f for f in _fields(self.text) if f != ATTRIBUTE_SLOT]

    def fill(self, values: Mapping[str, str]) -> str:
        missing = [s for s in self.slots if values.get(s) is None]
        if missing:
            raise UnfilledSlot(f"template {self.text!r} has no value for {missing}")
        return _tidy(self.text.format(**{**values, ATTRIBUTE_SLOT: self.attribute}))

    def fill_canonical(self) -> str:
        """Fill every location/subtype slot with nothing."""
        return _tidy(self.text.format(**dict.fromkeys(SLOTS, ""), **{ATTRIBUTE_SLOT: self.attribute}))


class PromptBank:
    """Templates keyed by ``(attribute, value)``; list order is preserved."""

    def __init__(self, templates: Mapping[tuple[str, str], Iterable[PromptTemplate]]):
        self.templates = {key: tuple(ts) for key, ts in templates.items()}
        for key, ts in self.templates.items():
            if not ts:
                raise ParseError(f"empty template list for {key}")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PromptBank":
        if not isinstance(data, Mapping):
            raise ParseError("prompt bank must map attribute -> value -> [templates]")
        out = {}
        for attr, by_value in data.items():
            if not isinstance(by_value, Mapping):
                raise ParseError(f"prompt bank entry for {attr!r} must be a mapping")
            for value, texts in by_value.items():
                if isinstance(texts, str) or not isinstance(texts, list):
                    raise ParseError(f"templates for ({attr}, {value}) must be a list")
                out[(str(attr), str(value))] = [PromptTemplate(str(attr), str(value), str(t)) for t in texts]
        return cls(out)

    def to_mapping(self) -> dict:
        out: dict = {}
        for (attr, value), ts in self.templates.items():
            out.setdefault(attr, {})[value] = [t.text for t in ts]
        return out

    def get(self, attribute: str, value: str) -> tuple[PromptTemplate, ...]:
        try:
            return self.templates[(attribute, value)]
        except KeyError:
            raise MissingTemplate(f"no template for ({attribute!r}, {value!r})") from None

    def __contains__(self, key) -> bool:
        return key in self.templates


def load_bank(path=None) -> PromptBank:
    """Load a YAML prompt bank; the bundled default when ``path`` is None."""
    if path is None:
        text = resources.files("mammovl").joinpath("data/prompts.yaml").read_text()
    else:
        text = Path(path).read_text()
    return PromptBank.from_mapping(yaml.safe_load(text) or {})


def value_name(v: int) -> str:
    return VALUE_NAMES[int(v)]


def synthesize_report(attrs: AttributeVector, bank: PromptBank, rng: np.random.Generator) -> str:
    """Concatenate one sampled sentence per attribute, in vocabulary order.

    A positive attribute with several findings gets one sentence per finding.
    """
    sentences = []
    for name, v in zip(attrs.vocabulary, attrs.values):
        templates = bank.get(name, value_name(v))
        findings = attrs.findings_of(name) if v else ()
        for finding in findings or (None,):
            t = templates[int(rng.integers(len(templates)))]
            sentences.append(t.fill(finding.slots() if finding is not None else {}))
    return " ".join(sentences)


def positive_prompts(attribute: str, bank: PromptBank) -> list[str]:
    return [t.fill_canonical() for t in bank.get(attribute, "positive")]


def uncovered_pairs(bank: PromptBank, data: DatasetManifest | Iterable[AttributeVector]) -> set[tuple[str, str]]:
    """The (attribute, value) pairs in ``data`` that have no template."""
    if isinstance(data, DatasetManifest):
        vectors = [e.attributes for e in data.entries if e.attributes is not None]
    else:
        vectors = list(data)
    needed = {(k, value_name(v)) for a in vectors for k, v in zip(a.vocabulary, a.values)}
    return {pair for pair in needed if pair not in bank}


def mentions(text: str, attribute: str) -> bool:
    """Whole-word (optionally plural) mention of ``attribute``."""
    return re.search(rf"\b{re.escape(attribute)}s?\b", text, flags=re.IGNORECASE) is not None
