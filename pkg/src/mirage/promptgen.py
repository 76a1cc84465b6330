"""Automatic defect prompt generation.

A vision-language backend is shown a handful of defect-free reference images
of a product category and asked for a numbered list of plausible manufacturing
defects. The structured answer is parsed into records carrying a short defect
name, a one-sentence description usable as a generation prompt, and compact
grounding keywords distilled from name and description.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .core import read_image
from .errors import ParseError, ValidationError

_PROMPT_TEMPLATE = (
    "You are an expert in manufacturing quality control. Given the following "
    "{image_phrase} of a normal, defect-free {category}, please list "
    "{count} realistic defects that could plausibly occur on this type of "
    "object. For each defect, provide a short defect name followed by a "
    "description that could be used as a text prompt for image generation. "
    "The descriptions should be concise yet specific enough to guide the "
    "generation of realistic defect images."
)

_STOPWORDS = frozenset(
    "a an the this that of on in at with by for to from into over under "
    "across along and or is are was were be been being it its against where "
    "running leaving exposing indicating showing creating forming spreading "
    "causing".split()
)


@dataclass(frozen=True)
class DefectDescription:
    """Named defect type, descriptive sentence, and grounding keywords."""

    name: str
    description: str
    keywords: tuple
    category: str

    def __post_init__(self):
        if not self.name.strip():
            raise ValidationError("defect name is empty")
        if len(self.name.split()) > 4:
            raise ValidationError(f"defect name too long: {self.name!r}")
        if not self.description.strip():
            raise ValidationError(f"defect {self.name!r} has empty description")
        kws = tuple(k.strip() for k in self.keywords if k.strip())
        if not kws:
            raise ValidationError(f"defect {self.name!r} has no keywords")
        object.__setattr__(self, "keywords", kws)

    def keyword_text(self):
        return ", ".join(self.keywords)

    def to_dict(self):
        return {"category": self.category, "name": self.name,
                "description": self.description, "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, d):
        return cls(name=d["name"], description=d["description"],
                   keywords=tuple(d["keywords"]), category=d["category"])


@dataclass(frozen=True)
class ProposalRequest:
    """One proposal query: category, K reference images, requested count."""

    category: str
    reference_images: tuple = field(default_factory=tuple)
    count: int = 10

    def __post_init__(self):
        if not self.category.strip():
            raise ValidationError("category name is empty")
        if len(self.reference_images) < 1:
            raise ValidationError("at least one reference image is required")
        if self.count < 1:
            raise ValidationError("requested defect count must be >= 1")


def build_proposal_prompt(req):
    """Render the proposal prompt for a category (deterministic)."""
    k = len(req.reference_images)
    if k == 1:
        image_phrase = "image"
    elif k == 2:
        image_phrase = "two images"
    else:
        image_phrase = f"{k} images"
    return _PROMPT_TEMPLATE.format(image_phrase=image_phrase,
                                   category=req.category, count=req.count)


def _split_item(line):
    """Split one response line into (name, description) or return None."""
    line = line.strip()
    if not line or set(line) <= set("|-+= "):
        return None
    # numbered / bulleted prefixes
    line = re.sub(r"^\s*(?:[-*•]|\(?\d+[.)\]]?)\s+", "", line)
    # markdown table rows: take the first two non-empty cells
    if line.startswith("|") or line.count("|") >= 2:
        cells = [c.strip() for c in line.strip("|").split("|")]
        cells = [c for c in cells if c]
        if len(cells) >= 2:
            return cells[0], cells[1]
        return None
    for sep in (":", " & ", " - ", "\t"):
        if sep in line:
            name, _, desc = line.partition(sep)
            if name.strip() and desc.strip():
                return name.strip(), desc.strip()
    return None


def _keywords_for(name, description):
    """Distill grounding keywords: the name, its head noun, and up to two
    short content phrases from the description; all lowercased, at most 4."""
    keywords = []
    name_lower = re.sub(r"\s+", " ", name.lower()).strip()
    keywords.append(name_lower)
    head = name_lower.split()[-1]
    if head != name_lower and head not in _STOPWORDS:
        keywords.append(head)

    tokens = re.findall(r"[a-z][a-z'-]*", description.lower())
    runs, current = [], []
    for tok in tokens:
        if tok in _STOPWORDS:
            if current:
                runs.append(current)
                current = []
        else:
            current.append(tok)
    if current:
        runs.append(current)

    phrases = []
    for run in runs:
        phrase = " ".join(run[-2:])
        if phrase and phrase not in keywords and phrase not in phrases:
            phrases.append(phrase)
    for phrase in phrases:
        if len(keywords) >= 4:
            break
        keywords.append(phrase)
    return tuple(keywords[:4])


def parse_defect_list(raw, category, max_items=None):
    """Parse a proposer response into DefectDescription records.

    Accepts "name: description" lines, two-column table rows (``&`` or ``|``
    separated), and tolerates numbering prefixes. Names longer than four
    words are truncated to their first four. Raises ParseError (with the raw
    text attached) when nothing parseable is found.
    """
    if not raw or not raw.strip():
        raise ParseError("proposer response is empty", raw_text=raw or "")
    items = []
    for line in raw.splitlines():
        split = _split_item(line)
        if split is None:
            continue
        name, desc = split
        name = re.sub(r"\s+", " ", name).strip().strip(".")
        desc = re.sub(r"\s+", " ", desc).strip().rstrip(".")
        if not name or not desc:
            continue
        words = name.split()
        if len(words) > 4:
            name = " ".join(words[:4])
        items.append(DefectDescription(
            name=name, description=desc,
            keywords=_keywords_for(name, desc), category=category))
        if max_items is not None and len(items) >= max_items:
            break
    if not items:
        raise ParseError(f"no defect items found in proposer response for "
                         f"{category!r}", raw_text=raw)
    return items


def propose_defects(req, proposer, out_path=None):
    """Query the proposer backend and parse its answer.

    Loads the request's reference images, sends them with the rendered
    prompt, parses the response, keeps at most ``req.count`` records, and
    optionally persists them as a JSON defects file.
    """
    prompt = build_proposal_prompt(req)
    buffers = [read_image(ref.path)[1] for ref in req.reference_images]
    raw = proposer.propose(prompt, buffers)
    defects = parse_defect_list(raw, req.category, max_items=req.count)
    if out_path is not None:
        save_defects(defects, out_path)
    return defects


def save_defects(defects, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps([d.to_dict() for d in defects], indent=2) + "\n")


def load_defects(path):
    data = json.loads(Path(path).read_text())
    return [DefectDescription.from_dict(d) for d in data]
