"""bAbI-format data: parsing, serialisation, synthetic tasks and vocabularies.

File format, one record per line::

    ID sentence text.
    ID question text?<TAB>answer<TAB>supporting ids

IDs increase within a story; an ID of 1 starts a new story. Each question
line yields one example whose context is every statement seen so far in the
story.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ParseError, SpecError
from .text import Vocabulary

_PUNCT = ".?!,;:"


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace split with surrounding punctuation removed."""
    out = []
    for raw in text.split():
        tok = raw.strip(_PUNCT).lower()
        if tok:
            out.append(tok)
    return out


@dataclass
class Example:
    """One question with its context.

    Text examples carry ``context`` (tokenised sentences) and their bAbI line
    IDs; image examples carry ``grid`` (a path or a loaded FeatureGrid) and,
    optionally, the human answer multiset used by consensus scoring.
    """

    context: list[list[str]]
    question: list[str]
    answer: str
    supporting_facts: list[int] = field(default_factory=list)
    context_ids: list[int] = field(default_factory=list)
    question_id: int | None = None
    grid: object = None
    human_answers: list[str] | None = None

    @property
    def is_visual(self) -> bool:
        return self.grid is not None


def parse_babi(stream: TextIO | Iterable[str]) -> list[Example]:
    examples: list[Example] = []
    story: list[tuple[int, list[str]]] = []
    last_id = 0
    for line_no, line in enumerate(stream, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        head, _, rest = line.strip().partition(" ")
        try:
            line_id = int(head)
        except ValueError:
            raise ParseError(f"line does not start with an integer ID: {line!r}", line_no) from None
        if line_id == 1:
            story, last_id = [], 0
        elif line_id <= last_id:
            raise ParseError(f"non-monotonic ID {line_id} after {last_id}", line_no)
        last_id = line_id
        if "\t" in rest:
            fields_ = rest.split("\t")
            if len(fields_) < 2 or not fields_[1].strip():
                raise ParseError("question line has no answer field", line_no)
            if not story:
                raise ParseError("question with no preceding story sentences", line_no)
            question = tokenize(fields_[0])
            if not question:
                raise ParseError("empty question", line_no)
            support = []
            if len(fields_) > 2 and fields_[2].strip():
                try:
                    support = [int(s) for s in fields_[2].split()]
                except ValueError:
                    raise ParseError(f"bad supporting fact IDs {fields_[2]!r}", line_no) from None
            examples.append(Example(
                context=[list(toks) for _, toks in story],
                question=question,
                answer=fields_[1].strip().lower(),
                supporting_facts=support,
                context_ids=[i for i, _ in story],
                question_id=line_id,
            ))
        else:
            toks = tokenize(rest)
            if not toks:
                raise ParseError("empty statement", line_no)
            story.append((line_id, toks))
    return examples


def read_babi(path: str | Path) -> list[Example]:
    with open(path) as fh:
        return parse_babi(fh)


def format_babi(examples: Sequence[Example]) -> str:
    """Serialise each example as its own story.

    Original line IDs are reused when they form a valid story (first ID 1,
    increasing); otherwise the story is renumbered from 1 and supporting IDs
    are remapped.
    """
    lines = []
    for ex in examples:
        ids = list(ex.context_ids)
        qid = ex.question_id
        valid = (len(ids) == len(ex.context) and ids and ids[0] == 1
                 and all(a < b for a, b in zip(ids, ids[1:])) and qid is not None and qid > ids[-1])
        support = list(ex.supporting_facts)
        if not valid:
            remap = {old: new for new, old in enumerate(ids, start=1)} if len(ids) == len(ex.context) else {}
            ids = list(range(1, len(ex.context) + 1))
            qid = len(ids) + 1
            support = [remap[s] for s in support if s in remap]
        for i, toks in zip(ids, ex.context):
            lines.append(f"{i} {' '.join(toks)}.")
        lines.append(f"{qid} {' '.join(ex.question)}?\t{ex.answer}\t{' '.join(map(str, support))}")
    return "\n".join(lines) + "\n"


def write_babi(path: str | Path, examples: Sequence[Example]) -> None:
    Path(path).write_text(format_babi(examples))


def truncate_context(example: Example, limit: int) -> Example:
    """Keep only the last ``limit`` context sentences."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if len(example.context) <= limit:
        return example
    return replace(example, context=example.context[-limit:],
                   context_ids=example.context_ids[-limit:] if example.context_ids else [])


def validation_split(examples: Sequence[Example], fraction: float = 0.1) -> tuple[list[Example], list[Example]]:
    """The last ``fraction`` of the training examples become the validation set."""
    n_val = int(round(len(examples) * fraction))
    if len(examples) > 1:
        n_val = max(n_val, 1)
    cut = len(examples) - n_val
    return list(examples[:cut]), list(examples[cut:])


def build_vocab(examples: Sequence[Example]) -> tuple[Vocabulary, list[str]]:
    """Sorted input vocabulary over story and question tokens, plus sorted answers."""
    if not examples:
        raise ValueError("cannot build a vocabulary from no examples")
    tokens: set[str] = set()
    answers: set[str] = set()
    for ex in examples:
        for sent in ex.context:
            tokens.update(sent)
        tokens.update(ex.question)
        answers.add(ex.answer)
    return Vocabulary(sorted(tokens)), sorted(answers)


def load_visual_examples(path: str | Path) -> list[Example]:
    """JSON-lines image QA records: ``{"grid", "question", "answer", "human_answers"}``.

    Grid paths are resolved relative to the JSONL file.
    """
    path = Path(path)
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                grid = path.parent / rec["grid"]
                answer = str(rec["answer"]).lower()
                question = tokenize(rec["question"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"bad visual record: {exc}", line_no) from None
            humans = rec.get("human_answers")
            out.append(Example(context=[], question=question, answer=answer, grid=str(grid),
                               human_answers=[str(h).lower() for h in humans] if humans else None))
    return out


def load_examples(path: str | Path) -> list[Example]:
    """Read bAbI text or, for ``.jsonl`` files, image QA records."""
    if str(path).endswith(".jsonl"):
        return load_visual_examples(path)
    return read_babi(path)


# ---------------------------------------------------------------------------
# synthetic tasks

FAMILIES = ("single_fact", "two_fact", "yes_no", "counting")

NAMES = ["mary", "john", "sandra", "daniel", "bill", "fred", "julie", "emma"]
LOCATIONS = ["bathroom", "hallway", "kitchen", "garden", "office", "bedroom", "cinema", "park"]
OBJECTS = ["football", "apple", "milk", "box", "ball", "book", "cup", "key"]
MOVE_VERBS = ["moved to", "went to", "journeyed to", "travelled to"]
PICK_VERBS = ["picked up", "grabbed", "got", "took"]
DROP_VERBS = ["dropped", "discarded", "put down", "left"]

_NUMBER_WORDS = ["0", "1", "2", "3", "4", "5", "6", "7", "8"]


@dataclass(frozen=True)
class TaskSpec:
    family: str
    n_entities: int = 4
    n_locations: int = 6
    n_objects: int = 3
    story_length: int = 8
    n_train: int = 1000
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"unknown task family {self.family!r}; choose from {FAMILIES}")
        if not 1 <= self.n_entities <= len(NAMES):
            raise SpecError(f"n_entities must lie in 1..{len(NAMES)}")
        if not 2 <= self.n_locations <= len(LOCATIONS):
            raise SpecError(f"n_locations must lie in 2..{len(LOCATIONS)}")
        if not 1 <= self.n_objects <= len(OBJECTS):
            raise SpecError(f"n_objects must lie in 1..{len(OBJECTS)}")
        needed = {"single_fact": 1, "yes_no": 1, "two_fact": 2, "counting": 1}[self.family]
        if self.story_length < needed:
            raise SpecError(f"{self.family} needs at least {needed} facts, story_length={self.story_length}")
        if self.n_train < 0 or self.n_test < 0:
            raise SpecError("example counts must be nonnegative")


class _World:
    """Mutable story state used while generating."""

    def __init__(self):
        self.where: dict[str, str] = {}      # person -> location
        self.holder: dict[str, str] = {}     # object -> person
        self.placed: dict[str, str] = {}     # dropped object -> location
        # 1-based sentence ids of the evidence behind each fact
        self.moved_at: dict[str, int] = {}
        self.touched_at: dict[str, list[int]] = {}


def _sentence(*parts: str) -> list[str]:
    return tokenize(" ".join(parts))


def _gen_moves(rng, people, locations, length) -> tuple[list[list[str]], _World]:
    world = _World()
    story = []
    for _ in range(length):
        p = people[rng.integers(len(people))]
        loc = locations[rng.integers(len(locations))]
        world.where[p] = loc
        story.append(_sentence(p, MOVE_VERBS[rng.integers(len(MOVE_VERBS))], "the", loc))
        world.moved_at[p] = len(story)
    return story, world


def _gen_objects(rng, people, locations, objects, length) -> tuple[list[list[str]], _World]:
    world = _World()
    story = []
    for _ in range(length):
        p = people[rng.integers(len(people))]
        held = [o for o in objects if world.holder.get(o) == p]
        here = world.where.get(p)
        free = [o for o in objects if o not in world.holder
                and (o not in world.placed or world.placed[o] == here)]
        r = rng.random()
        if here is None or r < 0.45:
            loc = locations[rng.integers(len(locations))]
            world.where[p] = loc
            story.append(_sentence(p, MOVE_VERBS[rng.integers(len(MOVE_VERBS))], "the", loc))
            world.moved_at[p] = len(story)
        elif free and (r < 0.8 or not held):
            o = free[rng.integers(len(free))]
            world.holder[o] = p
            world.placed.pop(o, None)
            story.append(_sentence(p, PICK_VERBS[rng.integers(len(PICK_VERBS))], "the", o))
            world.touched_at[o] = [len(story)]
        elif held:
            o = held[rng.integers(len(held))]
            del world.holder[o]
            world.placed[o] = here
            story.append(_sentence(p, DROP_VERBS[rng.integers(len(DROP_VERBS))], "the", o))
            world.touched_at[o] = [world.moved_at[p], len(story)]
        else:
            loc = locations[rng.integers(len(locations))]
            world.where[p] = loc
            story.append(_sentence(p, MOVE_VERBS[rng.integers(len(MOVE_VERBS))], "the", loc))
            world.moved_at[p] = len(story)
    return story, world


def _object_location(world: _World, o: str) -> str | None:
    if o in world.holder:
        return world.where.get(world.holder[o])
    return world.placed.get(o)


def _object_support(world: _World, o: str) -> list[int]:
    if o in world.holder:
        return sorted(set(world.touched_at[o]) | {world.moved_at[world.holder[o]]})
    return list(world.touched_at[o])


def _one_example(spec: TaskSpec, rng: np.random.Generator) -> Example:
    people = NAMES[:spec.n_entities]
    locations = LOCATIONS[:spec.n_locations]
    objects = OBJECTS[:spec.n_objects]
    L = spec.story_length
    for _ in range(1000):
        if spec.family in ("single_fact", "yes_no"):
            story, world = _gen_moves(rng, people, locations, L)
            known = sorted(world.where)
            p = known[rng.integers(len(known))]
            support = [world.moved_at[p]]
            if spec.family == "single_fact":
                question, answer = ["where", "is", p], world.where[p]
            else:
                if rng.random() < 0.5:
                    loc = world.where[p]
                else:
                    others = [x for x in locations if x != world.where[p]]
                    loc = others[rng.integers(len(others))]
                question = ["is", p, "in", "the", loc]
                answer = "yes" if world.where[p] == loc else "no"
        elif spec.family == "two_fact":
            story, world = _gen_objects(rng, people, locations, objects, L)
            located = [o for o in objects if _object_location(world, o) is not None]
            if not located:
                continue
            o = located[rng.integers(len(located))]
            question, answer = ["where", "is", "the", o], _object_location(world, o)
            support = _object_support(world, o)
        else:
            story, world = _gen_objects(rng, people, locations, objects, L)
            p = people[rng.integers(len(people))]
            mine = [o for o in objects if world.holder.get(o) == p]
            count = len(mine)
            support = sorted(i for o in mine for i in world.touched_at[o])
            question = ["how", "many", "objects", "is", p, "carrying"]
            answer = _NUMBER_WORDS[count]
        ex = Example(context=story, question=question, answer=answer,
                     supporting_facts=support, context_ids=list(range(1, L + 1)), question_id=L + 1)
        replayed = oracle_answer(ex)
        if replayed != answer:
            raise AssertionError(f"generator/oracle disagreement: {answer!r} vs {replayed!r} on {ex}")
        return ex
    raise SpecError(f"could not generate a valid {spec.family} example; story too short?")


def generate_task(spec: TaskSpec) -> tuple[list[Example], list[Example]]:
    """Deterministic train/test example sets for ``spec``.

    Every emitted answer is re-derived by :func:`oracle_answer` from the story
    text before it is accepted.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train = [_one_example(spec, rng) for _ in range(spec.n_train)]
    test = [_one_example(spec, rng) for _ in range(spec.n_test)]
    return train, test


# ---------------------------------------------------------------------------
# symbolic oracle, independent of the generator's internal state

_MOVE = re.compile(r"^(\w+) (?:moved|went|journeyed|travelled) to the (\w+)$")
_PICK = re.compile(r"^(\w+) (?:picked up|grabbed|got|took) the (\w+)$")
_DROP = re.compile(r"^(\w+) (?:dropped|discarded|put down|left) the (\w+)$")


def oracle_answer(example: Example) -> str | None:
    """Answer a generated-family question by replaying the story as text."""
    where: dict[str, str] = {}
    carrying: dict[str, set[str]] = {}
    lying: dict[str, str] = {}
    for toks in example.context:
        s = " ".join(toks)
        if m := _MOVE.match(s):
            where[m[1]] = m[2]
        elif m := _PICK.match(s):
            for items in carrying.values():
                items.discard(m[2])
            carrying.setdefault(m[1], set()).add(m[2])
            lying.pop(m[2], None)
        elif m := _DROP.match(s):
            carrying.get(m[1], set()).discard(m[2])
            if m[1] in where:
                lying[m[2]] = where[m[1]]
    q = example.question
    if q[:2] == ["where", "is"]:
        target = q[-1]
        if len(q) == 3:
            return where.get(target)
        for person, items in carrying.items():
            if target in items:
                return where.get(person)
        return lying.get(target)
    if q[0] == "is" and len(q) == 5:
        return "yes" if where.get(q[1]) == q[4] else "no"
    if q[:3] == ["how", "many", "objects"]:
        return str(len(carrying.get(q[4], ())))
    return None
