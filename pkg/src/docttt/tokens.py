"""Output language: token dictionary, flattened-XML serialization, layout graphs.

A document is a tree of layout entities (page > section > paragraph) with
character runs at the leaves.  Its flat form is a token sequence wrapped in
<sos>/<eot>, with paired open/close markers around each entity.  Parsing is
strict for ground truth and lenient (never fails, counts repairs) for model
predictions, so layout metrics are always computable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
DEFAULT_CLASSES = (
    ("page", "⟨page⟩", "⟨/page⟩"),
    ("section", "⟨sec⟩", "⟨/sec⟩"),
    ("paragraph", "⟨par⟩", "⟨/par⟩"),
)

SOS = "<sos>"
EOT = "<eot>"
SPACE_GLYPH = "␣"  # visible spelling of the space token in text files


class ParseError(ValueError):
    """Strict-mode parse failure; message carries position and marker."""


class Dictionary:
    """Token inventory: specials, alphabet characters, paired layout markers.

    Ids are contiguous and deterministic: <sos>, <eot>, then the alphabet in
    the given order, then open/close markers class by class.
    """

    def __init__(self, alphabet: str = DEFAULT_ALPHABET, classes=DEFAULT_CLASSES):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet contains duplicate characters")
        self.alphabet = alphabet
        self.classes = tuple((str(n), str(o), str(c)) for n, o, c in classes)
        tokens = [SOS, EOT]
        tokens.extend(alphabet)
        for _, open_m, close_m in self.classes:
            tokens.append(open_m)
            tokens.append(close_m)
        if len(set(tokens)) != len(tokens):
            raise ValueError("token spellings collide across specials/alphabet/markers")
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}
        self.sos_id = 0
        self.eot_id = 1
        self._alpha_lo = 2
        self._alpha_hi = 2 + len(alphabet)  # exclusive
        self._marker_info: dict[int, tuple[str, bool, int]] = {}
        for rank, (name, open_m, close_m) in enumerate(self.classes):
            self._marker_info[self._ids[open_m]] = (name, True, rank)
            self._marker_info[self._ids[close_m]] = (name, False, rank)
        self._open_of = {name: self._ids[o] for name, o, _ in self.classes}
        self._close_of = {name: self._ids[c] for name, _, c in self.classes}
        self._rank_of = {name: r for r, (name, _, _) in enumerate(self.classes)}

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def is_alpha(self, token_id: int) -> bool:
        return self._alpha_lo <= token_id < self._alpha_hi

    def is_marker(self, token_id: int) -> bool:
        return token_id in self._marker_info

    def is_open(self, token_id: int) -> bool:
        info = self._marker_info.get(token_id)
        return info is not None and info[1]

    def is_close(self, token_id: int) -> bool:
        info = self._marker_info.get(token_id)
        return info is not None and not info[1]

    def marker_class(self, token_id: int) -> str:
        return self._marker_info[token_id][0]

    def class_rank(self, name: str) -> int:
        return self._rank_of[name]

    def open_id(self, name: str) -> int:
        return self._open_of[name]

    def close_id(self, name: str) -> int:
        return self._close_of[name]

    def char_of(self, token_id: int) -> str:
        if not self.is_alpha(token_id):
            raise ValueError(f"token id {token_id} is not an alphabet character")
        return self.alphabet[token_id - self._alpha_lo]

    def char_id(self, ch: str) -> int:
        idx = self.alphabet.find(ch)
        if idx < 0:
            raise ValueError(f"character {ch!r} is not in the alphabet")
        return self._alpha_lo + idx

    def alphabet_ids(self) -> list[int]:
        return list(range(self._alpha_lo, self._alpha_hi))

    # -- on-disk text format ------------------------------------------------

    def spell(self, token_id: int) -> str:
        tok = self._tokens[token_id]
        return SPACE_GLYPH if tok == " " else tok

    def unspell(self, word: str) -> int:
        tok = " " if word == SPACE_GLYPH else word
        if tok not in self._ids:
            raise ValueError(f"unknown token spelling {word!r}")
        return self._ids[tok]

    def to_text(self, tokens) -> str:
        return " ".join(self.spell(t) for t in tokens)

    def from_text(self, text: str) -> "TokenSequence":
        return TokenSequence([self.unspell(w) for w in text.split()])


class TokenSequence:
    """A flat token-id sequence; complete sequences are <sos> ... <eot>."""

    __slots__ = ("ids",)

    def __init__(self, ids):
        self.ids = list(int(i) for i in ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, i):
        return self.ids[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenSequence) and self.ids == other.ids

    def __repr__(self) -> str:
        return f"TokenSequence({self.ids})"

    def content_length(self) -> int:
        """Sequence length excluding <sos>/<eot> (the target length)."""
        n = len(self.ids)
        if n and self.ids[0] == 0:
            n -= 1
        if self.ids and self.ids[-1] == 1:
            n -= 1
        return n


@dataclass
class DocNode:
    """A layout entity; items are child entities and character runs, in order."""

    cls: str
    items: list = field(default_factory=list)

    def child_entities(self) -> list["DocNode"]:
        return [c for c in self.items if isinstance(c, DocNode)]

    def own_text(self) -> str:
        return "".join(c for c in self.items if isinstance(c, str))

    def all_text(self) -> str:
        out = []
        for c in self.items:
            out.append(c if isinstance(c, str) else c.all_text())
        return "".join(out)


@dataclass
class LayoutGraph:
    """Root plus entity nodes; containment and reading-order sibling edges."""

    labels: list[str]
    edges: list[tuple[int, int, str]]

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_pairs(self) -> set[tuple[int, int]]:
        return {(u, v) for u, v, _ in self.edges}


def serialize(tree: DocNode, dictionary: Dictionary) -> TokenSequence:
    """Pre-order flattening: open marker, items, close marker; wrapped in specials."""
    out = [dictionary.sos_id]

    def emit(node: DocNode) -> None:
        out.append(dictionary.open_id(node.cls))
        for item in node.items:
            if isinstance(item, DocNode):
                emit(item)
            else:
                for ch in item:
                    out.append(dictionary.char_id(ch))
        out.append(dictionary.close_id(node.cls))

    emit(tree)
    out.append(dictionary.eot_id)
    return TokenSequence(out)


def _merge_runs(items: list) -> list:
    merged: list = []
    for item in items:
        if isinstance(item, str) and merged and isinstance(merged[-1], str):
            merged[-1] += item
        else:
            merged.append(item)
    return merged


def parse(
    tokens: TokenSequence, dictionary: Dictionary, lenient: bool = False
) -> tuple[DocNode, int]:
    """Parse a flat sequence back into a tree.

    Strict mode raises ParseError on any malformation.  Lenient mode never
    fails: it creates a missing page root, auto-closes unclosed or misnested
    markers, drops orphan close markers and merges stray extra pages,
    counting one repair per fix.
    """
    d = dictionary
    ids = list(tokens)
    repairs = 0
    pos = 0

    def fail(msg: str) -> None:
        raise ParseError(f"position {pos}: {msg}")

    if ids and ids[0] == d.sos_id:
        ids = ids[1:]
        pos = 1
    elif not lenient:
        fail("sequence does not start with <sos>")
    else:
        repairs += 1

    stack: list[DocNode] = []
    top_level: list = []

    def attach(item) -> None:
        if stack:
            stack[-1].items.append(item)
        else:
            top_level.append(item)

    ended = False
    for tok in ids:
        if ended:
            if not lenient:
                fail("content after <eot>")
            repairs += 1
            break
        if tok == d.eot_id:
            ended = True
            pos += 1
            continue
        if tok == d.sos_id:
            if not lenient:
                fail("unexpected <sos>")
            repairs += 1
            pos += 1
            continue
        if d.is_alpha(tok):
            if not stack:
                if not lenient:
                    fail("character outside any layout entity")
                root = DocNode("page")
                repairs += 1
                stack.append(root)
                top_level.append(root)
            attach_target = stack[-1]
            attach_target.items.append(d.char_of(tok))
        elif d.is_open(tok):
            name = d.marker_class(tok)
            rank = d.class_rank(name)
            while stack and d.class_rank(stack[-1].cls) >= rank:
                if not lenient:
                    fail(
                        f"marker {d.token_of(tok)} cannot nest inside "
                        f"{stack[-1].cls}"
                    )
                stack.pop()
                repairs += 1
            node = DocNode(name)
            attach(node)
            stack.append(node)
        elif d.is_close(tok):
            name = d.marker_class(tok)
            if stack and stack[-1].cls == name:
                stack.pop()
            elif any(n.cls == name for n in stack):
                if not lenient:
                    fail(f"misnested close marker {d.token_of(tok)}")
                while stack[-1].cls != name:
                    stack.pop()
                    repairs += 1
                stack.pop()
            else:
                if not lenient:
                    fail(f"orphan close marker {d.token_of(tok)}")
                repairs += 1
        else:  # pragma: no cover - dictionary covers all ids
            fail(f"unknown token id {tok}")
        pos += 1

    if not ended and not lenient:
        fail("sequence does not end with <eot>")

    while stack:
        if not lenient:
            fail(f"unclosed marker for {stack[-1].cls}")
        stack.pop()
        repairs += 1

    pages = [n for n in top_level if isinstance(n, DocNode) and n.cls == "page"]
    strays = [n for n in top_level if not (isinstance(n, DocNode) and n.cls == "page")]
    if not lenient:
        if len(pages) != 1 or strays:
            raise ParseError("document must be exactly one page element")
        root = pages[0]
    else:
        if not pages:
            root = DocNode("page")
            repairs += 1
        else:
            root = pages[0]
            for extra in pages[1:]:
                root.items.extend(extra.items)
                repairs += 1
        if strays:
            root.items.extend(strays)
            repairs += len(strays)

    def canonicalize(node: DocNode) -> None:
        node.items = _merge_runs(node.items)
        for c in node.child_entities():
            canonicalize(c)

    canonicalize(root)
    return root, repairs


def strip_layout(tokens: TokenSequence, dictionary: Dictionary) -> str:
    """Concatenate alphabet characters, dropping markers and specials."""
    return "".join(
        dictionary.char_of(t) for t in tokens if dictionary.is_alpha(t)
    )


def to_layout_graph(tree: DocNode) -> LayoutGraph:
    """Graph for layout metrics: a root node plus one node per entity.

    Containment edges run parent -> child (root -> page included); sibling
    edges connect consecutive same-parent entities in reading order.
    Node ids follow pre-order traversal, root = 0.
    """
    labels = ["root"]
    edges: list[tuple[int, int, str]] = []

    def visit(node: DocNode, parent_id: int) -> None:
        node_id = len(labels)
        labels.append(node.cls)
        edges.append((parent_id, node_id, "contain"))
        prev_child = None
        for child in node.child_entities():
            child_id = len(labels)
            visit(child, node_id)
            if prev_child is not None:
                edges.append((prev_child, child_id, "sibling"))
            prev_child = child_id

    visit(tree, 0)
    return LayoutGraph(labels=labels, edges=edges)
