"""Prefix tree over tokenized entity identifiers.

The trie answers one question during decoding: given the tokens generated so
far, which tokens may come next. EOS is allowed exactly at nodes where some
inserted identifier ends; such nodes may also have children when one
identifier is a strict prefix of another.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from groundgen.errors import EmptyTrieError, InvalidPrefixError, TrieError, UnresolvedError
from groundgen.tokenizer import EOS, PAD, token_repr


class TrieNode:
    __slots__ = ("children", "entity_ids")

    def __init__(self) -> None:
        self.children: dict[int, TrieNode] = {}
        self.entity_ids: list[str] = []

    @property
    def is_terminal(self) -> bool:
        return bool(self.entity_ids)

    def allowed(self) -> list[int]:
        """Allowed next tokens in ascending id order."""
        out = sorted(self.children)
        if self.entity_ids:
            out.append(EOS)
            out.sort()
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrieNode):
            return NotImplemented
        return self.entity_ids == other.entity_ids and self.children == other.children


class TokenTrie:
    def __init__(self) -> None:
        self.root = TrieNode()
        self._size = 0
        self._longest = 0

    def insert(self, entity_id: str, seq: Sequence[int]) -> None:
        if not seq:
            raise TrieError(f"empty token sequence for entity {entity_id!r}")
        node = self.root
        for t in seq:
            if t == PAD or t == EOS:
                raise TrieError(f"reserved token {token_repr(t)} in identifier of {entity_id!r}")
            child = node.children.get(t)
            if child is None:
                child = node.children[t] = TrieNode()
            node = child
        if entity_id not in node.entity_ids:
            node.entity_ids.append(entity_id)
            node.entity_ids.sort()
            self._size += 1
        self._longest = max(self._longest, len(seq))

    def __len__(self) -> int:
        """Number of distinct (entity_id, sequence) entries."""
        return self._size

    @property
    def longest(self) -> int:
        return self._longest

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenTrie):
            return NotImplemented
        return self.root == other.root

    def walk(self, prefix: Iterable[int]) -> TrieNode:
        node = self.root
        for pos, t in enumerate(prefix):
            nxt = node.children.get(t)
            if nxt is None:
                raise InvalidPrefixError(f"token {token_repr(t)} at position {pos} leaves the trie")
            node = nxt
        return node

    def sequences(self) -> list[tuple[tuple[int, ...], list[str]]]:
        """All terminal paths with their entity lists, in token order."""
        out = []
        stack: list[tuple[TrieNode, tuple[int, ...]]] = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            if node.entity_ids:
                out.append((path, list(node.entity_ids)))
            for t in sorted(node.children, reverse=True):
                stack.append((node.children[t], path + (t,)))
        return out

    def dump(self) -> str:
        lines: list[str] = []

        def rec(node: TrieNode, depth: int) -> None:
            for t in sorted(node.children):
                child = node.children[t]
                mark = "  -> " + ",".join(child.entity_ids) if child.entity_ids else ""
                lines.append("  " * depth + token_repr(t) + mark)
                rec(child, depth + 1)

        rec(self.root, 0)
        return "\n".join(lines)


def build_trie(candidates: Iterable[tuple[str, Sequence[int]]]) -> TokenTrie:
    trie = TokenTrie()
    for entity_id, seq in candidates:
        trie.insert(entity_id, seq)
    if len(trie) == 0:
        raise EmptyTrieError("cannot build a trie from zero candidates")
    return trie


def allowed_next(trie: TokenTrie, prefix: Sequence[int]) -> set[int]:
    return set(trie.walk(prefix).allowed())


def resolve(trie: TokenTrie, full_sequence: Sequence[int]) -> list[str]:
    """Entity ids whose identifier spells ``full_sequence``; a trailing EOS is ignored."""
    seq = list(full_sequence)
    if seq and seq[-1] == EOS:
        seq.pop()
    try:
        node = trie.walk(seq)
    except InvalidPrefixError as exc:
        raise UnresolvedError(f"sequence is not a path in the trie: {exc}") from exc
    if not node.entity_ids:
        raise UnresolvedError("sequence ends at a non-terminal node")
    return list(node.entity_ids)
