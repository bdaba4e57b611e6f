"""Block tree, chain selection rules, and chain prefix operations.

Selection descends from genesis and at every fork keeps the child whose
subtree wins the cascade: heavier subtree weight, then longer resulting main
chain, then earlier arrival.  Plain GHOST (count-heaviest) and longest-chain
descent are provided as independent implementations; the weighted rule with
c = 1 must reproduce the former and the longest-chain limit the latter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .weights import (
    Ordering,
    WeightCoefficient,
    compare_weight,
    evaluate_weight,
    poly_meets_threshold,
    trim_poly,
)

__all__ = [
    "MINER_SYSTEM",
    "MINER_ADVERSARY",
    "GENESIS_ID",
    "Block",
    "BlockTree",
    "medium_select",
    "ghost_select",
    "longest_chain_select",
    "select_chain",
    "compare_subtrees",
    "normalized_tree_weight",
    "k_dominant_prefix",
    "write_tree",
    "read_tree",
]

MINER_SYSTEM = -2
MINER_ADVERSARY = -1
GENESIS_ID = 0


@dataclass(frozen=True)
class Block:
    id: int
    parent: Optional[int]
    miner: int
    round_mined: int
    ctr: int = 0
    payload: tuple[str, ...] = ()


def make_genesis() -> Block:
    return Block(id=GENESIS_ID, parent=None, miner=MINER_SYSTEM, round_mined=0)


class BlockTree:
    """Rooted tree of blocks with arrival bookkeeping.

    Children lists are kept in arrival order, which is what the selection
    tie-break reads.  Blocks whose parent has not arrived yet stay in a
    pending pool and attach (in their original delivery order) as soon as
    the parent shows up.
    """

    def __init__(self, genesis: Optional[Block] = None):
        g = genesis if genesis is not None else make_genesis()
        if g.parent is not None:
            raise ValueError("genesis must have no parent")
        self.genesis_id = g.id
        self.blocks: dict[int, Block] = {g.id: g}
        self.children: dict[int, list[int]] = {g.id: []}
        self.depth: dict[int, int] = {g.id: 0}
        self.arrival: dict[int, int] = {g.id: 0}
        self._next_arrival = 1
        self._pending: list[Block] = []

    # -- basic structure --

    def __contains__(self, block_id: int) -> bool:
        return block_id in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def get(self, block_id: int) -> Block:
        return self.blocks[block_id]

    def add_block(self, block: Block) -> None:
        """Attach a block whose parent is already present."""
        if block.id in self.blocks:
            raise ValueError(f"duplicate block id {block.id}")
        if block.parent not in self.blocks:
            raise KeyError(f"parent {block.parent} of block {block.id} not in tree")
        self.blocks[block.id] = block
        self.children[block.id] = []
        self.children[block.parent].append(block.id)
        self.depth[block.id] = self.depth[block.parent] + 1
        self.arrival[block.id] = self._next_arrival
        self._next_arrival += 1

    def validate_and_attach(
        self,
        incoming: Iterable[Block],
        validator: Optional[Callable[[Block], bool]] = None,
    ) -> list[Block]:
        """Attach deliverable blocks, looping until a fixpoint.

        Duplicates are dropped silently, payload-invalid blocks are rejected
        for good, and orphans wait in the pending pool for a later call.
        Returns the blocks attached by this call in attach order.
        """
        batch = self._pending
        self._pending = []
        for b in incoming:
            if b.id in self.blocks or any(p.id == b.id for p in batch):
                continue
            if validator is not None and not validator(b):
                continue
            batch.append(b)
        accepted: list[Block] = []
        progress = True
        while progress and batch:
            progress = False
            rest: list[Block] = []
            for b in batch:
                if b.parent in self.blocks:
                    self.add_block(b)
                    accepted.append(b)
                    progress = True
                else:
                    rest.append(b)
            batch = rest
        self._pending = batch
        return accepted

    def pending_blocks(self) -> list[Block]:
        return list(self._pending)

    # -- subtree views --

    def subtree_ids(self, root_id: int) -> list[int]:
        out = [root_id]
        i = 0
        while i < len(out):
            out.extend(self.children[out[i]])
            i += 1
        return out

    def weight_poly(self, root_id: int) -> list[int]:
        """Coefficient vector of the subtree rooted at root_id, by relative depth."""
        base = self.depth[root_id]
        coeffs = [0]
        stack = [root_id]
        while stack:
            v = stack.pop()
            rel = self.depth[v] - base
            if rel >= len(coeffs):
                coeffs.extend([0] * (rel + 1 - len(coeffs)))
            coeffs[rel] += 1
            stack.extend(self.children[v])
        return coeffs

    def subtree_depth(self, root_id: int) -> int:
        base = self.depth[root_id]
        best = 0
        stack = [root_id]
        while stack:
            v = stack.pop()
            d = self.depth[v] - base
            if d > best:
                best = d
            stack.extend(self.children[v])
        return best

    def chain_of(self, head_id: int) -> list[int]:
        out = []
        v: Optional[int] = head_id
        while v is not None:
            out.append(v)
            v = self.blocks[v].parent
        out.reverse()
        return out

    def leaves(self) -> list[int]:
        return [b for b, kids in self.children.items() if not kids]


# ----- selection ------------------------------------------------------------


def _subtree_tables(tree: BlockTree, need_polys: bool):
    """Bottom-up tables used by selection: per-node poly/height, selected
    length and best child under the cascade comparator set by the caller."""
    order = sorted(tree.blocks, key=lambda b: tree.depth[b], reverse=True)
    polys: dict[int, list[int]] = {}
    heights: dict[int, int] = {}
    for v in order:
        kids = tree.children[v]
        if need_polys:
            coeffs = [1]
            for k in kids:
                kp = polys[k]
                if len(kp) + 1 > len(coeffs):
                    coeffs.extend([0] * (len(kp) + 1 - len(coeffs)))
                for i, a in enumerate(kp):
                    coeffs[i + 1] += a
            polys[v] = coeffs
        heights[v] = 1 + max((heights[k] for k in kids), default=-1)
    return order, polys, heights


def select_chain(tree: BlockTree, c: WeightCoefficient) -> list[int]:
    """Greedy weighted descent from genesis; see module docstring for ties.

    Comparisons run in numeric-only mode: live trees routinely grow deeper
    than a root coefficient's index, where equal weight no longer implies
    equal structure, but the numeric ordering stays exact.
    """
    limit = c.kind == "bitcoin"
    order, polys, heights = _subtree_tables(tree, need_polys=not limit)
    sel_len: dict[int, int] = {}
    best_child: dict[int, Optional[int]] = {}
    for v in order:
        kids = tree.children[v]
        if not kids:
            sel_len[v] = 0
            best_child[v] = None
            continue
        best = kids[0]
        for challenger in kids[1:]:
            if limit:
                hc, hb = heights[challenger], heights[best]
                ordering = Ordering.GREATER if hc > hb else (Ordering.LESS if hc < hb else Ordering.EQUAL)
            else:
                ordering = compare_weight(polys[challenger], polys[best], c, numeric_only=True)
            if ordering is Ordering.GREATER:
                best = challenger
            elif ordering is Ordering.EQUAL and sel_len[challenger] > sel_len[best]:
                best = challenger
            # remaining ties keep the earlier arrival: children are in
            # arrival order, so the incumbent wins
        sel_len[v] = 1 + sel_len[best]
        best_child[v] = best
    chain = [tree.genesis_id]
    while best_child[chain[-1]] is not None:
        chain.append(best_child[chain[-1]])
    return chain


def medium_select(tree: BlockTree, c: WeightCoefficient) -> list[int]:
    return select_chain(tree, c)


def ghost_select(tree: BlockTree) -> list[int]:
    """Count-heaviest subtree descent (ties: longer selected chain, then arrival)."""
    order = sorted(tree.blocks, key=lambda b: tree.depth[b], reverse=True)
    counts: dict[int, int] = {}
    sel_len: dict[int, int] = {}
    best_child: dict[int, Optional[int]] = {}
    for v in order:
        kids = tree.children[v]
        counts[v] = 1 + sum(counts[k] for k in kids)
        if not kids:
            sel_len[v] = 0
            best_child[v] = None
            continue
        best = kids[0]
        for ch in kids[1:]:
            if counts[ch] > counts[best] or (counts[ch] == counts[best] and sel_len[ch] > sel_len[best]):
                best = ch
        sel_len[v] = 1 + sel_len[best]
        best_child[v] = best
    chain = [tree.genesis_id]
    while best_child[chain[-1]] is not None:
        chain.append(best_child[chain[-1]])
    return chain


def longest_chain_select(tree: BlockTree) -> list[int]:
    """Deepest-leaf descent; equal depths resolved by earlier arrival at the fork."""
    order = sorted(tree.blocks, key=lambda b: tree.depth[b], reverse=True)
    heights: dict[int, int] = {}
    best_child: dict[int, Optional[int]] = {}
    for v in order:
        kids = tree.children[v]
        if not kids:
            heights[v] = 0
            best_child[v] = None
            continue
        best = kids[0]
        for ch in kids[1:]:
            if heights[ch] > heights[best]:
                best = ch
        heights[v] = 1 + heights[best]
        best_child[v] = best
    chain = [tree.genesis_id]
    while best_child[chain[-1]] is not None:
        chain.append(best_child[chain[-1]])
    return chain


def compare_subtrees(tree: BlockTree, a: int, b: int, c: WeightCoefficient) -> Ordering:
    """Order two subtrees the way selection would (limit mode compares depth)."""
    if c.kind == "bitcoin":
        da, db = tree.subtree_depth(a), tree.subtree_depth(b)
        if da > db:
            return Ordering.GREATER
        return Ordering.LESS if da < db else Ordering.EQUAL
    return compare_weight(tree.weight_poly(a), tree.weight_poly(b), c, numeric_only=True)


def normalized_tree_weight(tree: BlockTree, block_id: int, c: WeightCoefficient, bits=None):
    """Enclosure of the subtree weight of block_id, relative to its own depth."""
    return evaluate_weight(tree.weight_poly(block_id), c, bits)


def k_dominant_prefix(
    tree: BlockTree,
    chain: list[int],
    c: WeightCoefficient,
    threshold,
    absolute: bool = False,
) -> list[int]:
    """Truncate a chain to the blocks whose subtree weight reaches ``threshold``.

    Weights are normalized to each block's own depth by default; pass
    ``absolute=True`` to weigh subtrees from genesis (multiplies by c**depth).
    Genesis is always retained.  Subtree weights shrink toward the head, so
    the cutoff is found by bisection.
    """
    if not chain or chain[0] != tree.genesis_id:
        raise ValueError("chain must start at genesis")

    def qualifies(block_id: int) -> bool:
        poly = tree.weight_poly(block_id)
        if absolute:
            shifted = [0] * tree.depth[block_id] + poly
            return poly_meets_threshold(trim_poly(shifted), c, threshold)
        return poly_meets_threshold(poly, c, threshold)

    lo, hi = 0, len(chain) - 1  # chain[0] always kept
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if qualifies(chain[mid]):
            lo = mid
        else:
            hi = mid - 1
    return chain[: lo + 1]


# ----- serialization --------------------------------------------------------


def write_tree(tree: BlockTree, path: str) -> None:
    """One block per line: id parent depth miner round arrival ('-' = no parent)."""
    rows = sorted(tree.blocks.values(), key=lambda b: tree.arrival[b.id])
    with open(path, "w", newline="\n") as fh:
        for b in rows:
            parent = "-" if b.parent is None else str(b.parent)
            fh.write(f"{b.id} {parent} {tree.depth[b.id]} {b.miner} {b.round_mined} {tree.arrival[b.id]}\n")


def read_tree(path: str) -> BlockTree:
    tree: Optional[BlockTree] = None
    pending: list[tuple[int, Block]] = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            bid, parent, depth, miner, rnd, arrival = parts
            blk = Block(
                id=int(bid),
                parent=None if parent == "-" else int(parent),
                miner=int(miner),
                round_mined=int(rnd),
            )
            if blk.parent is None:
                tree = BlockTree(genesis=blk)
            else:
                pending.append((int(arrival), blk))
    if tree is None:
        raise ValueError(f"no genesis line in {path}")
    pending.sort()
    tree.validate_and_attach([b for _, b in pending])
    if tree.pending_blocks():
        raise ValueError(f"dangling blocks in {path}")
    return tree
