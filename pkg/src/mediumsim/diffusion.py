"""Synchronous diffusion with partitions and selective adversarial delivery.

Honest broadcasts made during round r land in every same-partition buffer at
the start of round r+1; the adversary may additionally write any block to any
subset of parties, and those messages are appended after the honest ones, so
an honest block never arrives behind an adversarial one inside the same round
boundary.  Parties that receive a block they had not seen re-broadcast it at
the end of the round they attach it, which bounds selective delivery: a block
any honest party holds at round r is in all same-partition buffers by r+2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .blocktree import Block

__all__ = ["DeliveryEvent", "DiffusionState", "end_of_round", "set_partition", "heal_partition"]


@dataclass(frozen=True)
class DeliveryEvent:
    round_no: int
    recipient: int
    block_id: int
    source: str  # party index as text, or "adversary"


class DiffusionState:
    """Per-party receive buffers plus the current partition labels."""

    def __init__(self, n: int, log_events: bool = False):
        self.n = n
        self.buffers: list[list[Block]] = [[] for _ in range(n)]
        self._buffered_ids: list[set[int]] = [set() for _ in range(n)]
        self.partition: list[int] = [0] * n
        self.log_events = log_events
        self.events: list[DeliveryEvent] = []

    def partitioned(self) -> bool:
        return any(lbl != self.partition[0] for lbl in self.partition)

    def take_buffers(self) -> list[list[Block]]:
        """Hand the buffered blocks to their owners and reset the buffers."""
        out = self.buffers
        self.buffers = [[] for _ in range(self.n)]
        self._buffered_ids = [set() for _ in range(self.n)]
        return out

    def _push(self, recipient: int, block: Block, round_no: int, source: str) -> None:
        seen = self._buffered_ids[recipient]
        if block.id in seen:
            return
        seen.add(block.id)
        self.buffers[recipient].append(block)
        if self.log_events:
            self.events.append(DeliveryEvent(round_no, recipient, block.id, source))


def set_partition(state: DiffusionState, labels: list[int]) -> None:
    if len(labels) != state.n:
        raise ValueError("need one partition label per party")
    state.partition = list(labels)


def heal_partition(state: DiffusionState) -> None:
    state.partition = [0] * state.n


def end_of_round(
    state: DiffusionState,
    round_no: int,
    honest_broadcasts: Iterable[tuple[int, Block]],
    adversary_messages: Iterable[tuple[Block, Iterable[int]]] = (),
) -> None:
    """Queue this round's messages for delivery at the start of the next.

    ``honest_broadcasts`` are (sender, block) pairs; they are processed in
    ascending sender order and reach every other party sharing the sender's
    partition.  ``adversary_messages`` are (block, recipients) pairs delivered
    afterwards in submission order, ignoring partition boundaries.
    """
    for sender, block in sorted(honest_broadcasts, key=lambda sb: (sb[0], sb[1].id)):
        lbl = state.partition[sender]
        for recipient in range(state.n):
            if recipient != sender and state.partition[recipient] == lbl:
                state._push(recipient, block, round_no, str(sender))
    for block, recipients in adversary_messages:
        for recipient in sorted(set(recipients)):
            state._push(recipient, block, round_no, "adversary")


def write_delivery_log(events: Iterable[DeliveryEvent], path: str) -> None:
    """Text log, one line per delivery: round recipient block_id source."""
    with open(path, "w", newline="\n") as fh:
        for ev in events:
            fh.write(f"{ev.round_no} {ev.recipient} {ev.block_id} {ev.source}\n")
