"""Round-driven execution engine.

Parties sharing an identical delivery history share one ``TreeView``; views
split (by cloning) only when the adversary or a partition makes deliveries
diverge, which keeps full-length runs cheap while per-party semantics stay
exact.  A TreeView maintains its selected main chain incrementally: a block
insertion can only flip selection at the fork where its branch meets the
main chain, so each round compares just the touched fork sites instead of
re-running selection from genesis.

Own mined blocks travel through diffusion like everyone else's and land at
the next round boundary, so all parties in a partition observe one arrival
order.  (A miner still mines on the tip it selected that round; deferring
its own attach only affects local tie-breaking within the mining round.)
"""

from __future__ import annotations

from bisect import bisect_right, insort
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .blocktree import Block, BlockTree, GENESIS_ID, make_genesis
from .diffusion import DiffusionState, end_of_round, heal_partition, set_partition
from .mining import MiningStream, ProtocolParams, mine_round
from .weights import Ordering, WeightCoefficient, coefficient_float, compare_weight, poly_meets_threshold, trim_poly

__all__ = ["TreeView", "SimTrace", "ViewTrace", "run_simulation", "SimSetup"]

_CACHE_MIN_SIZE = 48  # subtree size beyond which fork-site polys are cached


# ----- incremental view -----------------------------------------------------


class _Site:
    __slots__ = ("poly", "count", "maxdepth")

    def __init__(self, poly: list[int], count: int, maxdepth: int):
        self.poly = poly  # indexed by depth relative to the site node
        self.count = count
        self.maxdepth = maxdepth  # absolute


class TreeView:
    """A local block tree with an incrementally maintained main chain."""

    def __init__(
        self,
        coeff: WeightCoefficient,
        genesis: Optional[Block] = None,
        threshold: Optional[float] = None,
    ):
        self.coeff = coeff
        self.tree = BlockTree(genesis)
        g = self.tree.genesis_id
        self.chain: list[int] = [g]
        self.mc_pos: dict[int, int] = {g: 0}
        self.membership: dict[int, list[list[Optional[int]]]] = {g: [[0, None]]}
        self.accepted_this_round: list[Block] = []
        # selection bookkeeping
        self._anchor: dict[int, tuple[int, int, int]] = {}  # id -> (gen, anchor, branch_root)
        self._gen = 0
        self._sites: dict[int, _Site] = {}
        self._mc_site_depths: list[int] = []
        self._touched: list[tuple[int, int]] = []
        # chain-quality cutoff (prefix threshold) bookkeeping
        self.threshold = threshold
        self._c_float = None if coeff.kind == "bitcoin" else coefficient_float(coeff)
        self.cutoff_depth = 0
        # transactions already on the main chain (depth of including block)
        self.txn_depth: dict[str, int] = {}

    # -- basic accessors --

    @property
    def head(self) -> int:
        return self.chain[-1]

    @property
    def length(self) -> int:
        return len(self.chain) - 1

    def cutoff_id(self) -> int:
        return self.chain[min(self.cutoff_depth, len(self.chain) - 1)]

    # -- cloning (view split on divergent delivery) --

    def clone(self) -> "TreeView":
        other = TreeView.__new__(TreeView)
        other.coeff = self.coeff
        src = self.tree
        dst = BlockTree.__new__(BlockTree)
        dst.genesis_id = src.genesis_id
        dst.blocks = dict(src.blocks)
        dst.children = {k: list(v) for k, v in src.children.items()}
        dst.depth = dict(src.depth)
        dst.arrival = dict(src.arrival)
        dst._next_arrival = src._next_arrival
        dst._pending = list(src._pending)
        other.tree = dst
        other.chain = list(self.chain)
        other.mc_pos = dict(self.mc_pos)
        other.membership = {k: [list(iv) for iv in v] for k, v in self.membership.items()}
        other.accepted_this_round = []
        other._anchor = {}
        other._gen = 0
        other._sites = {}
        other._mc_site_depths = []
        other._touched = list(self._touched)
        other.threshold = self.threshold
        other._c_float = self._c_float
        other.cutoff_depth = self.cutoff_depth
        other.txn_depth = dict(self.txn_depth)
        return other

    # -- insertion --

    def deliver(self, blocks: Iterable[Block], validator=None) -> list[Block]:
        accepted = self.tree.validate_and_attach(blocks, validator)
        for b in accepted:
            self._note_insert(b)
        self.accepted_this_round = accepted
        return accepted

    def _find_anchor(self, block_id: int) -> tuple[int, int]:
        """Deepest main-chain ancestor of the block and the child leading away."""
        path = []
        v = block_id
        anchor = branch = None
        while True:
            if v in self.mc_pos:
                anchor, branch = v, path[-1] if path else v
                break
            got = self._anchor.get(v)
            if got is not None and got[0] == self._gen:
                anchor, branch = got[1], got[2]
                break
            path.append(v)
            v = self.tree.blocks[v].parent
        if path and path[-1] != branch and branch == path[-1]:
            pass
        entry = (self._gen, anchor, branch)
        for u in path:
            self._anchor[u] = entry
        return anchor, branch

    def _note_insert(self, b: Block) -> None:
        anchor, branch = self._find_anchor(b.id)
        d = self.tree.depth[b.id]
        da = self.mc_pos[anchor]
        # update cached fork-site polynomials that contain the new block
        if self._mc_site_depths:
            for sd in self._mc_site_depths[: bisect_right(self._mc_site_depths, da)]:
                self._bump(self.chain[sd], d)
        if branch != b.id and branch in self._sites:
            self._bump(branch, d)
        elif branch == b.id and b.id in self._sites:  # pragma: no cover - fresh block never cached
            self._bump(b.id, d)
        self._touched.append((anchor, branch))

    def _bump(self, site_id: int, abs_depth: int) -> None:
        site = self._sites.get(site_id)
        if site is None:
            return
        rel = abs_depth - self.tree.depth[site_id]
        if rel >= len(site.poly):
            site.poly.extend([0] * (rel + 1 - len(site.poly)))
        site.poly[rel] += 1
        site.count += 1
        if abs_depth > site.maxdepth:
            site.maxdepth = abs_depth

    # -- subtree measurements --

    def _site_for(self, node: int, cache: bool = True) -> _Site:
        got = self._sites.get(node)
        if got is not None:
            return got
        base = self.tree.depth[node]
        poly = [0]
        count = 0
        maxdepth = base
        stack = [node]
        children = self.tree.children
        depth = self.tree.depth
        while stack:
            v = stack.pop()
            dv = depth[v]
            rel = dv - base
            if rel >= len(poly):
                poly.extend([0] * (rel + 1 - len(poly)))
            poly[rel] += 1
            count += 1
            if dv > maxdepth:
                maxdepth = dv
            stack.extend(children[v])
        site = _Site(poly, count, maxdepth)
        if cache and count >= _CACHE_MIN_SIZE:
            self._sites[node] = site
            pos = self.mc_pos.get(node)
            if pos is not None:
                insort(self._mc_site_depths, pos)
        return site

    def _cmp_subtrees(self, a: int, b: int) -> Ordering:
        sa, sb = self._site_for(a), self._site_for(b)
        if self.coeff.kind == "bitcoin":
            if sa.maxdepth != sb.maxdepth:
                return Ordering.GREATER if sa.maxdepth > sb.maxdepth else Ordering.LESS
            return Ordering.EQUAL
        if self.coeff.kind == "ghost":
            if sa.count != sb.count:
                return Ordering.GREATER if sa.count > sb.count else Ordering.LESS
            return Ordering.EQUAL
        return compare_weight(
            trim_poly(sa.poly), trim_poly(sb.poly), self.coeff, numeric_only=True
        )

    def _selected_len(self, node: int) -> int:
        """Length of the chain selection would pick inside this subtree."""
        if self.coeff.kind == "bitcoin":
            return self._site_for(node).maxdepth - self.tree.depth[node]
        length = 0
        v = node
        while True:
            kids = self.tree.children[v]
            if not kids:
                return length
            v = self._pick_child(kids)
            length += 1

    def _beats(self, challenger: int, incumbent: int) -> bool:
        ordering = self._cmp_subtrees(challenger, incumbent)
        if ordering is not Ordering.EQUAL:
            return ordering is Ordering.GREATER
        lc, li = self._selected_len(challenger), self._selected_len(incumbent)
        if lc != li:
            return lc > li
        return self.tree.arrival[challenger] < self.tree.arrival[incumbent]

    def _pick_child(self, kids: list[int]) -> int:
        best = kids[0]
        for ch in kids[1:]:
            if self._beats(ch, best):
                best = ch
        return best

    # -- per-round reselection --

    def reselect(self, round_no: int) -> None:
        touched = self._touched
        self._touched = []
        if touched:
            seen = set()
            pairs = []
            for anchor, branch in touched:
                if (anchor, branch) not in seen:
                    seen.add((anchor, branch))
                    pairs.append((anchor, branch))
            pairs.sort(key=lambda ab: self.mc_pos.get(ab[0], 1 << 60))
            for anchor, branch in pairs:
                pos = self.mc_pos.get(anchor)
                if pos is None or branch in self.mc_pos:
                    continue
                if pos == len(self.chain) - 1:
                    continue  # anchor is the head; extension phase handles it
                incumbent = self.chain[pos + 1]
                if self._beats(branch, incumbent):
                    self._reorg(pos, branch, round_no)
        # extend through any children of the current head
        while True:
            kids = self.tree.children[self.head]
            if not kids:
                break
            self._append_mc(self._pick_child(kids), round_no)
        if self.threshold is not None:
            self._advance_cutoff()

    def _append_mc(self, block_id: int, round_no: int) -> None:
        self.chain.append(block_id)
        self.mc_pos[block_id] = len(self.chain) - 1
        self.membership.setdefault(block_id, []).append([round_no, None])
        blk = self.tree.blocks[block_id]
        for tx in blk.payload:
            if tx not in self.txn_depth:
                self.txn_depth[tx] = self.mc_pos[block_id]

    def _reorg(self, fork_pos: int, winner: int, round_no: int) -> None:
        for bid in self.chain[fork_pos + 1 :]:
            self.membership[bid][-1][1] = round_no
            del self.mc_pos[bid]
            blk = self.tree.blocks[bid]
            for tx in blk.payload:
                if self.txn_depth.get(tx, -1) > fork_pos:
                    del self.txn_depth[tx]
        del self.chain[fork_pos + 1 :]
        # caches keyed to the old chain shape die; polys themselves stay valid
        self._gen += 1
        keep = {}
        for node, site in self._sites.items():
            if node in self.mc_pos or self.tree.blocks[node].parent in self.mc_pos:
                keep[node] = site
        self._sites = keep
        self._mc_site_depths = sorted(p for node, p in ((n, self.mc_pos.get(n)) for n in keep) if p is not None)
        # descend the winning branch
        v = winner
        while True:
            self._append_mc(v, round_no)
            if v in self._sites and v not in (node for node in ()):
                pass
            kids = self.tree.children[v]
            if not kids:
                break
            v = self._pick_child(kids)
        # newly on-chain cached sites join the depth index
        for node, pos in self.mc_pos.items():
            if node in self._sites and pos not in self._mc_site_depths and pos > fork_pos:
                insort(self._mc_site_depths, pos)
        if self.cutoff_depth > fork_pos and self.threshold is not None:
            self._rebuild_cutoff()

    # -- prefix cutoff --

    def _qualifies(self, block_id: int) -> bool:
        site = self._site_for(block_id)
        thr = self.threshold
        if self.coeff.kind == "ghost":
            return site.count >= thr
        value = 0.0
        cf = self._c_float
        for a in reversed(site.poly):
            value = value * cf + a
        if value > thr * (1 + 1e-9):
            return True
        if value < thr * (1 - 1e-9):
            return False
        return poly_meets_threshold(trim_poly(site.poly), self.coeff, thr)

    def _advance_cutoff(self) -> None:
        while self.cutoff_depth + 1 < len(self.chain) and self._qualifies(self.chain[self.cutoff_depth + 1]):
            self.cutoff_depth += 1

    def _rebuild_cutoff(self) -> None:
        lo, hi = 0, len(self.chain) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self._qualifies(self.chain[mid]):
                lo = mid
            else:
                hi = mid - 1
        self.cutoff_depth = lo

    # -- ledger reading --

    def pending_txns(self, injected: dict[str, int], upto_round: int, cap: int = 64) -> tuple[str, ...]:
        out = []
        for tx, rnd in injected.items():
            if rnd <= upto_round and tx not in self.txn_depth:
                out.append(tx)
                if len(out) >= cap:
                    break
        return tuple(out)


# ----- traces ---------------------------------------------------------------


@dataclass
class ViewTrace:
    view_id: int
    start_round: int
    heads: list[int]
    lens: list[int]
    cutoffs: list[int]
    membership: dict[int, list[list[Optional[int]]]] = field(default_factory=dict)
    view: Optional[TreeView] = None


@dataclass
class SimTrace:
    """Everything the checkers need from one seeded execution."""

    params: ProtocolParams
    coeff: WeightCoefficient
    seed: int
    rounds: int
    adversary_label: str
    corrupted: frozenset[int]
    blocks: dict[int, Block]
    block_depth: dict[int, int]
    x: list[int]
    x_tilde: list[int]
    y: list[int]
    z: list[int]
    z_hat: list[int]
    party_view: list[list[int]]  # per round, per party -> view id
    views: list[ViewTrace]
    partition_rounds: list[tuple[int, tuple[int, ...]]]
    injected_txns: dict[str, int]
    adversary_info: dict
    delivery_events: list = field(default_factory=list)

    def honest_parties(self) -> list[int]:
        return [i for i in range(self.params.n) if i not in self.corrupted]

    def views_at(self, round_no: int) -> list[int]:
        row = self.party_view[round_no]
        return sorted({row[p] for p in self.honest_parties()})

    def in_chain(self, view_id: int, block_id: int, round_no: int) -> bool:
        ivs = self.views[view_id].membership.get(block_id)
        if not ivs:
            return False
        for enter, exit_ in ivs:
            if enter <= round_no and (exit_ is None or round_no < exit_):
                return True
        return False


# ----- engine ---------------------------------------------------------------


@dataclass
class SimSetup:
    params: ProtocolParams
    coeff: WeightCoefficient
    rounds: int
    seed: int
    strategy: Optional[object] = None  # adversary.Strategy
    corrupted: Optional[frozenset[int]] = None
    k_threshold: Optional[float] = None
    txn_schedule: Optional[dict[str, int]] = None  # txn id -> inject round
    log_deliveries: bool = False
    stop_after_attack: Optional[int] = None
    payload_cap: int = 64


class _Engine:
    def __init__(self, setup: SimSetup):
        self.setup = setup
        self.params = setup.params
        self.coeff = setup.coeff
        self.corrupted = (
            setup.corrupted
            if setup.corrupted is not None
            else frozenset(range(setup.params.n - setup.params.t, setup.params.n))
        )
        if len(self.corrupted) != setup.params.t:
            raise ValueError("corrupted set size must equal t")
        self.stream = MiningStream(setup.params, setup.seed, setup.rounds)
        self.diffusion = DiffusionState(setup.params.n, log_events=setup.log_deliveries)
        genesis = make_genesis()
        self.registry: dict[int, Block] = {genesis.id: genesis}
        self.block_depth: dict[int, int] = {genesis.id: 0}
        self.next_id = 1
        threshold = setup.k_threshold if self.coeff.kind != "bitcoin" else None
        base = TreeView(self.coeff, threshold=threshold)
        self.views: list[TreeView] = [base]
        self.view_traces: list[ViewTrace] = [
            ViewTrace(view_id=0, start_round=0, heads=[genesis.id], lens=[0], cutoffs=[genesis.id])
        ]
        self.party_view_now: list[int] = [0] * setup.params.n
        # adversary's omniscient public tree (honest blocks land the round they
        # are mined: the adversary is rushing)
        self.adv_public = TreeView(self.coeff)
        self.honest_mined_this_round: list[Block] = []
        self.released_ids: set[int] = set()
        self.trace = SimTrace(
            params=setup.params,
            coeff=setup.coeff,
            seed=setup.seed,
            rounds=setup.rounds,
            adversary_label=getattr(setup.strategy, "label", "none"),
            corrupted=self.corrupted,
            blocks=self.registry,
            block_depth=self.block_depth,
            x=[0],
            x_tilde=[0],
            y=[0],
            z=[0],
            z_hat=[0],
            party_view=[list(self.party_view_now)],
            views=self.view_traces,
            partition_rounds=[],
            injected_txns=dict(setup.txn_schedule or {}),
            adversary_info={},
        )
        if setup.strategy is not None:
            setup.strategy.attach(self)

    # -- helpers exposed to strategies --

    def mint(self, parent: int, miner: int, round_no: int, ctr: int, payload: tuple = ()) -> Block:
        blk = Block(id=self.next_id, parent=parent, miner=miner, round_mined=round_no, ctr=ctr, payload=payload)
        self.next_id += 1
        self.registry[blk.id] = blk
        self.block_depth[blk.id] = self.block_depth[parent] + 1
        return blk

    def honest_views(self) -> dict[int, TreeView]:
        return {p: self.views[self.party_view_now[p]] for p in range(self.params.n) if p not in self.corrupted}

    def view_of_partition(self, label: int) -> TreeView:
        for p in range(self.params.n):
            if p not in self.corrupted and self.diffusion.partition[p] == label:
                return self.views[self.party_view_now[p]]
        raise ValueError(f"no honest party carries partition label {label}")

    # -- round pipeline --

    def _regroup_and_deliver(self, round_no: int) -> None:
        buffers = self.diffusion.take_buffers()
        honest = [p for p in range(self.params.n) if p not in self.corrupted]
        groups: dict[tuple, list[int]] = {}
        for p in honest:
            sig = (self.party_view_now[p], tuple(b.id for b in buffers[p]))
            groups.setdefault(sig, []).append(p)
        # split views whose members received different deliveries
        owners: dict[int, list[tuple]] = {}
        for sig in groups:
            owners.setdefault(sig[0], []).append(sig)
        delivered: dict[tuple, int] = {}
        for old_view, sigs in sorted(owners.items()):
            sigs.sort(key=lambda s: groups[s][0])
            for i, sig in enumerate(sigs):
                if i == 0:
                    delivered[sig] = old_view
                else:
                    clone = self.views[old_view].clone()
                    self.views.append(clone)
                    vid = len(self.views) - 1
                    parent_tr = self.view_traces[old_view]
                    self.view_traces.append(
                        ViewTrace(
                            view_id=vid,
                            start_round=round_no,
                            heads=list(parent_tr.heads),
                            lens=list(parent_tr.lens),
                            cutoffs=list(parent_tr.cutoffs),
                        )
                    )
                    delivered[sig] = vid
                for p in groups[sig]:
                    self.party_view_now[p] = delivered[sig]
        # apply deliveries and reselect once per live view
        live = sorted({self.party_view_now[p] for p in honest})
        for vid in live:
            view = self.views[vid]
            member = next(p for p in honest if self.party_view_now[p] == vid)
            view.deliver(buffers[member])
            view.reselect(round_no)
        for vid, view in enumerate(self.views):
            tr = self.view_traces[vid]
            tr.heads.append(view.head)
            tr.lens.append(view.length)
            tr.cutoffs.append(view.cutoff_id())

    def _mine(self, round_no: int):
        injected = self.trace.injected_txns
        cap = self.setup.payload_cap

        def payload_for(party: int) -> tuple[str, ...]:
            view = self.views[self.party_view_now[party]]
            return view.pending_txns(injected, round_no, cap)

        tips = {
            p: self.views[self.party_view_now[p]].head
            for p in range(self.params.n)
            if p not in self.corrupted
        }
        result = mine_round(
            self.params, round_no, tips, self.stream,
            corrupted=self.corrupted, next_id=self.next_id, payload_for=payload_for,
        )
        self.next_id = result.next_id
        for blk in result.honest:
            self.registry[blk.id] = blk
            self.block_depth[blk.id] = self.block_depth[blk.parent] + 1
        self.honest_mined_this_round = result.honest
        # rushing adversary sees the new honest blocks immediately
        self.adv_public.deliver(result.honest)
        self.adv_public.reselect(round_no)
        x = len(result.honest)
        self.trace.x.append(x)
        self.trace.x_tilde.append(1 if x >= 1 else 0)
        self.trace.y.append(1 if x == 1 else 0)
        self.trace.z.append(len(result.corrupted))
        return result

    def run(self) -> SimTrace:
        setup = self.setup
        horizon = setup.rounds
        stop_round = None
        partition_dirty = True
        r = 0
        while r < horizon:
            r += 1
            self._regroup_and_deliver(r)
            result = self._mine(r)
            actions = None
            if setup.strategy is not None:
                actions = setup.strategy.step(r, result.corrupted)
            # partition commands take effect for this round's diffusion
            merge_broadcasts: list[tuple[int, Block]] = []
            if actions is not None and actions.partition_labels is not None:
                set_partition(self.diffusion, actions.partition_labels)
                partition_dirty = True
            if actions is not None and actions.heal_and_merge:
                merge_broadcasts = self._merge_broadcasts()
                heal_partition(self.diffusion)
                partition_dirty = True
            if partition_dirty:
                self.trace.partition_rounds.append((r, tuple(self.diffusion.partition)))
                partition_dirty = False
            honest_broadcasts = [(blk.miner, blk) for blk in result.honest]
            honest_broadcasts.extend(merge_broadcasts)
            honest_broadcasts.extend(self._rebroadcasts())
            adversary_messages: list[tuple[Block, tuple[int, ...]]] = []
            released_now = 0
            if actions is not None:
                everyone = tuple(range(self.params.n))
                for blk in actions.broadcast:
                    adversary_messages.append((blk, everyone))
                for blk, recipients in actions.selective:
                    adversary_messages.append((blk, tuple(recipients)))
                for blk, _ in adversary_messages:
                    if blk.id not in self.released_ids:
                        self.released_ids.add(blk.id)
                        released_now += 1
                        if blk.id not in self.adv_public.tree.blocks:
                            self.adv_public.deliver([blk])
                self.adv_public.reselect(r)
                if actions.attack_over is not None and stop_round is None:
                    self.trace.adversary_info["attack_end_round"] = r
                    self.trace.adversary_info["attack_duration_reported"] = actions.attack_over
                    if setup.stop_after_attack is not None:
                        stop_round = min(horizon, r + setup.stop_after_attack)
            self.trace.z_hat.append(released_now)
            end_of_round(self.diffusion, r, honest_broadcasts, adversary_messages)
            self.trace.party_view.append(list(self.party_view_now))
            if stop_round is not None and r >= stop_round:
                horizon = r
                break
        self.trace.rounds = horizon
        for vid, view in enumerate(self.views):
            tr = self.view_traces[vid]
            tr.membership = view.membership
            tr.view = view
        if setup.strategy is not None:
            self.trace.adversary_info.update(setup.strategy.summary())
        if setup.log_deliveries:
            self.trace.delivery_events = self.diffusion.events
        return self.trace

    def _rebroadcasts(self) -> list[tuple[int, Block]]:
        """Re-broadcast newly accepted blocks where someone might lack them.

        When a partition is served by a single view and a block arrived by
        ordinary broadcast, every member already got it, so the re-broadcast
        is skipped as a no-op.
        """
        out: list[tuple[int, Block]] = []
        honest = [p for p in range(self.params.n) if p not in self.corrupted]
        by_partition: dict[int, set[int]] = {}
        for p in honest:
            by_partition.setdefault(self.diffusion.partition[p], set()).add(self.party_view_now[p])
        for lbl, vids in sorted(by_partition.items()):
            multi = len(vids) > 1
            for vid in sorted(vids):
                view = self.views[vid]
                if not view.accepted_this_round:
                    continue
                rep = min(p for p in honest if self.party_view_now[p] == vid and self.diffusion.partition[p] == lbl)
                for blk in view.accepted_this_round:
                    if multi or blk.id in self.released_ids:
                        out.append((rep, blk))
        return out

    def _merge_broadcasts(self) -> list[tuple[int, Block]]:
        """On heal, every side re-broadcasts its whole tree so views merge."""
        out: list[tuple[int, Block]] = []
        honest = [p for p in range(self.params.n) if p not in self.corrupted]
        done = set()
        for p in honest:
            vid = self.party_view_now[p]
            if vid in done:
                continue
            done.add(vid)
            view = self.views[vid]
            for bid in view.tree.blocks:
                if bid != view.tree.genesis_id:
                    out.append((p, view.tree.blocks[bid]))
        return out


def run_simulation(setup: SimSetup) -> SimTrace:
    return _Engine(setup).run()
