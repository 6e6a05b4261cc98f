"""In-process simulator of the three-phase federated protocol.

Phase 1 trains a global head on a frozen backbone, either from streamed
pooled features or by FedAvg of locally probed heads. Phase 2 runs the
progressive-freezing schedule at every site and averages only the
currently unfrozen groups. Phase 3 fits a site-specific head on the shared
frozen backbone. Rounds are synchronous; sites are processed in ascending
``site_id`` order so the simulation is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import nnet
from .cohort import Cohort
from .freeze import FreezePlan, Mode, make_plan
from .metrics import MetricsReport, evaluate
from .nnet import Network
from .optim import AdamWState, discriminative_multipliers
from .splitter import make_folds
from .trainer import (FoldData, TrainConfig, batched_features, fold_data, linear_probe,
                      predict_scores, run_epoch, train_fold)


class ProtocolError(RuntimeError):
    pass


class Phase1Mode(str, Enum):
    FEATURE_STREAM = "FEATURE_STREAM"
    HEAD_FEDAVG = "HEAD_FEDAVG"


@dataclass(frozen=True)
class FederationConfig:
    n_sites: int = 3
    rounds_per_phase: tuple[int, int, int] = (2, 4, 2)
    local_epochs_per_round: int = 2
    phase1_mode: Phase1Mode = Phase1Mode.FEATURE_STREAM
    skew_concentration: float = 10.0
    aggregate_phase2: bool = True
    labels_shareable: bool = True

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if len(self.rounds_per_phase) != 3 or min(self.rounds_per_phase) < 1:
            raise ValueError("each phase needs at least one round")
        if self.local_epochs_per_round < 1:
            raise ValueError("local_epochs_per_round must be >= 1")

    def phase_epochs(self, phase: int) -> int:
        return self.rounds_per_phase[phase - 1] * self.local_epochs_per_round


@dataclass
class Site:
    site_id: int
    shard: Cohort
    data: FoldData
    seed: int
    net: Network | None = None
    opt: AdamWState | None = None
    head: dict | None = None

    @property
    def n_train(self) -> int:
        return len(self.data.train_y)


@dataclass
class LedgerRow:
    round: int
    site: int
    phase: int
    upstream_params: int
    downstream_params: int
    features_sent: int
    groups: tuple[str, ...] = ()


@dataclass
class CommLedger:
    rows: list[LedgerRow] = field(default_factory=list)

    def record(self, *args, **kwargs) -> None:
        self.rows.append(LedgerRow(*args, **kwargs))

    def total(self, phase: int | None = None, key: str = "upstream_params") -> int:
        return sum(getattr(r, key) for r in self.rows if phase is None or r.phase == phase)

    def as_rows(self) -> list[dict]:
        return [{"round": r.round, "site": r.site, "phase": r.phase,
                 "upstream_params": r.upstream_params, "downstream_params": r.downstream_params,
                 "features_sent": r.features_sent} for r in self.rows]


# ----------------------------------------------------------------- aggregation

def fedavg(updates: list[tuple[dict, int]]) -> dict:
    """Sample-count-weighted mean of nested ``{group: {param: array}}`` updates.

    Computed as ``x0 + sum_i w_i (x_i - x0)`` so that identical updates
    reproduce ``x0`` bit-for-bit.
    """
    if not updates:
        raise ProtocolError("no updates to aggregate")
    ref, _ = updates[0]
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ProtocolError("sample counts must be positive")
    out = {}
    for g, params in ref.items():
        out[g] = {}
        for k, x0 in params.items():
            x0 = np.asarray(x0, dtype=np.float64)
            acc = np.zeros_like(x0)
            for upd, n in updates:
                try:
                    xi = np.asarray(upd[g][k], dtype=np.float64)
                except KeyError as e:
                    raise ProtocolError(f"update is missing {g}.{k}") from e
                if xi.shape != x0.shape:
                    raise ProtocolError(f"shape mismatch for {g}.{k}: {xi.shape} vs {x0.shape}")
                acc += (n / total) * (xi - x0)
            out[g][k] = x0 + acc
        for upd, _ in updates[1:]:
            if set(upd[g]) != set(params):
                raise ProtocolError(f"parameter sets differ in group {g}")
    for upd, _ in updates[1:]:
        if set(upd) != set(ref):
            raise ProtocolError("updates cover different parameter groups")
    return out


def pack_trainable(net: Network) -> dict:
    """Serialize exactly the currently trainable groups (what goes on the wire)."""
    return {g.name: {k: v.copy() for k, v in g.params.items()} for g in net.groups if g.trainable}


def payload_size(payload: dict) -> int:
    return int(sum(np.size(v) for params in payload.values() for v in params.values()))


# ---------------------------------------------------------------- site set-up

def shard_cohort(cohort: Cohort, n_sites: int, seed: int, concentration: float = 10.0) -> list[Cohort]:
    """Disjoint patient-level shards with a Dirichlet-tilted positive share per site."""
    rng = np.random.default_rng([seed, 0xF0])
    pos = rng.permutation(cohort.ids(1))
    neg = rng.permutation(cohort.ids(0))
    if n_sites == 1:
        return [cohort]
    share_pos = rng.dirichlet(np.full(n_sites, concentration))
    share_neg = rng.dirichlet(np.full(n_sites, concentration))

    def cut(ids, shares):
        bounds = np.round(np.cumsum(shares) * len(ids)).astype(int)
        return np.split(ids, bounds[:-1])

    pos_parts, neg_parts = cut(pos, share_pos), cut(neg, share_neg)
    return [cohort.subset(list(p) + list(n)) for p, n in zip(pos_parts, neg_parts)]


def make_site(site_id: int, shard: Cohort, cfg: TrainConfig, seed: int, k_local: int = 5) -> Site:
    """Hold out one balanced fold of the shard as the site's local test split."""
    k = max(2, min(k_local, len(shard.ids(1, cfg.target))))
    plan = make_folds(shard, k=k, repeats=1, seed=seed, target=cfg.target)
    stats = shard.image_model.stats(cfg.init.domain)
    return Site(site_id, shard, fold_data(shard, plan.folds[0], stats, cfg.target), seed)


# --------------------------------------------------------------------- phases

def _require_same_backbone(sites: list[Site]) -> None:
    hashes = {s.net.hash(nnet.BACKBONE_GROUPS) for s in sites}
    if len(hashes) != 1:
        raise ProtocolError("sites do not share the same frozen backbone")


def _fresh_head(site: Site, net: Network, tag: int) -> dict:
    return nnet.init_head(net.arch, np.random.default_rng([site.seed, 0xF1, tag]))


def phase1_cold_start(sites: list[Site], backbone: Network, fed: FederationConfig,
                      cfg: TrainConfig, ledger: CommLedger) -> dict:
    """Global head on frozen pooled features; returns the head parameters."""
    sites = sorted(sites, key=lambda s: s.site_id)
    for s in sites:
        s.net = backbone.copy()
    _require_same_backbone(sites)
    head0 = {k: v.copy() for k, v in backbone.group("head").params.items()}
    fdim = backbone.arch.feature_dim
    head_size = fdim + 1
    epochs = fed.phase_epochs(1)
    if fed.phase1_mode is Phase1Mode.FEATURE_STREAM:
        if not fed.labels_shareable:
            raise ProtocolError("FEATURE_STREAM needs labels on the server; use HEAD_FEDAVG")
        feats, labels = [], []
        for s in sites:
            f = batched_features(s.net, s.data.train_x)
            feats.append(f)
            labels.append(s.data.train_y)
            ledger.record(0, s.site_id, 1, f.size + len(f), 0, len(f))
        server_seed = sites[0].seed
        head, _ = linear_probe(np.concatenate(feats), np.concatenate(labels), head0, epochs,
                               cfg, server_seed, stream="phase1")
        for s in sites:
            ledger.record(0, s.site_id, 1, 0, head_size, 0)
        return head
    # HEAD_FEDAVG: local probing, averaged every round
    feats = {s.site_id: batched_features(s.net, s.data.train_x) for s in sites}
    opts = {s.site_id: None for s in sites}
    spe = {s.site_id: math.ceil(s.n_train / cfg.batch_size) for s in sites}
    scheds = {sid: cfg.optim.schedule(epochs * n, cfg.probe_lr) for sid, n in spe.items()}
    head = head0
    E = fed.local_epochs_per_round
    for r in range(fed.rounds_per_phase[0]):
        updates = []
        for s in sites:
            local, opts[s.site_id] = linear_probe(
                feats[s.site_id], s.data.train_y, head, E, cfg, s.seed, stream="phase1",
                opt=opts[s.site_id], schedule=scheds[s.site_id], epoch0=r * E)
            updates.append(({"head": local}, s.n_train))
            ledger.record(r, s.site_id, 1, head_size, 0, 0)
        head = fedavg(updates)["head"]
        for s in sites:
            ledger.record(r, s.site_id, 1, 0, head_size, 0)
    return head


def phase2_plan(fed: FederationConfig) -> FreezePlan:
    """Round-indexed ProgFreeze plan shared by every site."""
    return make_plan(Mode.PROG_FREEZE, 0, fed.rounds_per_phase[1])


def phase2_epoch_plan(fed: FederationConfig, plan: FreezePlan | None = None) -> FreezePlan:
    """The round plan expressed in local epochs (each round spans ``local_epochs_per_round``)."""
    plan = plan or phase2_plan(fed)
    E = fed.local_epochs_per_round
    return make_plan(Mode.PROG_FREEZE, 0, fed.phase_epochs(2), [(e * E, g) for e, g in plan.events])


def phase2_progressive(sites: list[Site], global_net: Network, fed: FederationConfig,
                       cfg: TrainConfig, ledger: CommLedger, plan: FreezePlan | None = None,
                       on_round=None) -> Network:
    """Local progressive unfreezing; only unfrozen groups are uploaded and averaged.

    Local epochs use the single-site trainer's RNG streams and schedule, so
    a one-site federation retraces ``train_fold`` exactly. ``on_round(r, sites)``
    is called after each round's broadcast.
    """
    sites = sorted(sites, key=lambda s: s.site_id)
    plan = plan or phase2_plan(fed)
    mult = discriminative_multipliers(cfg.optim.lr_decay)
    E = fed.local_epochs_per_round
    total_epochs = fed.phase_epochs(2)
    for s in sites:
        s.net = global_net.copy()
        s.opt = cfg.optim.new_state()
    scheds = {s.site_id: cfg.optim.schedule(total_epochs * math.ceil(s.n_train / cfg.batch_size))
              for s in sites}
    prev: frozenset = frozenset()
    for r in range(fed.rounds_per_phase[1]):
        trainable = plan.trainable_at(r)
        for s in sites:
            s.net.set_trainable(trainable)
            for g in trainable - prev:
                s.opt.reset_group(g)
        if len({frozenset(s.net.trainable_groups()) for s in sites}) != 1:
            raise ProtocolError("sites disagree on the freeze state")
        prev = trainable
        updates = []
        for s in sites:
            spe = math.ceil(s.n_train / cfg.batch_size)
            for e in range(r * E, (r + 1) * E):
                run_epoch(s.net, s.opt, s.data.train_x, s.data.train_y, e, scheds[s.site_id],
                          e * spe, cfg, s.seed, cfg.cutmix.enabled, mult)
            payload = pack_trainable(s.net)
            updates.append((payload, s.n_train))
            ledger.record(r, s.site_id, 2, payload_size(payload), 0, 0, tuple(sorted(payload)))
        if fed.aggregate_phase2:
            avg = fedavg(updates)
            for s in sites:
                s.net.load_groups(avg)
                ledger.record(r, s.site_id, 2, 0, payload_size(avg), 0, tuple(sorted(avg)))
        if on_round is not None:
            on_round(r, sites)
    out = sites[0].net.copy()
    out.set_trainable(nnet.GROUP_NAMES)
    return out


def phase3_site_adapt(sites: list[Site], global_net: Network, fed: FederationConfig,
                      cfg: TrainConfig, ledger: CommLedger) -> dict[int, dict]:
    """Each site fits a fresh head on the frozen federated backbone."""
    sites = sorted(sites, key=lambda s: s.site_id)
    heads = {}
    epochs = fed.phase_epochs(3)
    for s in sites:
        s.net = global_net.copy()
        s.net.set_trainable(["head"])
        feats = batched_features(s.net, s.data.train_x)
        head, _ = linear_probe(feats, s.data.train_y, _fresh_head(s, s.net, 3), epochs, cfg,
                               s.seed, stream="phase3")
        s.net.load_groups({"head": head})
        s.head = head
        heads[s.site_id] = head
        # heads are exchanged once at the end for the cross-site evaluation
        ledger.record(0, s.site_id, 3, s.net.group("head").size(), 0, 0, ("head",))
    return heads


def cross_site_matrix(sites: list[Site], threshold: float = 0.5) -> list[list[MetricsReport]]:
    """Entry (i, j): site i's final model evaluated on site j's local test split."""
    sites = sorted(sites, key=lambda s: s.site_id)
    grid = []
    for si in sites:
        row = []
        for sj in sites:
            scores = predict_scores(si.net, sj.data.test_x)
            row.append(evaluate(list(zip(scores.tolist(), sj.data.test_y.tolist())), threshold))
        grid.append(row)
    return grid


@dataclass
class FederationResult:
    global_head: dict
    global_net: Network
    site_heads: dict[int, dict]
    matrix: list[list[MetricsReport]]
    ledger: CommLedger
    sites: list[Site]


def run_federation(sites: list[Site], backbone: Network, fed: FederationConfig,
                   cfg: TrainConfig) -> FederationResult:
    ledger = CommLedger()
    head = phase1_cold_start(sites, backbone, fed, cfg, ledger)
    net = backbone.copy()
    net.load_groups({"head": head})
    net = phase2_progressive(sites, net, fed, cfg, ledger)
    heads = phase3_site_adapt(sites, net, fed, cfg, ledger)
    matrix = cross_site_matrix(sites, cfg.threshold)
    return FederationResult(head, net, heads, matrix, ledger, sorted(sites, key=lambda s: s.site_id))


# ------------------------------------------------------ single-site reference

@dataclass
class LocalProtocolResult:
    head_phase1: dict
    net_phase2: Network
    head_phase3: dict
    net_final: Network


def local_protocol(data: FoldData, backbone: Network, fed: FederationConfig, cfg: TrainConfig,
                   seed: int) -> LocalProtocolResult:
    """The three phases run through the single-site trainer, with no federation machinery.

    Phase 1 and 3 are ``linear_probe`` on frozen features; phase 2 is
    ``train_fold`` under the epoch-indexed version of the shared plan.
    """
    net = backbone.copy()
    head0 = {k: v.copy() for k, v in net.group("head").params.items()}
    head1, _ = linear_probe(batched_features(net, data.train_x), data.train_y, head0,
                            fed.phase_epochs(1), cfg, seed, stream="phase1")
    net.load_groups({"head": head1})
    plan = phase2_epoch_plan(fed)
    cfg2 = replace(cfg, mode=Mode.PROG_FREEZE, probe_epochs=0, total_epochs=plan.total_epochs,
                   events=plan.events)
    net2, _, _ = train_fold(net, data, cfg2, seed)
    net2.set_trainable(nnet.GROUP_NAMES)
    net3 = net2.copy()
    net3.set_trainable(["head"])
    head_init = nnet.init_head(net3.arch, np.random.default_rng([seed, 0xF1, 3]))
    head3, _ = linear_probe(batched_features(net3, data.train_x), data.train_y, head_init,
                            fed.phase_epochs(3), cfg, seed, stream="phase3")
    net3.load_groups({"head": head3})
    return LocalProtocolResult(head1, net2, head3, net3)
