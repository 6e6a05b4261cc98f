"""Single-site training: surrogate pretraining, probe + progressive fine-tuning, ablation grids."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import nnet
from .augment import AugmentConfig, CutMixConfig, augment, cutmix
from .cohort import Cohort, Domain, DomainStats, ImageModel, generate_pretrain_task, normalize
from .freeze import FreezePlan, Mode, apply, make_plan
from .metrics import MetricsReport, aggregate, evaluate
from .nnet import ArchConfig, Network, NumericalInstabilityError
from .optim import AdamWState, OneCycleSchedule, adamw_step, discriminative_multipliers
from .splitter import Fold, FoldPlan

log = logging.getLogger(__name__)


class Init(str, Enum):
    XRAY_LIKE_PRETRAIN = "XRAY_LIKE_PRETRAIN"
    RGB_LIKE_PRETRAIN = "RGB_LIKE_PRETRAIN"
    RANDOM = "RANDOM"

    @property
    def domain(self) -> Domain:
        return Domain.RGB_LIKE if self is Init.RGB_LIKE_PRETRAIN else Domain.XRAY_LIKE

    @property
    def prefix(self) -> str:
        return {"XRAY_LIKE_PRETRAIN": "XRV", "RGB_LIKE_PRETRAIN": "RGB", "RANDOM": "RAND"}[self.value]


@dataclass(frozen=True)
class OptimConfig:
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.3

    def new_state(self) -> AdamWState:
        return AdamWState(self.beta1, self.beta2, self.eps, self.weight_decay)

    def schedule(self, total_steps: int, max_lr: float | None = None) -> OneCycleSchedule:
        return OneCycleSchedule(total_steps, max_lr or self.max_lr, self.pct_start,
                                self.div_factor, self.final_div_factor)


@dataclass(frozen=True)
class TrainConfig:
    init: Init = Init.XRAY_LIKE_PRETRAIN
    mode: Mode = Mode.PROG_FREEZE
    probe_epochs: int = 0
    total_epochs: int = 30
    cutmix: CutMixConfig = field(default_factory=CutMixConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    probe_lr: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    target: str = "bpd"
    threshold: float = 0.5
    events: tuple[tuple[int, str], ...] | None = None
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name or table_label(self)

    def plan(self) -> FreezePlan:
        return make_plan(self.mode, self.probe_epochs, self.total_epochs,
                         list(self.events) if self.events is not None else None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["init"] = self.init.value
        d["mode"] = self.mode.value
        d["label"] = self.label
        return d


def table_label(cfg: TrainConfig) -> str:
    """Row label in the ablation-table naming scheme, e.g. ``XRV-ProgFreeze + LP + CutMix (40e)``."""
    parts = [f"{cfg.init.prefix}-{cfg.mode.value}"]
    if cfg.probe_epochs > 0:
        parts.append("LP")
    if cfg.cutmix.enabled:
        parts.append("CutMix")
    label = " + ".join(parts)
    if cfg.cutmix.enabled and cfg.cutmix.during_probe and cfg.probe_epochs > 0:
        label += " (ProbeMix)"
    if cfg.total_epochs != 30:
        label += f" ({cfg.total_epochs}e)"
    return label


def default_grid(seed: int = 0, **overrides) -> list[TrainConfig]:
    """The 17 ablation cells, in the published table's row order."""
    rows = [
        ("XRV", Mode.PROG_FREEZE, 10, True, False, 40),
        ("XRV", Mode.PROG_FREEZE, 0, False, False, 30),
        ("XRV", Mode.PROG_FREEZE, 0, True, False, 30),
        ("XRV", Mode.FULL_IFT, 10, True, False, 40),
        ("XRV", Mode.PROG_FREEZE, 10, False, False, 30),
        ("XRV", Mode.FULL_IFT, 0, False, False, 30),
        ("XRV", Mode.FULL_IFT, 0, True, False, 30),
        ("XRV", Mode.PROG_FREEZE, 10, True, False, 30),
        ("RGB", Mode.FULL_IFT, 0, False, False, 30),
        ("XRV", Mode.FULL_IFT, 10, False, False, 30),
        ("XRV", Mode.PROG_FREEZE, 10, True, True, 30),
        ("XRV", Mode.FULL_IFT, 10, True, True, 30),
        ("XRV", Mode.FULL_IFT, 10, True, False, 30),
        ("RGB", Mode.FULL_IFT, 0, True, False, 30),
        ("RGB", Mode.PROG_FREEZE, 0, False, False, 30),
        ("RGB", Mode.PROG_FREEZE, 10, False, False, 30),
        ("RGB", Mode.PROG_FREEZE, 0, True, False, 30),
    ]
    grid = []
    for dom, mode, probe, cm, probemix, epochs in rows:
        init = Init.XRAY_LIKE_PRETRAIN if dom == "XRV" else Init.RGB_LIKE_PRETRAIN
        cmc = CutMixConfig(enabled=cm, during_probe=probemix)
        grid.append(replace(TrainConfig(init=init, mode=mode, probe_epochs=probe,
                                        total_epochs=epochs, cutmix=cmc, seed=seed), **overrides))
    return grid


# ------------------------------------------------------------------ sampling

@dataclass
class WeightedSampler:
    """Draws indices with replacement, weighting each class by 1 / class frequency."""

    labels: np.ndarray
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels).astype(int)
        classes, counts = np.unique(labels, return_counts=True)
        if len(classes) < 2:
            raise ValueError("weighted sampling needs both classes in the training set")
        per_class = {c: 1.0 / n for c, n in zip(classes, counts)}
        w = np.array([per_class[c] for c in labels])
        self.labels = labels
        self.weights = w / w.sum()


def sample_batch(sampler: WeightedSampler, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(sampler.labels), size=batch_size, replace=True, p=sampler.weights)


def epoch_rng(seed: int, stream: str, epoch: int) -> np.random.Generator:
    tag = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([seed, tag, epoch])


# ---------------------------------------------------------------- pretraining

def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


@dataclass
class PretrainResult:
    net: Network
    losses: list[float]
    train_accuracy: float
    stats: DomainStats


def pretrain(domain: Domain | str, arch: ArchConfig, epochs: int = 8, seed: int = 0,
             n_samples: int = 1200, batch_size: int = 32, max_lr: float = 3e-3,
             image_model: ImageModel | None = None) -> PretrainResult:
    """Train the backbone on the surrogate multi-class source task.

    The temporary multi-unit head is discarded; the returned network carries
    a freshly initialized single-unit head.
    """
    domain = Domain(domain)
    m = image_model or ImageModel(size=arch.in_size)
    task = generate_pretrain_task(domain, seed, n_samples, m)
    x = task.normalized()
    y = task.labels
    rng = np.random.default_rng([seed, 0xB0])
    net = nnet.init_network(arch, rng)
    c = task.n_classes
    bound = 1.0 / math.sqrt(arch.feature_dim)
    groups = [g for g in net.groups if g.name != "head"]
    temp = Network(arch, groups + [nnet.ParameterGroup(
        "head", {"w": rng.uniform(-bound, bound, (arch.feature_dim, c)), "b": np.zeros(c)})])
    temp.set_trainable(nnet.GROUP_NAMES)
    opt = AdamWState(weight_decay=1e-4)
    spe = math.ceil(len(y) / batch_size)
    sched = OneCycleSchedule(epochs * spe, max_lr)
    losses = []
    step = 0
    for ep in range(epochs):
        order = np.random.default_rng([seed, 0xB1, ep]).permutation(len(y))
        for b in range(spe):
            idx = order[b * batch_size:(b + 1) * batch_size]
            pooled, cache = nnet._backbone(temp, x[idx], keep_cache=True)
            head = temp.group("head").params
            logits = pooled @ head["w"] + head["b"]
            loss, dlog = _softmax_ce(logits, y[idx])
            if not math.isfinite(loss):
                raise NumericalInstabilityError("pretraining diverged", context={"epoch": ep, "batch": b})
            grads = nnet.backbone_backward(temp, cache, dlog @ head["w"].T)
            grads["head"] = {"w": pooled.T @ dlog, "b": dlog.sum(axis=0)}
            adamw_step(opt, temp, grads, sched.lr(step))
            losses.append(loss)
            step += 1
    feats = np.concatenate([nnet.features(temp, x[i:i + 256]) for i in range(0, len(y), 256)])
    head = temp.group("head").params
    acc = float(np.mean(np.argmax(feats @ head["w"] + head["b"], axis=1) == y))
    out = Network(arch, [nnet.ParameterGroup(g.name, {k: v.copy() for k, v in g.params.items()})
                         for g in groups]
                  + [nnet.ParameterGroup("head", nnet.init_head(arch, np.random.default_rng([seed, 0xB2])))])
    log.info("pretrained %s: final loss %.4f, train acc %.3f", domain.value, losses[-1], acc)
    return PretrainResult(out, losses, acc, task.stats)


def initial_network(init: Init, arch: ArchConfig, seed: int = 0, pretrain_epochs: int = 8,
                    pretrain_samples: int = 1200, image_model: ImageModel | None = None,
                    cache: dict | None = None) -> Network:
    init = Init(init)
    if init is Init.RANDOM:
        return nnet.init_network(arch, np.random.default_rng([seed, 0xB3]))
    key = (init.value, arch, seed, pretrain_epochs, pretrain_samples, image_model)
    if cache is not None and key in cache:
        return cache[key].copy()
    net = pretrain(init.domain, arch, pretrain_epochs, seed, pretrain_samples,
                   image_model=image_model).net
    if cache is not None:
        cache[key] = net.copy()
    return net


# ------------------------------------------------------------------ data prep

@dataclass
class FoldData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_ids: list[int]


def fold_data(cohort: Cohort, fold: Fold, stats: DomainStats, target: str = "bpd") -> FoldData:
    """All images of train patients; the designated single image of each test patient."""
    tx, ty = [], []
    for pid in fold.train:
        p = cohort.patient(pid)
        lab = p.label(target)
        if lab is None:
            continue
        for img in p.images:
            tx.append(img)
            ty.append(lab)
    vx, vy, vid = [], [], []
    for pid, idx in fold.test:
        p = cohort.patient(pid)
        vx.append(p.images[idx])
        vy.append(p.label(target))
        vid.append(pid)
    return FoldData(normalize(np.stack(tx), stats), np.array(ty, dtype=float),
                    normalize(np.stack(vx), stats), np.array(vy, dtype=int), vid)


# -------------------------------------------------------------- epoch runner

def run_epoch(net: Network, opt: AdamWState, x: np.ndarray, y: np.ndarray, epoch: int,
              schedule: OneCycleSchedule, step0: int, cfg: TrainConfig, seed: int,
              use_cutmix: bool, mult: dict[str, float], stream: str = "train") -> dict:
    """One epoch of weighted-sampled mini-batches under the network's current freeze state.

    Draws ``ceil(len(x) / batch_size)`` batches. Sampling, augmentation and
    CutMix use separate RNG streams keyed by (seed, stream, epoch).
    """
    sampler = WeightedSampler(y)
    spe = math.ceil(len(y) / cfg.batch_size)
    srng = epoch_rng(seed, stream + ":sample", epoch)
    arng = epoch_rng(seed, stream + ":augment", epoch)
    crng = epoch_rng(seed, stream + ":cutmix", epoch)
    losses, warnings = [], []
    for b in range(spe):
        idx = sample_batch(sampler, cfg.batch_size, srng)
        bx = x[idx]
        by = y[idx]
        if cfg.augment.active:
            bx = np.stack([augment(img, cfg.augment, arng) for img in bx])
        if use_cutmix:
            bx, by, info = cutmix(bx, by, cfg.cutmix, crng)
            if "warning" in info:
                warnings.append(info["warning"])
        try:
            loss, grads = nnet.backward(net, bx, by)
        except NumericalInstabilityError as e:
            raise NumericalInstabilityError(str(e), e.batch_index,
                                            {"epoch": epoch, "batch": b}) from e
        adamw_step(opt, net, grads, schedule.lr(step0 + b), mult)
        losses.append(loss)
    return {"loss": float(np.mean(losses)), "steps": spe, "warnings": sorted(set(warnings))}


def predict_scores(net: Network, x: np.ndarray) -> np.ndarray:
    return nnet.sigmoid(nnet.forward(net, x).logits)


@dataclass
class FoldResult:
    repeat: int
    fold: int
    seed: int
    report: MetricsReport
    manifest: dict


def _phase_schedules(cfg: TrainConfig, spe: int):
    o = cfg.optim
    probe = (o.schedule(cfg.probe_epochs * spe, cfg.probe_lr) if cfg.probe_epochs > 0 else None)
    tune = o.schedule((cfg.total_epochs - cfg.probe_epochs) * spe)
    return probe, tune


def train_fold(net0: Network, data: FoldData, cfg: TrainConfig, seed: int,
               hooks: list | None = None) -> tuple[Network, MetricsReport, dict]:
    """Probe (head only) then freeze-plan-driven fine-tuning; evaluate at the final epoch.

    ``hooks`` are called as ``hook(epoch, net)`` after every epoch.
    """
    net = net0.copy()
    plan = cfg.plan()
    opt = cfg.optim.new_state()
    mult = discriminative_multipliers(cfg.optim.lr_decay)
    spe = math.ceil(len(data.train_y) / cfg.batch_size)
    probe_sched, tune_sched = _phase_schedules(cfg, spe)
    trainable_prev: frozenset = frozenset()
    param_counts, history, warnings = {}, [], set()
    for epoch in range(cfg.total_epochs):
        trainable = apply(plan, epoch, net)
        for g in trainable - trainable_prev:
            opt.reset_group(g)
        if trainable != trainable_prev:
            param_counts[epoch] = nnet.count_params(net, trainable_only=True)
        trainable_prev = trainable
        probing = epoch < cfg.probe_epochs
        if probing:
            sched, step0 = probe_sched, epoch * spe
        else:
            sched, step0 = tune_sched, (epoch - cfg.probe_epochs) * spe
        use_cm = cfg.cutmix.enabled and (not probing or cfg.cutmix.during_probe)
        stats = run_epoch(net, opt, data.train_x, data.train_y, epoch, sched, step0, cfg, seed,
                          use_cm, mult)
        history.append(stats["loss"])
        warnings.update(stats["warnings"])
        for hook in hooks or ():
            hook(epoch, net)
    scores = predict_scores(net, data.test_x)
    report = evaluate(list(zip(scores.tolist(), data.test_y.tolist())), cfg.threshold)
    manifest = {
        "freeze_plan": plan.to_dict(),
        "trainable_param_counts": {str(k): v for k, v in param_counts.items()},
        "steps_per_epoch": spe,
        "optimizer_reset": "fresh moments per group on first unfreeze",
        "evaluation": "final_epoch",
        "loss_history": history,
        "warnings": sorted(warnings),
    }
    return net, report, manifest


def fold_seed(global_seed: int, repeat: int, fold: int) -> int:
    return int(np.random.SeedSequence([global_seed, repeat, fold]).generate_state(1)[0])


@dataclass
class RunResult:
    config: TrainConfig
    folds: list[FoldResult]
    manifest: dict

    def reports(self) -> list[MetricsReport]:
        return [f.report for f in self.folds]

    def rows(self) -> list[dict]:
        out = []
        for f in self.folds:
            row = {"config_id": self.config.label, "repeat": f.repeat, "fold": f.fold}
            row.update(f.report.as_row())
            row["seed"] = f.seed
            out.append(row)
        return out

    def summary(self) -> dict:
        return aggregate(self.reports())


def _fold_job(args):
    net0, cohort, fold, cfg, seed = args
    data = fold_data(cohort, fold, _stats_for(cfg, cohort), cfg.target)
    _, report, manifest = train_fold(net0, data, cfg, seed)
    return FoldResult(fold.repeat, fold.fold, seed, report, manifest)


def _stats_for(cfg: TrainConfig, cohort: Cohort) -> DomainStats:
    return cohort.image_model.stats(cfg.init.domain)


def run_config(cfg: TrainConfig, cohort: Cohort, plan: FoldPlan, arch: ArchConfig,
               pretrain_epochs: int = 8, pretrain_samples: int = 1200, jobs: int = 1,
               cache: dict | None = None, folds: list[Fold] | None = None) -> RunResult:
    """Train and evaluate one config on every (repeat, fold) of ``plan``."""
    net0 = initial_network(cfg.init, arch, cfg.seed, pretrain_epochs, pretrain_samples,
                           cohort.image_model, cache)
    folds = list(folds if folds is not None else plan.folds)
    jobs_args = [(net0, cohort, f, cfg, fold_seed(cfg.seed, f.repeat, f.fold)) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_fold_job, jobs_args))
    else:
        results = [_fold_job(a) for a in jobs_args]
    manifest = {
        "config": cfg.to_dict(),
        "plan_fingerprint": plan.fingerprint(),
        "init_hash": net0.hash(),
        "param_count_total": nnet.count_params(net0),
    }
    return RunResult(cfg, results, manifest)


@dataclass
class RunTable:
    results: list[RunResult]
    plan_fingerprint: str

    def sorted_results(self) -> list[RunResult]:
        def key(r):
            m = r.summary()["auroc"][0]
            return -m if math.isfinite(m) else math.inf
        return sorted(self.results, key=key)

    def rows(self) -> list[dict]:
        return [row for r in self.results for row in r.rows()]


def run_ablation(grid: list[TrainConfig], cohort: Cohort, plan: FoldPlan, arch: ArchConfig,
                 pretrain_epochs: int = 8, pretrain_samples: int = 1200, jobs: int = 1) -> RunTable:
    """Run every config on the same fold plan (paired comparisons)."""
    cache: dict = {}
    results = [run_config(cfg, cohort, plan, arch, pretrain_epochs, pretrain_samples, jobs, cache)
               for cfg in grid]
    fps = {r.manifest["plan_fingerprint"] for r in results}
    assert len(fps) <= 1, "configs in one grid must share a fold plan"
    return RunTable(results, plan.fingerprint())


# --------------------------------------------------------- feature-space probe

def linear_probe(feats: np.ndarray, labels: np.ndarray, head: dict[str, np.ndarray],
                 epochs: int, cfg: TrainConfig, seed: int, stream: str = "probe",
                 opt: AdamWState | None = None, schedule: OneCycleSchedule | None = None,
                 epoch0: int = 0) -> tuple[dict[str, np.ndarray], AdamWState]:
    """Train a single-unit head on frozen pooled features with weighted sampling.

    ``epoch0`` / ``schedule`` / ``opt`` let callers split one probing run into
    several chunks (federated rounds) without changing the trajectory.
    """
    labels = np.asarray(labels, dtype=float)
    spe = math.ceil(len(labels) / cfg.batch_size)
    if schedule is None:
        schedule = cfg.optim.schedule(max(1, (epoch0 + epochs) * spe), cfg.probe_lr)
    opt = opt or cfg.optim.new_state()
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in head.items()}
    hnet = Network(ArchConfig(), [nnet.ParameterGroup("head", params)])
    sampler = WeightedSampler(labels)
    for epoch in range(epoch0, epoch0 + epochs):
        srng = epoch_rng(seed, stream + ":sample", epoch)
        for b in range(spe):
            idx = sample_batch(sampler, cfg.batch_size, srng)
            f, t = feats[idx], labels[idx]
            z = nnet.head_logits(params, f)
            d = (nnet.sigmoid(z) - t) / len(t)
            grads = {"head": {"w": f.T @ d, "b": np.array([d.sum()])}}
            adamw_step(opt, hnet, grads, schedule.lr(epoch * spe + b))
    return params, opt


def batched_features(net: Network, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([nnet.features(net, x[i:i + chunk]) for i in range(0, len(x), chunk)])
