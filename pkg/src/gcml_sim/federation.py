"""Round loop and exchange strategies over simulated sites.

Implements the gossip mutual-learning strategy next to its baselines
(individual/pooled training, server-style weighted averaging with optional
proximal or PID-flavored aggregation, one-receiver peer aggregation, and
ring-based plain mutual learning), plus the ablation lattice, the
scheduler-seed study, and communication accounting.

Every run is a pure function of (config, datasets, master_seed): all
randomness flows through named counter-based streams, so repeated runs are
bitwise identical and site updates may be reordered/parallelized without
changing results.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import losses, metrics, segmenter
from .data import Case, SiteSpec, generate_site, split_cases
from .gossip import GossipScheduler, PairSchedule
from .numerics import (
    PURPOSE_DATA,
    PURPOSE_INIT,
    PURPOSE_POOL,
    PURPOSE_SCHEDULE,
    PURPOSE_SPLIT,
    PURPOSE_TRAIN,
    RngStream,
    stream_id,
)
from .segmenter import (
    ArchSpec,
    ModelParams,
    OBJECTIVE_DCML_RECEIVER,
    OBJECTIVE_DCML_SENDER,
    OBJECTIVE_FEDPROX_JD,
    OBJECTIVE_JD,
    ObjectiveSpec,
)

__all__ = [
    "STRATEGIES",
    "GLOBAL_MODEL_STRATEGIES",
    "StrategyConfig",
    "SiteState",
    "SiteRoundMetrics",
    "RoundRecord",
    "AvailabilityEvent",
    "build_datasets",
    "build_sites",
    "local_update",
    "dcml_exchange",
    "merge_models",
    "run_federation",
    "evaluate_sites",
    "final_weighted_dsc",
    "transfer_count",
    "comm_bytes",
    "ABLATION_CELLS",
    "ablation_config",
    "run_ablation",
    "run_seed_study",
]

log = logging.getLogger(__name__)

STRATEGY_GCML = "gcml"
STRATEGY_IM = "im"
STRATEGY_PM = "pm"
STRATEGY_FEDAVG = "fedavg"
STRATEGY_FEDPROX = "fedprox"
STRATEGY_FEDPID = "fedpidavg_lite"
STRATEGY_BT = "braintorrent"
STRATEGY_PROXY = "proxy_dml"
STRATEGIES = (
    STRATEGY_GCML,
    STRATEGY_IM,
    STRATEGY_PM,
    STRATEGY_FEDAVG,
    STRATEGY_FEDPROX,
    STRATEGY_FEDPID,
    STRATEGY_BT,
    STRATEGY_PROXY,
)
# Strategies whose reported per-site performance comes from one shared model.
GLOBAL_MODEL_STRATEGIES = (STRATEGY_PM, STRATEGY_FEDAVG, STRATEGY_FEDPROX, STRATEGY_FEDPID)

# PID-flavored aggregation mix: sample share, loss-decrease share, integral share.
FEDPID_COEFFS = (0.45, 0.45, 0.10)
FEDPID_INTEGRAL_WINDOW = 5


@dataclass(frozen=True)
class StrategyConfig:
    """Everything that parameterizes one federation run."""

    strategy: str = STRATEGY_GCML
    lam: float = 0.5
    eta: float = 0.5
    local_epochs: int = 1
    dcml_epochs: int = 1
    rounds: int = 100
    warmup_rounds: int = 0
    num_pairs: Optional[int] = None  # None: floor(available/2) each round
    max_incoming: int = 1
    mu: float = 0.001
    bt_finetune_epochs: int = 2
    kappa: float = losses.DEFAULT_KL_CLAMP
    contrast: bool = True
    regional: bool = True
    merging: bool = True
    batch_size: int = 1
    inverse_merge_weights: bool = False
    detach_region_weights: bool = False
    scheduler_stream: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}"
            )
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        for name in ("local_epochs", "dcml_epochs", "rounds", "warmup_rounds"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eta < 0 or self.mu < 0:
            raise ValueError("eta and mu must be nonnegative")
        if self.batch_size < 1 or self.max_incoming < 1:
            raise ValueError("batch_size and max_incoming must be >= 1")


@dataclass(frozen=True)
class PreparedCase:
    """A case plus its cached feature matrix for a fixed architecture."""

    case_id: int
    labels_grid: np.ndarray  # (H, W)
    flat_labels: np.ndarray  # (H*W,)
    feats: np.ndarray  # (H*W, feature_dim)
    num_classes: int


@dataclass
class SiteState:
    """One federation participant: data splits, model, private stream."""

    site_id: int
    train: list
    val: list
    test: list
    params: ModelParams
    rng: RngStream
    available: bool = True


@dataclass(frozen=True)
class SiteRoundMetrics:
    dsc: float
    hd95: float
    assd: float
    train_loss: float
    val_jd: float
    n_test: int


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    site_metrics: dict  # site_id -> SiteRoundMetrics
    comm_bytes: int
    schedule: tuple  # scheduled (sender, receiver) transfers
    executed: tuple  # transfers that actually completed

    def __post_init__(self):
        if self.comm_bytes < 0:
            raise ValueError("comm_bytes must be >= 0")


@dataclass(frozen=True)
class AvailabilityEvent:
    """Site drop-in/drop-out. ``mid_round=True`` lands after pairing but
    before the exchanges execute, so in-flight pairs get dropped."""

    round_index: int
    site_id: int
    available: bool
    mid_round: bool = False


def build_datasets(specs: Sequence[SiteSpec], master_seed: int) -> dict:
    """Per-site case lists, each drawn from its own stream of the seed."""
    return {
        spec.site_id: generate_site(
            spec, RngStream(master_seed, stream_id(PURPOSE_DATA, spec.site_id))
        )
        for spec in specs
    }


def _prepare(case: Case, arch: ArchSpec) -> PreparedCase:
    feats = segmenter.extract_features(case.image, arch)
    labels = case.labels.astype(np.int64)
    return PreparedCase(case.case_id, labels, labels.reshape(-1), feats, case.num_classes)


def build_sites(datasets: dict, arch: ArchSpec, master_seed: int) -> list:
    """Split, initialize and prepare every site; deterministic in the seed."""
    sites = []
    for site_id in sorted(datasets):
        cases = datasets[site_id]
        train, val, test = split_cases(
            cases, RngStream(master_seed, stream_id(PURPOSE_SPLIT, site_id))
        )
        params = segmenter.init_params(
            arch, RngStream(master_seed, stream_id(PURPOSE_INIT, site_id))
        )
        sites.append(
            SiteState(
                site_id=site_id,
                train=[_prepare(c, arch) for c in train],
                val=[_prepare(c, arch) for c in val],
                test=[_prepare(c, arch) for c in test],
                params=params,
                rng=RngStream(master_seed, stream_id(PURPOSE_TRAIN, site_id)),
            )
        )
    return sites


def _mean_jd(params: ModelParams, cases: Sequence[PreparedCase]) -> float:
    vals = [
        losses.jaccard_distance(segmenter.forward_features(params, c.feats), c.flat_labels)
        for c in cases
    ]
    return float(np.mean(vals)) if vals else math.nan


def _sgd_pass(params, cases, rng, eta, batch_size, objective):
    """One shuffled pass of mini-batch SGD; returns the updated params."""
    order = rng.shuffled(range(len(cases)))
    for start in range(0, len(order), batch_size):
        batch = [(cases[i].feats, cases[i].flat_labels) for i in order[start : start + batch_size]]
        _, grad = segmenter.loss_and_grad_features(params, batch, objective)
        params = segmenter.sgd_step(params, grad, eta)
    return params


def local_update(
    site: SiteState,
    epochs: int,
    eta: float,
    batch_size: int = 1,
    objective: ObjectiveSpec = ObjectiveSpec(OBJECTIVE_JD),
) -> SiteState:
    """Run ``epochs`` passes of mini-batch SGD on the site's training split."""
    if not site.train:
        raise ValueError(f"site {site.site_id} has an empty training split")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    for _ in range(epochs):
        site.params = _sgd_pass(site.params, site.train, site.rng, eta, batch_size, objective)
    return site


def merge_models(
    a: ModelParams, b: ModelParams, v_a: float, v_b: float, inverse: bool = False
) -> ModelParams:
    """Validation-loss weighted average (v_a*W_a + v_b*W_b)/(v_a + v_b).

    Taken literally, higher-loss models get more weight; ``inverse=True``
    weights by 1/v instead. Computed in lerp form so each merged coordinate
    stays inside [min(a_i, b_i), max(a_i, b_i)] under rounding.
    """
    if v_a < 0 or v_b < 0:
        raise ValueError("merge weights must be nonnegative")
    if inverse:
        tiny = 1e-12
        v_a, v_b = 1.0 / max(v_a, tiny), 1.0 / max(v_b, tiny)
    total = v_a + v_b
    t = v_b / total if total > 0 else 0.5
    return ModelParams(a.arch, a.weights + t * (b.weights - a.weights))


def dcml_exchange(receiver: SiteState, incoming: ModelParams, config: StrategyConfig) -> SiteState:
    """Process one incoming model on the receiver site.

    For each mini-batch of the receiver's training data the local model takes
    one step against the frozen incoming model, then the incoming model takes
    the mirrored step against the just-updated local model. With merging
    enabled the two updated models are fused by their validation losses; a
    non-finite loss aborts the whole pair and restores the receiver.
    """
    if not receiver.available:
        raise ValueError(f"receiver {receiver.site_id} is not available")
    if incoming.arch != receiver.params.arch:
        raise ValueError("incoming model architecture mismatch")
    snapshot = receiver.params
    sender = incoming
    common = dict(
        lam=config.lam,
        kappa=config.kappa,
        use_contrast=config.contrast,
        use_regional=config.regional,
        detach_region_weights=config.detach_region_weights,
    )
    try:
        for _ in range(config.dcml_epochs):
            order = receiver.rng.shuffled(range(len(receiver.train)))
            for start in range(0, len(order), config.batch_size):
                batch = [
                    (receiver.train[i].feats, receiver.train[i].flat_labels)
                    for i in order[start : start + config.batch_size]
                ]
                obj_r = ObjectiveSpec(OBJECTIVE_DCML_RECEIVER, peer=sender, **common)
                _, g_r = segmenter.loss_and_grad_features(receiver.params, batch, obj_r)
                receiver.params = segmenter.sgd_step(receiver.params, g_r, config.eta)
                obj_s = ObjectiveSpec(OBJECTIVE_DCML_SENDER, peer=receiver.params, **common)
                _, g_s = segmenter.loss_and_grad_features(sender, batch, obj_s)
                sender = segmenter.sgd_step(sender, g_s, config.eta)
        if config.merging:
            v_r = _mean_jd(receiver.params, receiver.val)
            v_s = _mean_jd(sender, receiver.val)
            receiver.params = merge_models(
                receiver.params, sender, v_r, v_s, config.inverse_merge_weights
            )
    except FloatingPointError as exc:
        log.warning(
            "site %s: aborting exchange for this pair (%s)", receiver.site_id, exc
        )
        receiver.params = snapshot
    return receiver


def transfer_count(strategy: str, n_sites: int, num_pairs: int) -> int:
    """Model transfers per round under each strategy."""
    if strategy in (STRATEGY_FEDAVG, STRATEGY_FEDPROX, STRATEGY_FEDPID):
        return 2 * n_sites  # every site uploads and downloads
    if strategy == STRATEGY_PROXY:
        return n_sites  # one proxy transfer per site around the ring
    if strategy == STRATEGY_BT:
        return n_sites - 1  # all peers send to the selected site
    if strategy == STRATEGY_GCML:
        return num_pairs
    if strategy in (STRATEGY_IM, STRATEGY_PM):
        return 0
    raise ValueError(f"unknown strategy {strategy!r}")


def comm_bytes(strategy: str, n_sites: int, num_pairs: int, model_bytes: int) -> int:
    """Bytes moved per round: transfers x model size."""
    if model_bytes <= 0:
        raise ValueError("model_bytes must be positive")
    return transfer_count(strategy, n_sites, num_pairs) * model_bytes


def _evaluate_model(params: ModelParams, site: SiteState):
    arch = params.arch
    dscs, hds, asds = [], [], []
    for case in site.test:
        probs = segmenter.forward_features(params, case.feats)
        pred = np.argmax(probs, axis=1).reshape(case.labels_grid.shape)
        d, h, a = metrics.evaluate_case(pred, case.labels_grid, arch.num_classes)
        dscs.append(d)
        hds.append(h)
        asds.append(a)
    return SiteRoundMetrics(
        dsc=float(np.mean(dscs)),
        hd95=metrics.mean_defined(hds, "hd95"),
        assd=metrics.mean_defined(asds, "assd"),
        train_loss=_mean_jd(params, site.train),
        val_jd=_mean_jd(params, site.val),
        n_test=len(site.test),
    )


def evaluate_sites(sites: Sequence[SiteState], shared_model: ModelParams | None = None) -> dict:
    """Per-site metrics of each site's own model (or one shared model)."""
    return {
        s.site_id: _evaluate_model(shared_model if shared_model is not None else s.params, s)
        for s in sites
    }


def _weighted_average(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("aggregation weights must be nonnegative and not all zero")
    w = w / w.sum()
    stacked = np.stack([m.weights for m in models])
    return ModelParams(models[0].arch, w @ stacked)


class _FedPidState:
    """Loss bookkeeping for the PID-flavored aggregation weights."""

    def __init__(self):
        self.prev: dict = {}
        self.history: dict = {}

    def weights(self, sites: Sequence[SiteState]) -> list:
        shares = np.array([len(s.train) for s in sites], dtype=np.float64)
        shares /= shares.sum()
        cur = {s.site_id: _mean_jd(s.params, s.train) for s in sites}
        drops = np.array(
            [max(self.prev.get(s.site_id, cur[s.site_id]) - cur[s.site_id], 0.0) for s in sites]
        )
        integrals = np.array(
            [sum(self.history.get(s.site_id, [])) + cur[s.site_id] for s in sites]
        )
        p_share, d_share, i_share = FEDPID_COEFFS
        out = p_share * shares
        # Degenerate numerators fall back onto the sample-size term.
        out = out + (d_share * drops / drops.sum() if drops.sum() > 0 else d_share * shares)
        out = out + (i_share * integrals / integrals.sum() if integrals.sum() > 0 else i_share * shares)
        for s in sites:
            hist = self.history.setdefault(s.site_id, [])
            hist.append(cur[s.site_id])
            del hist[:-FEDPID_INTEGRAL_WINDOW]
            self.prev[s.site_id] = cur[s.site_id]
        return list(out)


def run_federation(
    config: StrategyConfig,
    sites: Sequence[SiteState],
    master_seed: int,
    availability_events: Sequence[AvailabilityEvent] = (),
) -> list:
    """Execute warmup plus ``config.rounds`` federation rounds.

    Returns one ``RoundRecord`` per exchange round (1-based). Raises if no
    site is available at a round start; a lone available site just trains
    locally that round.
    """
    sites = list(sites)
    by_id = {s.site_id: s for s in sites}
    scheduler = GossipScheduler(
        tuple(by_id),
        RngStream(master_seed, stream_id(PURPOSE_SCHEDULE, config.scheduler_stream)),
    )
    for s in sites:
        if not s.available:
            scheduler.mark_availability(s.site_id, False, 0)
    events = sorted(availability_events, key=lambda e: (e.round_index, e.site_id))
    model_bytes = sites[0].params.weights.nbytes if sites else 0

    pool_params = None
    pool_rng = None
    if config.strategy == STRATEGY_PM:
        arch = sites[0].params.arch
        pool_params = segmenter.init_params(
            arch, RngStream(master_seed, stream_id(PURPOSE_POOL, 0))
        )
        pool_rng = RngStream(master_seed, stream_id(PURPOSE_POOL, 1))
    fedpid = _FedPidState() if config.strategy == STRATEGY_FEDPID else None
    global_params = pool_params

    def apply_events(round_index: int, mid_round: bool):
        for ev in events:
            if ev.round_index == round_index and ev.mid_round == mid_round:
                scheduler.mark_availability(ev.site_id, ev.available, round_index)
                by_id[ev.site_id].available = ev.available

    def available() -> list:
        return [by_id[sid] for sid in scheduler.available_sites()]

    def train_phase():
        nonlocal pool_params
        avail = available()
        if not avail:
            raise ValueError("no available sites")
        if config.strategy == STRATEGY_PM:
            pooled = [c for s in avail for c in s.train]
            for _ in range(config.local_epochs):
                pool_params = _sgd_pass(
                    pool_params, pooled, pool_rng, config.eta, config.batch_size,
                    ObjectiveSpec(OBJECTIVE_JD),
                )
            return
        if config.strategy == STRATEGY_FEDPROX:
            for s in avail:
                anchor = s.params.weights  # round-start model is the proximal anchor
                obj = ObjectiveSpec(OBJECTIVE_FEDPROX_JD, mu=config.mu, anchor=anchor)
                local_update(s, config.local_epochs, config.eta, config.batch_size, obj)
            return
        for s in avail:
            local_update(s, config.local_epochs, config.eta, config.batch_size)

    for _ in range(config.warmup_rounds):
        train_phase()

    records = []
    for t in range(1, config.rounds + 1):
        apply_events(t, mid_round=False)
        train_phase()
        avail = available()

        scheduled: tuple = ()
        executed: list = []
        comm_round = 0
        if config.strategy == STRATEGY_GCML and len(avail) >= 2:
            schedule = scheduler.schedule_round(t, config.num_pairs, config.max_incoming)
            scheduled = schedule.pairs
            snapshots = {s: by_id[s].params for s, _ in schedule.pairs}
            apply_events(t, mid_round=True)
            for sender_id, receiver_id in schedule.pairs:
                if not (scheduler.is_available(sender_id) and scheduler.is_available(receiver_id)):
                    log.info(
                        "round %d: pair %s->%s dropped (site departed)",
                        t, sender_id, receiver_id,
                    )
                    continue
                dcml_exchange(by_id[receiver_id], snapshots[sender_id], config)
                executed.append((sender_id, receiver_id))
            comm_round = len(executed) * model_bytes
        elif config.strategy == STRATEGY_PROXY and len(avail) >= 2:
            ring = sorted(s.site_id for s in avail)
            scheduled = tuple(
                (ring[i], ring[(i + 1) % len(ring)]) for i in range(len(ring))
            )
            snapshots = {s.site_id: s.params for s in avail}
            apply_events(t, mid_round=True)
            plain = replace(config, contrast=False, regional=False, merging=False)
            for sender_id, receiver_id in scheduled:
                if not (scheduler.is_available(sender_id) and scheduler.is_available(receiver_id)):
                    continue
                dcml_exchange(by_id[receiver_id], snapshots[sender_id], plain)
                executed.append((sender_id, receiver_id))
            comm_round = len(executed) * model_bytes
        elif config.strategy == STRATEGY_BT and len(avail) >= 2:
            chosen = avail[scheduler.rng.integer(len(avail))]
            scheduled = tuple(
                (s.site_id, chosen.site_id) for s in avail if s.site_id != chosen.site_id
            )
            apply_events(t, mid_round=True)
            if scheduler.is_available(chosen.site_id):
                contributors = [
                    by_id[sid] for sid, _ in scheduled if scheduler.is_available(sid)
                ] + [chosen]
                merged = _weighted_average(
                    [s.params for s in contributors],
                    [len(s.train) for s in contributors],
                )
                chosen.params = merged
                local_update(chosen, config.bt_finetune_epochs, config.eta, config.batch_size)
                executed = [(sid, rid) for sid, rid in scheduled if scheduler.is_available(sid)]
            comm_round = len(executed) * model_bytes
        elif config.strategy in (STRATEGY_FEDAVG, STRATEGY_FEDPROX, STRATEGY_FEDPID):
            apply_events(t, mid_round=True)
            avail = available()
            if avail:
                if config.strategy == STRATEGY_FEDPID:
                    weights = fedpid.weights(avail)
                else:
                    weights = [len(s.train) for s in avail]
                global_params = _weighted_average([s.params for s in avail], weights)
                for s in avail:
                    s.params = global_params
                comm_round = 2 * len(avail) * model_bytes
        else:
            apply_events(t, mid_round=True)

        if config.strategy == STRATEGY_PM:
            shared = pool_params
        elif config.strategy in GLOBAL_MODEL_STRATEGIES:
            shared = global_params
        else:
            shared = None
        records.append(
            RoundRecord(
                round_index=t,
                site_metrics=evaluate_sites(sites, shared),
                comm_bytes=comm_round,
                schedule=tuple(scheduled),
                executed=tuple(executed),
            )
        )
    return records


def final_weighted_dsc(records: Sequence[RoundRecord]) -> float:
    """Case-weighted overall test DSC of the last round."""
    last = records[-1]
    return metrics.weighted_overall(
        (m.dsc, m.n_test) for m in last.site_metrics.values()
    )


ABLATION_CELLS = (
    "merging_only",
    "dml_only",
    "dml_contrast",
    "dml_contrast_region",
    "full_gcml",
)


def ablation_config(base: StrategyConfig, cell: str) -> StrategyConfig:
    """Config for one ablation cell of the exchange stack."""
    base = replace(base, strategy=STRATEGY_GCML)
    if cell == "merging_only":
        return replace(base, dcml_epochs=0, merging=True)
    if cell == "dml_only":
        return replace(base, contrast=False, regional=False, merging=False)
    if cell == "dml_contrast":
        return replace(base, contrast=True, regional=False, merging=False)
    if cell == "dml_contrast_region":
        return replace(base, contrast=True, regional=True, merging=False)
    if cell == "full_gcml":
        return replace(base, contrast=True, regional=True, merging=True)
    raise ValueError(f"unknown ablation cell {cell!r}")


def run_ablation(
    base_config: StrategyConfig,
    datasets: dict,
    arch: ArchSpec,
    master_seed: int,
    cells: Sequence[str] = ABLATION_CELLS,
) -> list:
    """One run per cell over shared data and seed.

    Returns (cell, per-site final DSC dict, weighted final DSC) triples.
    """
    out = []
    for cell in cells:
        cfg = ablation_config(base_config, cell)
        sites = build_sites(datasets, arch, master_seed)
        records = run_federation(cfg, sites, master_seed)
        per_site = {sid: m.dsc for sid, m in records[-1].site_metrics.items()}
        out.append((cell, per_site, final_weighted_dsc(records)))
    return out


def run_seed_study(
    config: StrategyConfig,
    datasets: dict,
    arch: ArchSpec,
    master_seed: int,
    n_trials: int,
) -> dict:
    """Repeat the run varying only the pairing stream.

    Data, splits and model initialization stay fixed; each trial re-seeds the
    scheduler stream only. Returns per-trial overall DSC plus mean and
    sample standard deviation.
    """
    if n_trials < 2:
        raise ValueError("need at least 2 trials")
    trials = []
    per_trial_records = []
    for trial in range(n_trials):
        cfg = replace(config, scheduler_stream=trial)
        sites = build_sites(datasets, arch, master_seed)
        records = run_federation(cfg, sites, master_seed)
        trials.append(final_weighted_dsc(records))
        per_trial_records.append(records)
    arr = np.asarray(trials)
    return {
        "per_trial": trials,
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)),
        "records": per_trial_records,
    }
