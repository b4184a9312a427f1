"""In-process simulation of federated training on distilled virtual data.

One server and N clients. ``run_pipeline`` drives three stages:

1. initialisation: clients share per-class image statistics, both sides
   initialise virtual data from them and clients run a distribution-matching
   warm-up against the initial feature extractor;
2. rounds 1..tau: local training, then the server refreshes the global
   virtual data by gradient matching while clients refresh their local
   virtual data by distribution matching;
3. rounds tau+1..T: local training on the now frozen virtual data.

Baseline rules (fedavg, fedprox, fednova, scaffold) skip stage 2 and train on
the warm-up virtual data alone.

The only object a client hands to the server is a :class:`ClientReport`.
Server-side code never receives a :class:`ClientState`.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import balanced_batches, blob_digits, load_idx, pad_to, synth_domain_shift, to_rgb
from .distill import (aggregate_stats, ce_gradients, class_feature_means, class_stats, distribution_match,
                      gradient_match, init_virtual, mean_distance)
from .errors import ContractViolation
from .losses import cross_entropy, prox_term, total_loss
from .models import init_model, predict_labels, predict_logits

STAGES = ("init", "distill", "virtual_train")
REPORT_FIELDS = ("client_id", "param_delta", "ce_grad", "n_virtual", "local_steps_taken", "metrics")

# purpose tags mixed into per-client seeds
_PURPOSE = {"virtual_init": 1, "warmup": 2, "batches": 3, "refresh": 4, "gm": 5, "server_init": 6,
            "sample": 7, "model": 8, "data": 9}


def derive_seed(seed, *parts):
    """A 63-bit seed from ``(seed, *parts)``; independent streams per tuple."""
    return int(np.random.SeedSequence([int(seed)] + [int(p) for p in parts]).generate_state(2, np.uint64)[0]
               >> np.uint64(1))


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    real_train: object
    real_test: object
    virtual: object = None
    local_params: object = None
    scaffold_control: dict = None


@dataclass
class ServerState:
    global_params: object
    global_virtual: object = None
    round: int = 0
    stage: str = "init"
    scaffold_control: dict = None

    def advance(self, stage):
        """Move to ``stage``; only init -> distill -> virtual_train (skipping allowed)."""
        assert STAGES.index(stage) >= STAGES.index(self.stage), f"stage {self.stage} -> {stage}"
        self.stage = stage

    def set_global_virtual(self, virtual):
        assert self.stage != "virtual_train", "global virtual data is frozen in stage 3"
        self.global_virtual = virtual


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    param_delta: dict
    ce_grad: dict
    n_virtual: int
    local_steps_taken: int
    metrics: dict = field(default_factory=dict)


def dump_report(report):
    """Serialise a report as a checkpoint container of kind "client_report".

    Tensors are named ``param_delta/<name>`` and ``ce_grad/<name>``; the
    scalar fields go in the header.
    """
    tensors = {f"param_delta/{k}": v for k, v in report.param_delta.items()}
    tensors.update({f"ce_grad/{k}": v for k, v in report.ce_grad.items()})
    meta = {"client_id": report.client_id, "n_virtual": report.n_virtual,
            "local_steps_taken": report.local_steps_taken, "metrics": report.metrics}
    return checkpoint.dumps("client_report", tensors, meta)


def load_report(raw):
    kind, meta, tensors = checkpoint.loads(raw)
    if kind != "client_report":
        raise ContractViolation(f"expected a client report, found {kind!r}")
    parts = {"param_delta": {}, "ce_grad": {}}
    for name, arr in tensors.items():
        field_name, _, key = name.partition("/")
        parts[field_name][key] = arr
    return ClientReport(meta["client_id"], parts["param_delta"], parts["ce_grad"], meta["n_virtual"],
                        meta["local_steps_taken"], meta["metrics"])


def _zeros_like(arrays):
    return {k: np.zeros_like(v) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------

def client_update(client, global_params, global_virtual, cfg, round_idx=0, server_control=None):
    """Local training for one round; returns the client's report.

    ``client.local_params`` is reset to ``global_params`` first. With
    ``rule == "scaffold"`` the client's control variate is updated in place.
    """
    rule = cfg.rule
    virtual = client.virtual
    received = global_params.arrays()
    ce_grad = ce_gradients(global_params, virtual.images, virtual.labels)
    client.local_params = global_params
    if rule == "scaffold":
        if client.scaffold_control is None:
            client.scaffold_control = _zeros_like(received)
        if server_control is None:
            server_control = _zeros_like(received)
        correction = {k: server_control[k] - client.scaffold_control[k] for k in received}

    current = {k: v.copy() for k, v in received.items()}
    steps = 0
    sums = {"ce": 0.0, "con": 0.0, "prox": 0.0, "total": 0.0}
    for epoch in range(cfg.local_epochs):
        bseed = derive_seed(cfg.seed, client.client_id, round_idx, _PURPOSE["batches"], epoch)
        local_batches = balanced_batches(virtual.labels, cfg.batch_size, bseed)
        global_batches = None
        if rule == "fedlgd":
            global_batches = balanced_batches(global_virtual.labels, cfg.batch_size, bseed + 1)
        for b, idx in enumerate(local_batches):
            params = global_params.replace(current)
            leaves = params.tensors(requires_grad=True)
            if rule == "fedlgd":
                gidx = global_batches[b % len(global_batches)]
                lv = total_loss(params, virtual.images[idx], virtual.labels[idx],
                                global_virtual.images[gidx], global_virtual.labels[gidx],
                                lam=cfg.lam, temperature=cfg.tau_temp,
                                ce_includes_global=cfg.ce_includes_global, tensors=leaves,
                                con_reduction=cfg.con_reduction)
                loss, ce_v, con_v = lv.value, lv.breakdown["ce"], lv.breakdown["con"]
            else:
                ce = cross_entropy(predict_logits(params, T.Tensor(virtual.images[idx]), leaves),
                                   virtual.labels[idx])
                loss, ce_v, con_v = ce.value, ce.item(), 0.0
            prox_v = 0.0
            if rule == "fedprox":
                prox = prox_term(leaves, received, cfg.mu)
                prox_v = prox.item()
                loss = T.add(loss, prox.value)
            grads = T.backward(loss, list(leaves.values()))
            for (k, _), g in zip(leaves.items(), grads):
                step = g.data
                if rule == "scaffold":
                    step = step + correction[k]
                current[k] = current[k] - cfg.lr_model * step
            steps += 1
            sums["ce"] += ce_v
            sums["con"] += con_v
            sums["prox"] += prox_v
            sums["total"] += loss.item()

    delta = {k: current[k] - received[k] for k in received}
    client.local_params = global_params.replace(current)
    if rule == "scaffold" and steps:
        dc = scaffold_control_delta(delta, server_control, steps, cfg.lr_model)
        client.scaffold_control = {k: client.scaffold_control[k] + dc[k] for k in received}
    metrics = {k: (v / steps if steps else 0.0) for k, v in sums.items()}
    return ClientReport(client.client_id, delta, ce_grad, len(virtual), steps, metrics)


def scaffold_control_delta(delta, server_control, steps, lr):
    """c_i+ - c_i for Scaffold's option II: -c - delta / (steps * lr).

    The client and the server both evaluate this from the report, so the
    control delta never has to be uploaded separately.
    """
    return {k: -server_control[k] - delta[k] / (steps * lr) for k in delta}


def refresh_local_virtual(client, extractor, cfg, round_idx):
    """Distribution matching of the client's virtual data against its real data."""
    client.virtual = distribution_match(
        client.real_train, client.virtual, extractor, steps=cfg.local_distill_steps, lr=cfg.lr_pixel_dm,
        real_batch_per_class=cfg.real_batch_per_class, augment=cfg.augment,
        seed=derive_seed(cfg.seed, client.client_id, round_idx, _PURPOSE["refresh"]))
    return client.virtual


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------

def _sorted_reports(reports):
    reports = sorted(reports, key=lambda r: r.client_id)
    if not reports:
        raise ContractViolation("aggregate: no reports")
    return reports


def _weighted_sum(weights, dicts):
    names = dicts[0].keys()
    out = {}
    for k in names:
        acc = weights[0] * dicts[0][k]
        for w, d in zip(weights[1:], dicts[1:]):
            acc = acc + w * d[k]
        out[k] = acc
    return out


def aggregate(reports, rule, server, cfg=None, num_clients=None):
    """Fold client deltas into the global model; returns the updated server.

    fedavg/fedprox/fedlgd: theta + sum_i p_i delta_i with p_i = n_i / sum n.
    fednova: theta + tau_eff * sum_i p_i delta_i / tau_i, tau_eff = sum_i p_i tau_i.
    scaffold: the fedavg step, then c += (1/N) sum_i (c_i+ - c_i).
    """
    reports = _sorted_reports(reports)
    arrays = server.global_params.arrays()
    for r in reports:
        for part in (r.param_delta, r.ce_grad):
            if set(part) != set(arrays) or any(np.shape(part[k]) != arrays[k].shape for k in arrays):
                raise ContractViolation(f"aggregate: report from client {r.client_id} does not match the model")
    n = np.array([r.n_virtual for r in reports], dtype=np.float64)
    p = n / n.sum()
    deltas = [r.param_delta for r in reports]
    if rule == "fednova":
        taus = np.array([r.local_steps_taken for r in reports], dtype=np.float64)
        tau_eff = float(p @ taus)
        scaled = [{k: (d[k] / t if t else np.zeros_like(d[k])) for k in d} for d, t in zip(deltas, taus)]
        step = _weighted_sum(list(p), scaled)
        step = {k: tau_eff * v for k, v in step.items()}
    elif rule in ("fedavg", "fedprox", "fedlgd", "scaffold"):
        step = _weighted_sum(list(p), deltas)
    else:
        raise ContractViolation(f"aggregate: unknown rule {rule!r}")
    server.global_params = server.global_params.replace({k: arrays[k] + step[k] for k in arrays})
    if rule == "scaffold":
        if server.scaffold_control is None:
            server.scaffold_control = _zeros_like(arrays)
        lr = cfg.lr_model if cfg is not None else 1.0
        total = num_clients if num_clients is not None else len(reports)
        c = server.scaffold_control
        dcs = [scaffold_control_delta(r.param_delta, c, r.local_steps_taken, lr)
               for r in reports if r.local_steps_taken]
        if dcs:
            mean_dc = _weighted_sum([1.0 / total] * len(dcs), dcs)
            server.scaffold_control = {k: c[k] + mean_dc[k] for k in c}
    return server


def mean_ce_grad(reports):
    """Unweighted mean of the uploaded cross-entropy gradients."""
    reports = _sorted_reports(reports)
    return _weighted_sum([1.0 / len(reports)] * len(reports), [r.ce_grad for r in reports])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(params, testsets):
    """Top-1 accuracy per client on real test data and their unweighted mean."""
    per_client = {}
    for cid, ds in testsets.items() if isinstance(testsets, dict) else enumerate(testsets):
        if ds is None or len(ds.labels) == 0:
            continue
        pred = predict_labels(params, ds.images)
        per_client[cid] = float(np.mean(pred == ds.labels))
    avg = float(np.mean(list(per_client.values()))) if per_client else float("nan")
    return {"per_client": per_client, "average": avg}


def heterogeneity(params, datasets, max_per_class=None):
    """Feature-mean MMD between every client pair, keyed ``(i, j)`` with i < j."""
    means = [class_feature_means(params, ds, max_per_class) for ds in datasets]
    out = {}
    for i in range(len(datasets)):
        for j in range(i + 1, len(datasets)):
            out[(i, j)] = mean_distance(means[i], means[j])
    return out


# ---------------------------------------------------------------------------
# data construction
# ---------------------------------------------------------------------------

def build_client_data(cfg):
    """(train, test) LabeledDataset pairs, one per configured client."""
    out = []
    dseed = cfg.effective_data_seed
    for i, spec in enumerate(cfg.clients):
        src = spec.get("source", "blob_digits")
        if src == "blob_digits":
            kw = dict(side=spec.get("side", 16), num_classes=spec.get("num_classes", 4),
                      clutter=spec.get("clutter", 0.35), noise=spec.get("noise", 0.08))
            train = blob_digits(spec.get("n_train_per_class", 100),
                                seed=derive_seed(dseed, i, _PURPOSE["data"], 0), **kw)
            test = blob_digits(spec.get("n_test_per_class", 50),
                               seed=derive_seed(dseed, i, _PURPOSE["data"], 1), **kw)
        else:
            k = spec.get("num_classes")
            train = load_idx(spec["train_images"], spec["train_labels"], num_classes=k)
            test = load_idx(spec["test_images"], spec["test_labels"], num_classes=k)
            if spec.get("pad_to"):
                train, test = pad_to(train, spec["pad_to"]), pad_to(test, spec["pad_to"])
            if spec.get("rgb"):
                train, test = to_rgb(train), to_rgb(test)
        shift = spec.get("shift", [])
        train = synth_domain_shift(train, shift, derive_seed(dseed, i, _PURPOSE["data"], 2))
        test = synth_domain_shift(test, shift, derive_seed(dseed, i, _PURPOSE["data"], 3))
        out.append((train, test))
    shapes = {tr.images.shape[1:] for tr, _ in out}
    if len(shapes) != 1:
        raise ContractViolation(f"clients disagree on image shape: {sorted(shapes)}")
    return out


def make_clients(cfg, data=None):
    data = build_client_data(cfg) if data is None else data
    return [ClientState(i, tr, te) for i, (tr, te) in enumerate(data)]


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    rows: list
    server: ServerState
    clients: list
    snapshots: dict
    notes: list


def worker_count():
    raw = os.environ.get("FEDVIRT_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ContractViolation(f"FEDVIRT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ContractViolation(f"FEDVIRT_THREADS must be a positive integer, got {raw!r}")
    return n


class _Pool:
    """Map over clients, in parallel when more than one worker is allowed.

    Results come back in input order, so nothing downstream depends on
    which worker finished first.
    """

    def __init__(self, workers):
        self.workers = workers
        self.executor = ThreadPoolExecutor(workers) if workers > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self.executor is None or len(items) < 2:
            return [fn(x) for x in items]
        return list(self.executor.map(fn, items))

    def close(self):
        if self.executor is not None:
            self.executor.shutdown()


def _participants(cfg, clients, round_idx):
    if cfg.participation >= 1.0:
        return list(clients)
    m = max(1, int(round(cfg.participation * len(clients))))
    rng = np.random.default_rng(derive_seed(cfg.seed, 0, round_idx, _PURPOSE["sample"]))
    chosen = sorted(rng.choice(len(clients), size=m, replace=False).tolist())
    return [clients[i] for i in chosen]


def _diag_sets(datasets, per_class):
    """First ``per_class`` samples of every class (deterministic subsample)."""
    out = []
    for ds in datasets:
        idx = np.concatenate([np.flatnonzero(ds.labels == k)[:per_class] for k in sorted(set(ds.labels.tolist()))])
        out.append(_Subset(ds.images[idx], ds.labels[idx]))
    return out


@dataclass(frozen=True)
class _Subset:
    images: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Initialization:
    """Outcome of stage 1, reusable by every rule that shares its settings."""
    key: tuple
    global_params: object
    client_virtual: list
    global_virtual: object


def init_key(cfg):
    """The configuration fields that determine stage 1."""
    return (cfg.seed, cfg.effective_data_seed, cfg.arch, cfg.width, cfg.ipc, cfg.local_distill_steps,
            cfg.lr_pixel_dm, cfg.real_batch_per_class, cfg.augment, json.dumps(cfg.clients, sort_keys=True))


def _problem_shape(clients):
    if not clients:
        raise ContractViolation("run_pipeline: no clients")
    shapes = {c.real_train.images.shape[1:] for c in clients}
    if len(shapes) != 1:
        raise ContractViolation(f"run_pipeline: clients disagree on image shape {sorted(shapes)}")
    class_count = max(c.real_train.class_count for c in clients)
    present = sorted(set().union(*(set(c.real_train.classes()) for c in clients)))
    if present != list(range(class_count)):
        raise ContractViolation(f"run_pipeline: classes {sorted(set(range(class_count)) - set(present))} "
                                f"are absent from every client")
    return shapes.pop(), class_count, present


def initialize(cfg, clients, pool=None):
    """Stage 1: statistics, virtual-data initialisation and the local warm-up.

    Clients upload only their per-class statistics. Each client initialises
    its virtual data from its own statistics and refines it by distribution
    matching against the initial model; the server initialises the global
    virtual data from the aggregated statistics.
    """
    in_shape, class_count, _ = _problem_shape(clients)
    pool = pool or _Pool(1)
    params = init_model(cfg.arch, in_shape, class_count, cfg.width, derive_seed(cfg.seed, 0, 0, _PURPOSE["model"]))
    stats = [class_stats(c.real_train) for c in clients]
    global_stats = aggregate_stats(stats)

    def warm_up(pair):
        client, st = pair
        v = init_virtual(st, cfg.ipc, seed=derive_seed(cfg.seed, client.client_id, 0, _PURPOSE["virtual_init"]))
        return distribution_match(
            client.real_train, v, params, steps=cfg.local_distill_steps, lr=cfg.lr_pixel_dm,
            real_batch_per_class=cfg.real_batch_per_class, augment=cfg.augment,
            seed=derive_seed(cfg.seed, client.client_id, 0, _PURPOSE["refresh"]))

    client_virtual = pool.map(warm_up, list(zip(clients, stats)))
    global_virtual = init_virtual(global_stats, cfg.ipc, seed=derive_seed(cfg.seed, 0, 0, _PURPOSE["server_init"]))
    return Initialization(init_key(cfg), params, client_virtual, global_virtual)


def run_pipeline(cfg, clients, on_round=None, on_report=None, init=None):
    """Run all three stages and return per-round metrics and final state.

    ``on_round(row)`` is called after every metrics row is produced and
    ``on_report(round, report)`` for every client report, e.g. for auditing.
    ``init`` may carry a stage-1 result from :func:`initialize` computed with
    the same settings; runs that differ only in the rule can share it.
    """
    _, _, present = _problem_shape(clients)
    if cfg.rule == "fedlgd":
        for c in clients:
            if c.real_train.classes() != present:
                raise ContractViolation(f"run_pipeline: client {c.client_id} lacks some classes; "
                                        f"contrastive anchors need every class locally")
    fedlgd = cfg.rule == "fedlgd"
    tau = cfg.tau if fedlgd else 0
    notes = []
    if fedlgd and tau == 0:
        notes.append("tau=0: warm-up virtual data only, global virtual data never refined")

    pool = _Pool(worker_count())
    rows, snapshots = [], {}
    try:
        diag_real = _diag_sets([c.real_train for c in clients], cfg.diag_per_class)

        # stage 1 ----------------------------------------------------------
        if init is None:
            init = initialize(cfg, clients, pool)
        elif init.key != init_key(cfg):
            raise ContractViolation("run_pipeline: initialisation was computed for a different configuration")
        server = ServerState(init.global_params)
        for c, v in zip(clients, init.client_virtual):
            c.virtual = v
            c.local_params = init.global_params
        if fedlgd:
            server.set_global_virtual(init.global_virtual)
        snapshots[0] = _snapshot(server, clients)
        row = _metrics_row(0, "init", server, clients, diag_real, [], None)
        rows.append(row)
        if on_round:
            on_round(row)

        # stages 2 and 3 ---------------------------------------------------
        for t in range(1, cfg.rounds + 1):
            distilling = t <= tau
            server.advance("distill" if distilling else "virtual_train")
            server.round = t
            theta_t = server.global_params
            members = _participants(cfg, clients, t)
            reports = pool.map(lambda c: client_update(c, theta_t, server.global_virtual, cfg, t,
                                                       server.scaffold_control), members)
            if on_report:
                for r in reports:
                    on_report(t, r)
            aggregate(reports, cfg.rule, server, cfg, num_clients=len(clients))
            l_dist = None
            if distilling:
                hist = []
                server.set_global_virtual(gradient_match(
                    server.global_virtual, mean_ce_grad(reports), theta_t, steps=cfg.global_distill_steps,
                    lr=cfg.lr_pixel_gm, seed=derive_seed(cfg.seed, 0, t, _PURPOSE["gm"]), history=hist))
                l_dist = (hist[0], hist[-1]) if hist else None
                pool.map(lambda c: refresh_local_virtual(c, server.global_params, cfg, t), clients)
            if t == tau or t == cfg.rounds:
                snapshots[t] = _snapshot(server, clients)
            row = _metrics_row(t, server.stage, server, clients, diag_real, reports, l_dist)
            rows.append(row)
            if on_round:
                on_round(row)
    finally:
        pool.close()
    return RunResult(rows, server, clients, snapshots, notes)


def _snapshot(server, clients):
    return {"global": server.global_virtual, "clients": [c.virtual for c in clients]}


def _metrics_row(t, stage, server, clients, diag_real, reports, l_dist):
    params = server.global_params
    ev = evaluate(params, {c.client_id: c.real_test for c in clients})
    row = {"round": t, "stage": stage}
    for c in clients:
        row[f"acc_{c.client_id}"] = ev["per_client"].get(c.client_id, float("nan"))
    row["acc_avg"] = ev["average"]
    row["ce_mean"] = float(np.mean([r.metrics["ce"] for r in reports])) if reports else float("nan")
    row["con_mean"] = float(np.mean([r.metrics["con"] for r in reports])) if reports else float("nan")
    row["l_dist_start"] = l_dist[0] if l_dist else float("nan")
    row["l_dist"] = l_dist[1] if l_dist else float("nan")
    virt = heterogeneity(params, [c.virtual for c in clients])
    real = heterogeneity(params, diag_real)
    for (i, j), v in virt.items():
        row[f"mmd_virtual_{i}_{j}"] = v
    for (i, j), v in real.items():
        row[f"mmd_real_{i}_{j}"] = v
    return row
