"""Constrained greedy design search over network configs.

Starting from an initial config, each iteration mutates the current best,
trains the candidate briefly from scratch and accepts it only when it meets
the requirements and strictly raises the NetScore ``u``.  Accept decisions
depend on the ordering of ``u`` alone.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .analysis import PerfRecord, count_flops, count_params
from .config import (
    INPUT,
    BottleneckReductionSpec,
    Edge,
    HeadSpec,
    NetworkConfig,
    RefineSpec,
    ResidualBottleneckSpec,
    StemSpec,
    infer_shapes,
    reference_config,
    validate,
)
from .data import Dataset, synth_split
from .errors import ArgumentError, NumericalError, ShapeError
from .network import assemble_network
from .training import evaluate_dataset, train

log = logging.getLogger(__name__)

WIDTH_FACTORS = (0.75, 1.25)
COMPRESSION_RATIOS = (2, 4, 8)
MIN_REPEATS, MAX_REPEATS = 1, 8


@dataclass(frozen=True)
class Requirements:
    acc_min: float
    max_params: Optional[float] = None  # millions
    max_flops: Optional[float] = None  # billions of MACs

    def __post_init__(self):
        if not (0 < self.acc_min <= 100):
            raise ArgumentError(f"acc_min must lie in (0, 100], got {self.acc_min}")
        for name in ("max_params", "max_flops"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ArgumentError(f"{name} must be positive, got {v}")


def indicator(perf: PerfRecord, req: Requirements) -> bool:
    if perf.a < req.acc_min:
        return False
    if req.max_params is not None and perf.p > req.max_params:
        return False
    if req.max_flops is not None and perf.f > req.max_flops:
        return False
    return True


# -- mutations -----------------------------------------------------------------------


def round_width(w: float) -> int:
    return max(8, int(round(w / 8.0)) * 8)


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        self.parent[self.find(a)] = self.find(b)


def _out_field(spec) -> Optional[str]:
    return {
        StemSpec: "c_out",
        ResidualBottleneckSpec: "c",
        BottleneckReductionSpec: "c_out",
        RefineSpec: "c_out",
    }.get(type(spec))


def _in_field(spec, port: str) -> Optional[str]:
    if isinstance(spec, RefineSpec):
        return {"deep": "c_deep", "skip": "c_skip"}[port]
    return {
        ResidualBottleneckSpec: "c",
        BottleneckReductionSpec: "c_in",
        HeadSpec: "c_in",
    }.get(type(spec))


def width_stages(config: NetworkConfig) -> List[List[Tuple[str, str]]]:
    """Groups of ``(node, field)`` channel counts that must stay equal.

    A stage is everything tied together by edges and shape-preserving
    blocks; the fixed input channels and class count are never included.
    """
    uf = _UnionFind()
    nodes = config.node_map()
    for spec in config.nodes:
        out = _out_field(spec)
        if out:
            uf.find((spec.name, out))
        if isinstance(spec, BottleneckReductionSpec):
            uf.find((spec.name, "c_mid"))
        if isinstance(spec, RefineSpec) and spec.optional:
            uf.union((spec.name, "c_deep"), (spec.name, "c_out"))
    for e in config.edges:
        if e.src == INPUT:
            continue
        dst_field = _in_field(nodes[e.dst], e.port)
        if dst_field:
            uf.union((e.dst, dst_field), (e.src, _out_field(nodes[e.src])))
    groups: Dict[tuple, list] = {}
    for key in list(uf.parent):
        groups.setdefault(uf.find(key), []).append(key)
    order = {n.name: i for i, n in enumerate(config.nodes)}
    out = [sorted(g, key=lambda k: (order[k[0]], k[1])) for g in groups.values()]
    out.sort(key=lambda g: (order[g[0][0]], g[0][1]))
    return out


def rb_chains(config: NetworkConfig) -> List[List[str]]:
    """Maximal runs of residual bottlenecks feeding one another."""
    nodes = config.node_map()
    is_rb = {n: isinstance(s, ResidualBottleneckSpec) for n, s in nodes.items()}
    src_of = {e.dst: e.src for e in config.edges if e.port == "in"}
    chains = []
    for spec in config.nodes:
        if not is_rb[spec.name] or is_rb.get(src_of.get(spec.name), False):
            continue
        chain = [spec.name]
        while True:
            nxt = [e.dst for e in config.outbound(chain[-1]) if e.port == "in" and is_rb[e.dst]]
            if len(nxt) != 1:
                break
            chain.append(nxt[0])
        chains.append(chain)
    return chains


def _fresh_name(config: NetworkConfig, base: str) -> str:
    used = {n.name for n in config.nodes}
    i = 1
    while f"{base}_{i}" in used:
        i += 1
    return f"{base}_{i}"


def _scale_stage(config, stage, factor):
    cfg = config.copy()
    nodes = cfg.node_map()
    old = getattr(nodes[stage[0][0]], stage[0][1])
    new = round_width(old * factor)
    if new == old:
        return None
    for node, attr in stage:
        setattr(nodes[node], attr, new)
    return cfg, f"scale {stage[0][0]}.{stage[0][1]} stage {old}->{new}"


def _set_ratio(config, name, r):
    cfg = config.copy()
    spec = cfg.node(name)
    old = spec.compression_ratio
    spec.compression_ratio = r
    return cfg, f"compression_ratio {name} {old}->{r}"


def _remove_refine(config, name):
    cfg = config.copy()
    deep = next(e.src for e in cfg.inbound(name) if e.port == "deep")
    edges = []
    for e in cfg.edges:
        if e.dst == name:
            continue
        edges.append(Edge(deep, e.dst, e.port) if e.src == name else e)
    cfg.edges = edges
    cfg.nodes = [n for n in cfg.nodes if n.name != name]
    cfg.shortcut_mask = [m for m in cfg.shortcut_mask if m[1] != name]
    return cfg, f"remove optional refine {name}"


def _insert_refine(config, after, skip_src, c_skip):
    cfg = config.copy()
    c = cfg.node(after).c_out
    name = _fresh_name(cfg, "refine_opt")
    spec = RefineSpec(name, c_deep=c, c_skip=c_skip, c_out=c, upscale=1)
    idx = [n.name for n in cfg.nodes].index(after)
    cfg.nodes.insert(idx + 1, spec)
    cfg.edges = [Edge(name, e.dst, e.port) if e.src == after else e for e in cfg.edges]
    cfg.edges += [Edge(after, name, "deep"), Edge(skip_src, name, "skip")]
    cfg.shortcut_mask.append((skip_src, name))
    return cfg, f"add optional refine {name} after {after} with skip from {skip_src}"


def _add_repeat(config, head):
    cfg = config.copy()
    src = cfg.node(head)
    name = _fresh_name(cfg, "rb_x")
    producer = next(e.src for e in cfg.inbound(head))
    idx = [n.name for n in cfg.nodes].index(head)
    cfg.nodes.insert(idx, ResidualBottleneckSpec(name, src.c, src.compression_ratio))
    cfg.edges = [Edge(name, head, "in") if (e.dst == head) else e for e in cfg.edges]
    cfg.edges.insert(0, Edge(producer, name, "in"))
    return cfg, f"add residual bottleneck {name} before {head}"


def _remove_repeat(config, head):
    cfg = config.copy()
    producer = next(e.src for e in cfg.inbound(head))
    cfg.edges = [Edge(producer, e.dst, e.port) if e.src == head else e for e in cfg.edges if e.dst != head]
    cfg.shortcut_mask = [(producer if s == head else s, d) for s, d in cfg.shortcut_mask]
    cfg.nodes = [n for n in cfg.nodes if n.name != head]
    return cfg, f"remove residual bottleneck {head}"


def _ancestors(config, name):
    seen, stack = set(), [name]
    while stack:
        for e in config.inbound(stack.pop()):
            if e.src != INPUT and e.src not in seen:
                seen.add(e.src)
                stack.append(e.src)
    return seen


def candidate_mutations(config: NetworkConfig) -> List[Callable[[], Optional[tuple]]]:
    """Every mutation applicable to ``config``, as deferred thunks, in a fixed order."""
    out = []
    for stage in width_stages(config):
        for f in WIDTH_FACTORS:
            out.append(lambda s=stage, f=f: _scale_stage(config, s, f))
    for spec in config.nodes:
        if isinstance(spec, ResidualBottleneckSpec):
            for r in COMPRESSION_RATIOS:
                if r != spec.compression_ratio:
                    out.append(lambda n=spec.name, r=r: _set_ratio(config, n, r))
    mandatory = [n for n in config.nodes if isinstance(n, RefineSpec) and not n.optional]
    for spec in config.nodes:
        if isinstance(spec, RefineSpec) and spec.optional and mandatory:
            out.append(lambda n=spec.name: _remove_refine(config, n))
    try:
        shapes = infer_shapes(config, (1, config.input_channels) + tuple(config.input_size))
    except ShapeError:
        shapes = {}
    for spec in config.nodes:
        if isinstance(spec, RefineSpec) and spec.name in shapes:
            hw = shapes[spec.name][2:]
            direct = {e.src for e in config.inbound(spec.name)}
            for anc in sorted(_ancestors(config, spec.name) - direct):
                if shapes[anc][2:] == hw:
                    out.append(lambda a=spec.name, s=anc: _insert_refine(config, a, s, shapes[s][1]))
    for chain in rb_chains(config):
        if len(chain) < MAX_REPEATS:
            out.append(lambda h=chain[0]: _add_repeat(config, h))
        if len(chain) > MIN_REPEATS:
            out.append(lambda h=chain[0]: _remove_repeat(config, h))
    return out


def _buildable(config: NetworkConfig) -> bool:
    if validate(config):
        return False
    try:
        infer_shapes(config, (1, config.input_channels) + tuple(config.input_size))
    except ShapeError:
        return False
    return True


def propose(config: NetworkConfig, rng: np.random.Generator) -> Tuple[NetworkConfig, Optional[str]]:
    """One random legal mutation of ``config``.

    Returns ``(new_config, description)``; when no mutation yields a valid
    config the input is returned unchanged with description None.
    """
    cands = candidate_mutations(config)
    for i in rng.permutation(len(cands)):
        res = cands[i]()
        if res is not None and _buildable(res[0]):
            return res
    return config, None


# -- evaluation and search ---------------------------------------------------------


@dataclass
class EvalSettings:
    budget: int = 2
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8


def evaluate(
    config: NetworkConfig,
    data: Tuple[Dataset, Dataset],
    budget: int,
    seed: int = 0,
    settings: Optional[EvalSettings] = None,
) -> PerfRecord:
    """Train a fresh instance for ``budget`` epochs and score it.

    ``a`` is held-out pixel accuracy in percent, ``p`` learnable parameters
    in millions and ``f`` MACs in billions for one image at
    ``config.input_size``.  A non-finite training loss or non-finite
    validation logits yield ``a = 0``.
    """
    s = settings or EvalSettings()
    train_ds, val_ds = data
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ArgumentError("evaluation needs non-empty train and validation splits")
    graph = assemble_network(config, seed=seed)
    hist = train(graph, train_ds, budget, s.lr, s.momentum, s.batch_size, seed=seed)
    p = count_params(config).total_params / 1e6
    f = count_flops(config, (1, config.input_channels) + tuple(config.input_size)).total_macs / 1e9
    if hist.diverged:
        return PerfRecord.score(0.0, p, f)
    try:
        acc = evaluate_dataset(graph, val_ds).pixel_accuracy
    except NumericalError:
        return PerfRecord.score(0.0, p, f)
    if not math.isfinite(acc):
        return PerfRecord.score(0.0, p, f)
    return PerfRecord.score(100.0 * acc, p, f)


@dataclass
class LogRecord:
    k: int
    accepted: bool
    perf: PerfRecord
    digest: str
    mutation: Optional[str] = None
    snapshot: Optional[str] = None

    def to_dict(self):
        return {
            "kind": "search_record",
            "k": self.k,
            "accepted": self.accepted,
            **_perf_json(self.perf),
            "digest": self.digest,
            "mutation": self.mutation,
            "snapshot": self.snapshot,
        }


@dataclass
class SearchState:
    seed: int
    best: NetworkConfig
    best_perf: Optional[PerfRecord] = None
    trace: List[Tuple[str, PerfRecord]] = field(default_factory=list)
    log: List[LogRecord] = field(default_factory=list)
    k: int = 0
    infeasible_start: bool = False


def accepts(perf: PerfRecord, best_u: Optional[float], req: Requirements, transform=None) -> bool:
    """The accept rule: feasible and strictly better than the incumbent."""
    if not indicator(perf, req):
        return False
    if best_u is None:
        return True
    t = transform or (lambda u: u)
    return t(perf.u) > t(best_u)


def search(
    initial: NetworkConfig,
    req: Requirements,
    data: Tuple[Dataset, Dataset],
    iterations: int,
    seed: int = 0,
    budget: int = 2,
    settings: Optional[EvalSettings] = None,
    snapshot_dir=None,
) -> SearchState:
    """Greedy accept-if-better search.

    Iteration 0 scores ``initial``; it joins the trace only if feasible,
    otherwise ``infeasible_start`` is set and the first feasible candidate
    is accepted.  Candidates are always derived from the current best.
    """
    if iterations < 0:
        raise ArgumentError(f"iterations must be >= 0, got {iterations}")
    settings = replace(settings or EvalSettings(), budget=budget)
    rng = np.random.default_rng(seed)
    state = SearchState(seed=seed, best=initial.copy())
    snap = Path(snapshot_dir) if snapshot_dir is not None else None
    if snap is not None:
        snap.mkdir(parents=True, exist_ok=True)

    def record(k, cfg, perf, mutation):
        best_u = state.best_perf.u if state.best_perf is not None else None
        ok = accepts(perf, best_u, req)
        path = None
        if snap is not None:
            path = snap / f"{cfg.digest()}.json"
            path.write_text(cfg.to_json())
            path = str(path)
        state.log.append(LogRecord(k, ok, perf, cfg.digest(), mutation, path))
        if ok:
            state.best, state.best_perf = cfg, perf
            state.trace.append((cfg.digest(), perf))
        log.info("k=%d u=%.3f a=%.2f accepted=%s %s", k, perf.u, perf.a, ok, mutation or "")
        return ok

    perf = evaluate(initial, data, budget, seed, settings)
    state.infeasible_start = not record(0, initial, perf, None)
    for k in range(1, iterations + 1):
        state.k = k
        cand, mutation = propose(state.best, rng)
        if mutation is None:
            log.info("k=%d no legal mutation", k)
            state.log.append(LogRecord(k, False, PerfRecord.score(0.0, 0.0, 0.0), cand.digest(), None))
            continue
        record(k, cand, evaluate(cand, data, budget, seed, settings), mutation)
    return state


def replay(records: List[LogRecord], req: Requirements, transform=None) -> List[bool]:
    """Re-derive accept decisions from a search log under a transformed ``u``."""
    decisions, best_u = [], None
    for rec in records:
        if rec.mutation is None and rec.k > 0:
            decisions.append(False)
            continue
        ok = accepts(rec.perf, best_u, req, transform)
        if ok:
            best_u = rec.perf.u
        decisions.append(ok)
    return decisions


def write_trace(state: SearchState, path) -> None:
    """One JSON object per line: the search log, then a summary record."""
    with open(path, "w") as fh:
        for rec in state.log:
            fh.write(json.dumps(rec.to_dict()) + "\n")
        fh.write(
            json.dumps(
                {
                    "kind": "search_summary",
                    "seed": state.seed,
                    "iterations": state.k,
                    "infeasible_start": state.infeasible_start,
                    "best_digest": state.best.digest(),
                    "trace": [{"digest": d, **_perf_json(p)} for d, p in state.trace],
                }
            )
            + "\n"
        )


def read_trace(path) -> List[LogRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        if d.get("kind") != "search_record":
            continue
        u = -math.inf if d["u"] is None else float(d["u"])
        perf = PerfRecord(float(d["a"]), float(d["p"]), float(d["f"]), u)
        out.append(LogRecord(d["k"], d["accepted"], perf, d["digest"], d["mutation"], d["snapshot"]))
    return out


def _perf_json(perf: PerfRecord) -> dict:
    # A failed evaluation has u = -inf, which JSON cannot represent.
    d = perf.to_dict()
    if not math.isfinite(d["u"]):
        d["u"] = None
    return d


# -- desk-scale setting ----------------------------------------------------------------

TOY_EXTENT = 32
TOY_CLASSES = 3


def toy_config() -> NetworkConfig:
    """The reference topology at 3 classes and a 32x32 input."""
    cfg = reference_config(TOY_CLASSES)
    cfg.input_size = (TOY_EXTENT, TOY_EXTENT)
    return cfg


def toy_setting(seed: int = 0, n_train: int = 64, n_val: int = 32):
    """Initial config and a held-out synthetic split for small searches."""
    cfg = toy_config()
    data = synth_split(seed, n_train, n_val, TOY_EXTENT, TOY_EXTENT, TOY_CLASSES)
    return cfg, data
