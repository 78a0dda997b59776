"""Direct gradient-descent fitting of query slots to a GT scene.

Every slot owns free parameters (class logits and normalized point
coordinates); there is no network. Each iteration re-runs hierarchical
matching, evaluates the set losses and takes a plain gradient step, so the
matcher and loss definitions are the only moving parts. This is the harness
behind the modeling (fixed order vs permutation equivalent) and one-to-many
ablations.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from mapforge.errors import DivergenceDetected
from mapforge.geometry import (
    CLASSES,
    NUM_CLASSES,
    ElementClass,
    MapElement,
    Scene,
    denormalize,
)
from mapforge.losses import LossWeights, one2many_loss, one2one_loss
from mapforge.matching import Target, make_targets, pad_targets
from mapforge.metric import APResult, ScoredElement, evaluate
from mapforge.synthetic import SceneRecipe, gen_scene

MODES = ("permutation_equivalent", "fixed_order")
_MODE_ALIASES = {"perm_equiv": "permutation_equivalent", "fixed": "fixed_order"}


def parse_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown modeling mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class FitConfig:
    mode: str = "permutation_equivalent"
    n_queries: int = 50
    one2many_k: int = 0
    one2many_t: int = 0
    lr: float = 0.0005
    iterations: int = 300
    seed: int = 0
    eval_every: int = 10
    order_jitter: bool = False
    wrap_open: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))
        if self.lr < 0 or self.iterations < 0:
            raise ValueError("lr and iterations must be nonnegative")
        if self.n_queries < 1 or self.eval_every < 1:
            raise ValueError("n_queries and eval_every must be positive")
        if self.one2many_k < 0:
            raise ValueError("one2many_k must be nonnegative")

    @property
    def aux_slots(self) -> int:
        """Size of the one-to-many bank; defaults to ``n_queries * K``."""
        if self.one2many_k == 0:
            return 0
        return self.one2many_t or self.n_queries * self.one2many_k


@dataclass
class FitParams:
    logits: np.ndarray
    points: np.ndarray
    aux_logits: np.ndarray | None = None
    aux_points: np.ndarray | None = None

    def copy(self) -> "FitParams":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return FitParams(self.logits.copy(), self.points.copy(), cp(self.aux_logits), cp(self.aux_points))


@dataclass
class FitTrace:
    rows: list[dict] = field(default_factory=list)
    snapshots: list[tuple[int, float]] = field(default_factory=list)
    final: APResult | None = None
    params: FitParams | None = None
    config: FitConfig | None = None

    @property
    def final_map(self) -> float:
        return self.final.mAP if self.final is not None else float("nan")

    def loss_series(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def iterations_to(self, target_map: float) -> int | None:
        for it, m in self.snapshots:
            if m >= target_map:
                return it
        return None

    def to_csv(self) -> str:
        snap = dict(self.snapshots)
        cols = list(self.rows[0].keys()) + ["mAP"] if self.rows else ["iteration", "mAP"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            m = snap.get(r["iteration"])
            w.writerow([_fmt(r[c]) for c in cols[:-1]] + ["" if m is None else _fmt(m)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": _config_dict(self.config) if self.config else None,
            "rows": self.rows,
            "snapshots": [{"iteration": i, "mAP": m} for i, m in self.snapshots],
            "final": self.final.to_dict() if self.final else None,
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _config_dict(cfg: FitConfig) -> dict:
    return asdict(cfg)


def init_params(config: FitConfig, dim: int, n_points: int = 20) -> FitParams:
    """Points uniform in the unit box, logits at 0.

    The one-to-one bank and the auxiliary bank draw from separate seeded
    streams, so enabling the auxiliary bank leaves the one-to-one
    initialization untouched.
    """
    main, aux = np.random.default_rng(config.seed).spawn(2)
    n, nv = config.n_queries, n_points
    params = FitParams(np.zeros((n, NUM_CLASSES)), main.random((n, nv, dim)))
    if config.aux_slots:
        t = config.aux_slots
        params.aux_logits = np.zeros((t, NUM_CLASSES))
        params.aux_points = aux.random((t, nv, dim))
    return params


def params_at(scene: Scene, config: FitConfig, saturation: float = 12.0) -> FitParams:
    """Parameters placed exactly on the GT with saturated logits.

    Slot ``i < len(scene)`` holds element ``i``; the remaining slots are
    confident no-object predictions parked on the first element.
    """
    n = config.n_queries
    targets = make_targets(scene.elements, scene.range)
    nv = targets[0].points.shape[0]
    logits = np.full((n, NUM_CLASSES), -saturation)
    points = np.tile(targets[0].points, (n, 1, 1))
    for i, t in enumerate(targets):
        logits[i, t.label] = saturation
        points[i] = t.points
    params = FitParams(logits, points)
    if config.aux_slots:
        params.aux_logits = np.full((config.aux_slots, NUM_CLASSES), -saturation)
        params.aux_points = np.tile(targets[0].points, (config.aux_slots, 1, 1))
    assert points.shape[1] == nv
    return params


def to_predictions(logits, points, scene: Scene, scene_id=0) -> list[ScoredElement]:
    """Score each slot by its top class probability; points are clamped and denormalized."""
    probs = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=float)))
    out = []
    for p, pts in zip(probs, points):
        cls = CLASSES[int(np.argmax(p))]
        metric = denormalize(np.clip(pts, 0.0, 1.0), scene.range)
        out.append(ScoredElement(MapElement(cls, metric), float(p.max()), scene_id))
    return out


def _jittered(scene: Scene, rng: np.random.Generator) -> list[MapElement]:
    out = []
    for el in scene.elements:
        group = el.group
        gamma = group[int(rng.integers(len(group)))]
        out.append(el.with_points(el.points[gamma]))
    return out


def _targets(elements, scene: Scene, config: FitConfig) -> list[Target]:
    return make_targets(elements, scene.range, config.mode == "permutation_equivalent")


def fit_scene(scene: Scene, config: FitConfig = FitConfig(), init: FitParams | None = None) -> FitTrace:
    """Fit ``config.n_queries`` slots to ``scene`` by plain gradient descent.

    Rows are recorded for iterations ``0..iterations`` (loss at the current
    parameters, before the step); mAP snapshots every ``eval_every``
    iterations and at the end.
    """
    if len(scene) == 0:
        raise ValueError("cannot fit an empty scene")
    if len(scene) > config.n_queries:
        raise ValueError(f"{len(scene)} elements exceed {config.n_queries} query slots")
    nv = scene.elements[0].n
    params = init.copy() if init is not None else init_params(config, scene.dim, nv)
    gts = {0: list(scene.elements)}
    jitter_rng = np.random.default_rng([config.seed, 1])
    static = _targets(scene.elements, scene, config)
    w = config.weights
    k = config.one2many_k
    trace = FitTrace(config=config)

    for it in range(config.iterations + 1):
        if config.order_jitter:
            targets = _targets(_jittered(scene, jitter_rng), scene, config)
        else:
            targets = static
        slots = pad_targets(targets, config.n_queries)
        o2o = one2one_loss(params.logits, params.points, slots, weights=w, wrap_open=config.wrap_open)
        row = {
            "iteration": it,
            "total": w.one2one * o2o.total,
            "cls": o2o.terms["cls"],
            "p2p": o2o.terms["p2p"],
            "dir": o2o.terms["dir"],
        }
        o2m = None
        if k:
            o2m = one2many_loss(
                params.aux_logits, params.aux_points, targets, k, weights=w, wrap_open=config.wrap_open
            )
            row["total"] += w.one2many * o2m.total
            row["one2many"] = o2m.total
            row["aux_positive"] = o2m.assignment.num_positive
        if not np.isfinite(row["total"]):
            raise DivergenceDetected(it)
        trace.rows.append(row)

        if it % config.eval_every == 0 or it == config.iterations:
            res = evaluate(to_predictions(params.logits, params.points, scene), gts)
            trace.snapshots.append((it, res.mAP))
            if it == config.iterations:
                trace.final = res
        if it == config.iterations:
            break

        # overflow shows up as non-finite parameters, reported just below
        with np.errstate(over="ignore", invalid="ignore"):
            params.logits -= config.lr * w.one2one * o2o.grad_logits
            params.points -= config.lr * w.one2one * o2o.grad_points
            if o2m is not None:
                params.aux_logits -= config.lr * w.one2many * o2m.grad_logits
                params.aux_points -= config.lr * w.one2many * o2m.grad_points
        if not (np.all(np.isfinite(params.points)) and np.all(np.isfinite(params.logits))):
            raise DivergenceDetected(it + 1)

    trace.params = params
    return trace


# ---------------------------------------------------------------- ablations


def _workers() -> int:
    cap = os.environ.get("MAPFORGE_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(int(cap), 1))
    return n


def _run_pair(args):
    recipe, seed, cfg_a, cfg_b = args
    scene = gen_scene(recipe.with_seed(seed))
    a = fit_scene(scene, replace(cfg_a, seed=seed))
    b = fit_scene(scene, replace(cfg_b, seed=seed))
    return seed, a.final, b.final


def _map_parallel(fn, jobs):
    workers = min(_workers(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, jobs))


def _recipe_for(recipes, i):
    if isinstance(recipes, SceneRecipe):
        return recipes
    return recipes[i % len(recipes)]


@dataclass
class ModelingReport:
    seeds: list[int]
    map_a: list[float]
    map_b: list[float]
    class_a: dict[str, list[float]]
    class_b: dict[str, list[float]]
    labels: tuple[str, str] = ("permutation_equivalent", "fixed_order")

    @property
    def mean_a(self) -> float:
        return float(np.mean(self.map_a))

    @property
    def mean_b(self) -> float:
        return float(np.mean(self.map_b))

    @property
    def mean_diff(self) -> float:
        return float(np.mean(np.subtract(self.map_a, self.map_b)))

    @property
    def win_rate(self) -> float:
        """Fraction of seeds where configuration A strictly beats B."""
        return float(np.mean(np.greater(self.map_a, self.map_b)))

    def class_gap(self, cls) -> float:
        cls = ElementClass.parse(cls).value
        a, b = self.class_a.get(cls, []), self.class_b.get(cls, [])
        if not a:
            return float("nan")
        return float(np.mean(a) - np.mean(b))

    def summary(self) -> dict:
        classes = sorted(set(self.class_a) | set(self.class_b), key=lambda c: ElementClass(c).index)
        return {
            "labels": list(self.labels),
            "seeds": len(self.seeds),
            "mean_mAP": {self.labels[0]: self.mean_a, self.labels[1]: self.mean_b},
            "mean_diff": self.mean_diff,
            "win_rate": self.win_rate,
            "class_mean": {
                c: {self.labels[0]: float(np.mean(self.class_a[c])), self.labels[1]: float(np.mean(self.class_b[c]))}
                for c in classes
            },
            "class_gap": {c: self.class_gap(c) for c in classes},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", f"mAP_{self.labels[0]}", f"mAP_{self.labels[1]}"])
        for s, a, b in zip(self.seeds, self.map_a, self.map_b):
            w.writerow([s, _fmt(a), _fmt(b)])
        return buf.getvalue()


def ablation_config(**overrides) -> FitConfig:
    """Defaults used by the modeling ablation: GT order ambiguity on."""
    base = dict(order_jitter=True, eval_every=300)
    base.update(overrides)
    return FitConfig(**base)


def ablate_modeling(
    recipes: SceneRecipe | Sequence[SceneRecipe],
    seeds: Sequence[int],
    config_a: FitConfig | None = None,
    config_b: FitConfig | None = None,
) -> ModelingReport:
    """Paired fits of two configurations on identical scenes and seeds.

    Defaults compare permutation-equivalent against fixed-order modeling
    under GT ordering ambiguity.
    """
    seeds = list(seeds)
    if len(seeds) < 20:
        raise ValueError("at least 20 seeds are required for a paired ablation")
    config_a = config_a or ablation_config(mode="permutation_equivalent")
    config_b = config_b or ablation_config(mode="fixed_order")
    jobs = [(_recipe_for(recipes, i), s, config_a, config_b) for i, s in enumerate(seeds)]
    results = _map_parallel(_run_pair, jobs)
    report = ModelingReport(seeds, [], [], {}, {}, (config_a.mode, config_b.mode))
    if config_a.mode == config_b.mode:
        report.labels = ("a", "b")
    for _, ra, rb in results:
        report.map_a.append(ra.mAP)
        report.map_b.append(rb.mAP)
        for cls, v in ra.per_class.items():
            report.class_a.setdefault(cls, []).append(v)
        for cls, v in rb.per_class.items():
            report.class_b.setdefault(cls, []).append(v)
    return report


@dataclass
class One2ManyReport:
    seeds: list[int]
    ks: list[int]
    ts: list[int]
    final_map: dict[int, list[float]]
    iters_to_target: dict[int, list[float]]
    aux_positive_ok: bool
    target_fraction: float = 0.9

    def mean_iters(self, k: int) -> float:
        return float(np.mean(self.iters_to_target[k]))

    def summary(self) -> dict:
        return {
            "seeds": len(self.seeds),
            "target_fraction": self.target_fraction,
            "K": self.ks,
            "T": self.ts,
            "mean_final_mAP": {str(k): float(np.mean(v)) for k, v in self.final_map.items()},
            "mean_iterations_to_target": {str(k): self.mean_iters(k) for k in self.ks},
            "aux_positive_count_exact": self.aux_positive_ok,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "K", "T", "final_mAP", "iterations_to_target"])
        for i, s in enumerate(self.seeds):
            for k, t in zip(self.ks, self.ts):
                w.writerow([s, k, t, _fmt(self.final_map[k][i]), _fmt(self.iters_to_target[k][i])])
        return buf.getvalue()


def _run_k_sweep(args):
    recipe, seed, base, ks, ts, frac = args
    scene = gen_scene(recipe.with_seed(seed))
    traces = {}
    for k, t in zip(ks, ts):
        traces[k] = fit_scene(scene, replace(base, seed=seed, one2many_k=k, one2many_t=t))
    ref = traces[ks[0]].final_map * frac
    out = {}
    ok = True
    n_gt = len(scene)
    for k, tr in traces.items():
        it = tr.iterations_to(ref)
        out[k] = (tr.final_map, float(base.iterations if it is None else it))
        if k:
            ok &= all(r["aux_positive"] == k * n_gt for r in tr.rows)
    return seed, out, ok


def ablate_one2many(
    recipes: SceneRecipe | Sequence[SceneRecipe],
    ks: Sequence[int],
    ts: Sequence[int] | None,
    seeds: Sequence[int],
    config: FitConfig | None = None,
    target_fraction: float = 0.9,
) -> One2ManyReport:
    """Iterations for the one-to-one slots to reach ``target_fraction`` of the
    first K's final mAP, per K.

    The auxiliary bank only shapes training; evaluation always scores the
    one-to-one slots. ``ts=None`` uses ``T = n_queries * K``.
    """
    ks = [int(k) for k in ks]
    if any(k < 0 for k in ks):
        raise ValueError("K must be nonnegative")
    config = config or FitConfig(eval_every=5)
    ts = [config.n_queries * k for k in ks] if ts is None else [int(t) for t in ts]
    seeds = list(seeds)
    jobs = [(_recipe_for(recipes, i), s, config, ks, ts, target_fraction) for i, s in enumerate(seeds)]
    results = _map_parallel(_run_k_sweep, jobs)
    final = {k: [] for k in ks}
    iters = {k: [] for k in ks}
    ok = True
    for _, out, good in results:
        ok &= good
        for k in ks:
            final[k].append(out[k][0])
            iters[k].append(out[k][1])
    return One2ManyReport(seeds, ks, ts, final, iters, ok, target_fraction)
