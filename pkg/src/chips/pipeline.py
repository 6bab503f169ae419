"""Shard-to-manifest orchestration: batching, two-pass scoring, selection.

The scoring flow is two passes over the pool: one to accumulate curvature
moments (skipped for methods that precondition with the identity), one to
score every sample. Per-batch work is pure, so it can run on a thread pool;
results are folded strictly in batch order, making every output byte
independent of the worker count.

Scoring batches never span shards, and a trailing single-sample batch is
folded into its predecessor: single-sample batches cannot form in-batch
negatives and are rejected loudly rather than silently padded.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TextIO

import numpy as np
from scipy.special import expit

from .baselines import (
    CheckpointTrajectory,
    OVERREPRESENTED_CONCEPTS,
    TrakScorer,
    WHITELIST_CONCEPTS,
    balance_concepts,
    clipscore_all,
    filter_concepts,
    select_from_survivors,
    select_random,
    tracin_scores,
)
from .curvature import (
    MomentAccumulator,
    accumulate,
    build_surrogate,
    default_ridge,
    self_moment,
    solve_direction,
)
from .datastore import (
    CheckpointStore,
    RunConfig,
    ScoreFileHeader,
    ShardRecord,
    read_params,
    read_scores_binary,
    read_shard,
    write_manifest,
    write_scores_binary,
    write_scores_text,
    write_shard,
    write_params,
    write_surrogate,
)
from .endpoint import (
    EndpointParams,
    FeatureBatch,
    batch_gradients,
    eval_mean_gradient,
    forward,
    gradients_from_geometry,
    param_count,
    params_to_vector,
    vector_to_params,
)
from .errors import ChipsError, ConfigError, EmptyPool
from .numerics import substream
from .scoring import (
    DriftReport,
    EvalPrototypes,
    ScoreRecord,
    SelectionManifest,
    drift_diagnostics,
    learnability_components,
    make_record,
    relevance_all,
    utility_and_select,
    validate_record,
)
from .sketch import SketchSpec, SketchedVector, apply, apply_many
from .theorylab import (
    AdamConfig,
    make_linearized_world,
    make_population_world,
    make_toy_encoder,
    verify_adamw_alignment,
    verify_batch_moments,
    verify_correlation_bound,
    verify_descent,
    verify_proxy_fidelity,
    verify_sketch_error_split,
)

GRADIENT_METHODS = ("chips", "dot", "tracin", "trak", "clipscore")
SELECTOR_METHODS = ("random", "concept-filter", "concept-balance")


def _with_context(label: str, fn: Callable, *args):
    """Run fn, prefixing any pipeline error with where it happened."""
    try:
        return fn(*args)
    except ChipsError as exc:
        raise type(exc)(f"{label}: {exc}") from None


# ------------------------------------------------------------- batching

def _shard_batches(
    path: str | Path, batch_size: int, fold_trailing: bool
) -> Iterator[FeatureBatch]:
    """Fixed-size batches from one shard, in record order.

    With fold_trailing, a final batch of one sample is appended to the
    batch before it (scoring needs in-batch negatives); a shard holding a
    single record still yields it alone, and downstream rejects it loudly.
    """
    pend_ids: list[int] = []
    pend_h: list[np.ndarray] = []
    pend_t: list[np.ndarray] = []
    held: FeatureBatch | None = None

    def flush() -> FeatureBatch:
        batch = FeatureBatch(
            np.array(pend_ids, dtype=np.uint64),
            np.stack(pend_h),
            np.stack(pend_t),
        )
        pend_ids.clear()
        pend_h.clear()
        pend_t.clear()
        return batch

    for rec in read_shard(path):
        pend_ids.append(rec.id)
        pend_h.append(rec.h)
        pend_t.append(rec.t)
        if len(pend_ids) == batch_size:
            if held is not None:
                yield held
            held = flush()
    if pend_ids:
        last = flush()
        if fold_trailing and last.size == 1 and held is not None:
            held = FeatureBatch(
                np.concatenate([held.ids, last.ids]),
                np.concatenate([held.H, last.H]),
                np.concatenate([held.T, last.T]),
            )
        else:
            if held is not None:
                yield held
            held = last
    if held is not None:
        yield held


def _iter_batches(
    paths: Sequence[str | Path], batch_size: int, fold_trailing: bool
) -> Iterator[tuple[str, FeatureBatch]]:
    for path in paths:
        for batch in _shard_batches(path, batch_size, fold_trailing):
            yield str(path), batch


def _pool_tags(paths: Sequence[str | Path]) -> tuple[np.ndarray, list[tuple[str, ...]]]:
    ids: list[int] = []
    tags: list[tuple[str, ...]] = []
    for path in paths:
        for rec in read_shard(path):
            ids.append(rec.id)
            tags.append(rec.tags)
    return np.array(ids, dtype=np.uint64), tags


def _ordered_map(fn: Callable, items: Iterable, workers: int) -> Iterator:
    """Parallel map that yields results in input order with bounded lookahead."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        pending: deque = deque()
        for item in items:
            pending.append(ex.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _batch_fingerprint(ids: np.ndarray) -> str:
    return hashlib.blake2b(ids.tobytes(), digest_size=8).hexdigest()


# ------------------------------------------------------------ components

def load_trajectory(source: str | Path) -> CheckpointTrajectory:
    """CHEP file -> single-checkpoint trajectory (eta 1); directory -> the
    full checkpoint store in insertion order."""
    src = Path(source)
    if src.is_dir():
        steps = tuple(CheckpointStore(src))
        if not steps:
            raise ConfigError(f"{src}: checkpoint store is empty")
        return CheckpointTrajectory(steps)
    return CheckpointTrajectory(((read_params(src), 1.0),))


def _eval_direction_and_prototypes(
    params: EndpointParams,
    eval_paths: Sequence[str | Path],
    config: RunConfig,
) -> tuple[np.ndarray, EvalPrototypes]:
    sums = {"x": None, "y": None, "n": 0}

    def stream() -> Iterator[FeatureBatch]:
        for path, batch in _iter_batches(
            eval_paths, config.eval_batch_size, fold_trailing=False
        ):
            geom = _with_context(f"eval shard {path}", forward, params, batch)
            if sums["x"] is None:
                sums["x"] = geom.Xhat.sum(axis=0)
                sums["y"] = geom.Yhat.sum(axis=0)
            else:
                sums["x"] += geom.Xhat.sum(axis=0)
                sums["y"] += geom.Yhat.sum(axis=0)
            sums["n"] += geom.size
            yield batch

    try:
        u = eval_mean_gradient(params, stream(), config.eval_ema_decay)
    except ConfigError:
        raise ConfigError(
            "evaluation set is empty; scoring needs at least one eval sample"
        ) from None
    proto = EvalPrototypes(
        sums["x"] / sums["n"], sums["y"] / sums["n"], config.beta
    )
    return u, proto


def _accumulate_moments(
    params: EndpointParams,
    pool_paths: Sequence[str | Path],
    config: RunConfig,
    spec: SketchSpec | None,
    dim: int,
    cross: bool,
) -> MomentAccumulator:
    acc = MomentAccumulator(
        "sketched-k" if spec else "exact-P",
        dim,
        ema_decay=config.moment_ema_decay,
        cross=cross,
    )
    fp = spec.fingerprint() if spec else None

    def grads(item):
        path, batch = item
        G = _with_context(f"pool shard {path}", batch_gradients, params, batch)
        return path, apply_many(spec, G) if spec else G

    batches = _iter_batches(pool_paths, config.scoring_batch_size, fold_trailing=True)
    for path, G in _ordered_map(grads, batches, config.workers):
        rows = [SketchedVector(row, fp) for row in G] if spec else G
        _with_context(f"pool shard {path}", accumulate, acc, rows)
    return acc


# ---------------------------------------------------------------- scoring

@dataclass
class ScoreRun:
    """Everything one scoring pass produces, before/after persistence."""

    records: list[ScoreRecord]
    shard_slices: list[tuple[str, int, int]]  # (path, start, end) into records
    header: ScoreFileHeader
    surrogate: object | None  # CurvatureSurrogate when the method builds one
    drift: DriftReport | None


def _score_header(config: RunConfig, spec: SketchSpec | None, count: int, P: int) -> ScoreFileHeader:
    return ScoreFileHeader(
        count=count,
        method=config.method,
        ablation=config.ablation,
        config_fingerprint=config.fingerprint(),
        sketch_kind=spec.kind if spec else "none",
        sketch_k=spec.k if spec else 0,
        sketch_input_dim=spec.input_dim if spec else P,
        sketch_seed=spec.seed if spec else config.seed,
        sketch_s=spec.sparsity_s if spec else config.sketch_s,
    )


def _znorm_per_shard(
    records: list[ScoreRecord], slices: list[tuple[str, int, int]]
) -> list[ScoreRecord]:
    """Replace utilities with per-shard z-scores (ranking artifact: the
    written utility is then a standardized rank key, not the factor
    product; components stay raw)."""
    out = list(records)
    for _, start, end in slices:
        if end <= start:
            continue
        utils = np.array([r.utility for r in records[start:end]])
        std = float(utils.std())
        z = np.zeros_like(utils) if std == 0.0 else (utils - utils.mean()) / std
        for i, zi in zip(range(start, end), z):
            rec = records[i]
            out[i] = ScoreRecord(
                rec.id, rec.alignment, rec.learnability, rec.relevance,
                float(zi), rec.batch_fingerprint,
            )
    return out


def run_score(
    config: RunConfig,
    pool_paths: Sequence[str | Path],
    eval_paths: Sequence[str | Path],
    params_source: str | Path,
    out_scores: str | Path | None = None,
    out_surrogate: str | Path | None = None,
    out_scores_text: str | Path | None = None,
) -> ScoreRun:
    """Score every pool sample against the eval direction; persist on request.

    The eval direction, prototypes, preconditioner, and its solved
    direction are frozen before the scoring pass, so batches are
    independent work items.
    """
    if config.method not in GRADIENT_METHODS:
        raise ConfigError(
            f"method {config.method!r} selects without per-sample scores; "
            f"run selection directly on the pool"
        )
    if not pool_paths:
        raise ConfigError("no pool shards given")
    if not eval_paths:
        raise ConfigError("no eval shards given")

    traj = load_trajectory(params_source)
    params = traj.steps[-1][0]  # reference checkpoint for everything but TracIn
    P = param_count(params)
    spec = config.sketch_spec(P)

    u, proto = _eval_direction_and_prototypes(params, eval_paths, config)
    u_s = apply(spec, u) if spec else u
    fp_sketch = spec.fingerprint() if spec else None
    dim = spec.k if spec else P

    surrogate = None
    direction_data: np.ndarray | None = None

    if config.method == "chips":
        if config.identity_preconditioner:
            acc = MomentAccumulator("sketched-k" if spec else "exact-P", dim)
            if spec:
                acc.fingerprint = fp_sketch
            lam = config.lambda_ridge if config.lambda_ridge is not None else 1.0
            surrogate = build_surrogate(acc, config.alpha, lambda_ridge=lam)
        else:
            acc = _accumulate_moments(params, pool_paths, config, spec, dim, cross=True)
            surrogate = build_surrogate(acc, config.alpha, config.lambda_ridge)
        direction = solve_direction(
            surrogate, u_s, config.cg_iters, config.cg_tol, config.jacobi_precondition
        )
        direction_data = direction.data if spec else direction
    elif config.method == "trak":
        acc = _accumulate_moments(params, pool_paths, config, spec, dim, cross=False)
        lam = config.lambda_trak
        if lam is None:
            lam = default_ridge(self_moment(acc)) if acc.count else 1e-4
        trak = TrakScorer(acc, lam, u_s, iters=config.cg_iters, tol=config.cg_tol)
        surrogate = trak.surrogate
        direction_data = trak.direction.data if spec else trak.direction
    elif config.method == "dot":
        direction_data = u_s.data if spec else u
    # tracin and clipscore need no frozen direction beyond u / the geometry

    full_mode = config.method == "chips" and config.ablation == "full"

    def score_batch(item) -> list[ScoreRecord]:
        path, batch = item
        label = f"pool shard {path}"

        def work():
            geom = forward(params, batch)
            fp = _batch_fingerprint(batch.ids)
            if config.method == "clipscore":
                align = clipscore_all(geom)
            elif config.method == "tracin":
                align = tracin_scores(traj, batch, u_s, spec)
            else:
                G = gradients_from_geometry(params, batch, geom)
                Gs = apply_many(spec, G) if spec else G
                align = Gs @ direction_data
            if config.method == "chips":
                if config.ablation == "full":
                    _, _, w_l = learnability_components(geom)
                    w_r = relevance_all(geom.Xhat, geom.Yhat, proto)
                elif config.ablation == "alignment-margin":
                    _, margin, _ = learnability_components(geom)
                    w_l = 1.0 + expit(-margin)
                    w_r = np.ones(geom.size)
                else:  # alignment-only
                    w_l = np.ones(geom.size)
                    w_r = np.ones(geom.size)
            else:
                w_l = np.ones(geom.size)
                w_r = np.ones(geom.size)
            out = []
            for i in range(geom.size):
                rec = make_record(batch.ids[i], align[i], w_l[i], w_r[i], fp)
                validate_record(rec, full_mode=full_mode)
                out.append(rec)
            return out

        return _with_context(label, work)

    records: list[ScoreRecord] = []
    shard_slices: list[tuple[str, int, int]] = []
    current_path: str | None = None
    start = 0
    batches = _iter_batches(pool_paths, config.scoring_batch_size, fold_trailing=True)

    def tagged(item):
        return item[0], score_batch(item)

    for path, recs in _ordered_map(tagged, batches, config.workers):
        if path != current_path:
            if current_path is not None:
                shard_slices.append((current_path, start, len(records)))
            current_path, start = path, len(records)
        records.extend(recs)
    if current_path is not None:
        shard_slices.append((current_path, start, len(records)))
    # shards that yielded no batches still get an (empty) slice, in order
    seen = {path for path, _, _ in shard_slices}
    for path in pool_paths:
        if str(path) not in seen:
            shard_slices.append((str(path), len(records), len(records)))

    drift = None
    if full_mode and records:
        drift = drift_diagnostics(records)

    if config.shard_znorm:
        records = _znorm_per_shard(records, shard_slices)

    header = _score_header(config, spec, len(records), P)
    if out_scores is not None:
        write_scores_binary(out_scores, header, records)
    if out_scores_text is not None:
        write_scores_text(out_scores_text, header, records)
    if out_surrogate is not None and surrogate is not None:
        write_surrogate(out_surrogate, surrogate)
    return ScoreRun(records, shard_slices, header, surrogate, drift)


# -------------------------------------------------------------- selection

def run_select(
    score_path: str | Path,
    r: float,
    out_path: str | Path | None = None,
) -> SelectionManifest:
    """Top-n manifest from a persisted score file.

    The drift bound is recomputed from the stored components for full
    CHIPS scores (component fields stay raw even under per-shard
    z-normalized utilities).
    """
    header, records = read_scores_binary(score_path)
    manifest = utility_and_select(records, r, header.config_fingerprint)
    manifest.method = header.method
    if header.method == "chips" and header.ablation == "full" and records:
        manifest.drift_kl_upper = drift_diagnostics(records).kl
    if out_path is not None:
        write_manifest(out_path, manifest)
    return manifest


def run_select_pool(
    config: RunConfig,
    pool_paths: Sequence[str | Path],
    r: float,
    out_path: str | Path | None = None,
) -> SelectionManifest:
    """Score-free selectors: random draw and the concept-based filters."""
    method = config.method
    if method not in SELECTOR_METHODS:
        raise ConfigError(
            f"method {method!r} needs a score file; use run_select"
        )
    ids, tags = _pool_tags(pool_paths)
    if ids.size == 0:
        raise EmptyPool("pool shards hold no samples")
    if method == "random":
        retained = select_random(ids, config.seed, r)
    elif method == "concept-filter":
        survivors = filter_concepts(
            ids, tags, whitelist=config.concept_whitelist,
            vocabulary=config.concept_whitelist + config.concept_overrepresented,
        )
        retained = select_from_survivors(survivors, ids.size, config.seed, r)
    else:  # concept-balance
        survivors = balance_concepts(
            ids, tags, config.seed,
            downsample_rate=config.concept_downsample_rate,
            overrepresented=config.concept_overrepresented,
            vocabulary=config.concept_whitelist + config.concept_overrepresented,
        )
        retained = select_from_survivors(survivors, ids.size, config.seed, r)
    manifest = SelectionManifest(
        retained=np.asarray(retained, dtype=np.uint64),
        retention_ratio=r,
        n=int(retained.size),
        config_fingerprint=config.fingerprint(),
        drift_kl_upper=0.0,
        method=method,
    )
    if out_path is not None:
        write_manifest(out_path, manifest)
    return manifest


# ------------------------------------------------------------------ synth

def run_synth(
    out_dir: str | Path,
    pool_count: int,
    eval_count: int,
    d_v: int = 32,
    d_t: int = 24,
    d: int = 16,
    seed: int = 0,
    shards: int = 1,
    clusters: int = 5,
    target_fraction: float = 0.25,
    tagged: bool = True,
    noise_sigma: float = 0.8,
    train_steps: int = 40,
    train_eta: float = 2.0,
) -> dict[str, list[str] | str]:
    """Clustered synthetic pool + eval shards + endpoint params.

    Cluster 0 is the designated target domain: every eval sample comes
    from it, and the pool mixes it at target_fraction with the remaining
    clusters. Each cluster carries one concept tag — the last cluster an
    overrepresented one, the rest whitelist concepts — so the concept
    selectors are exercisable on synthetic data.

    The emitted checkpoint is pre-trained for train_steps gradient steps
    on the non-target clusters only. That is the continual-pre-training
    setting the scorer presumes: the checkpoint has adapted to its old
    domains while the target domain is still unlearned, so target-cluster
    pool samples carry eval-aligned gradients. (A raw random projection
    instead puts every pool gradient on the same side of the eval
    direction — the temperature coordinate dominates both — which
    degenerates the drift distribution.)
    """
    if pool_count < 0 or eval_count < 0:
        raise ConfigError("sample counts must be >= 0")
    if shards < 1:
        raise ConfigError(f"shards must be >= 1, got {shards}")
    if clusters < 2:
        raise ConfigError(f"need >= 2 clusters, got {clusters}")
    if not 0.0 < target_fraction < 1.0:
        raise ConfigError(
            f"target_fraction must lie in (0, 1), got {target_fraction}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = substream(seed, "synth", "world")

    params = EndpointParams(
        rng.standard_normal((d_v, d)) / np.sqrt(d_v),
        rng.standard_normal((d_t, d)) / np.sqrt(d_t),
        0.3,
    )
    centers_h = rng.standard_normal((clusters, d_v))
    centers_t = rng.standard_normal((clusters, d_t))
    vocab = WHITELIST_CONCEPTS + OVERREPRESENTED_CONCEPTS
    cluster_tags = [
        OVERREPRESENTED_CONCEPTS[0] if c == clusters - 1
        else WHITELIST_CONCEPTS[c % len(WHITELIST_CONCEPTS)]
        for c in range(clusters)
    ]
    assert set(cluster_tags) <= set(vocab)

    probs = np.full(clusters, (1.0 - target_fraction) / (clusters - 1))
    probs[0] = target_fraction

    def sample(count: int, cluster_of: np.ndarray, id0: int) -> list[ShardRecord]:
        noise_h = noise_sigma * rng.standard_normal((count, d_v))
        noise_t = noise_sigma * rng.standard_normal((count, d_t))
        recs = []
        for i in range(count):
            c = int(cluster_of[i])
            recs.append(
                ShardRecord(
                    id0 + i,
                    (centers_h[c] + noise_h[i]).astype(np.float32),
                    (centers_t[c] + noise_t[i]).astype(np.float32),
                    (cluster_tags[c],) if tagged else (),
                )
            )
        return recs

    pool_clusters = rng.choice(clusters, size=pool_count, p=probs)
    pool_records = sample(pool_count, pool_clusters, 0)
    eval_records = sample(eval_count, np.zeros(eval_count, dtype=int), 1_000_000)

    pretrain_records = [
        rec for rec, c in zip(pool_records, pool_clusters) if c != 0
    ]
    if pretrain_records and train_steps:
        batches = [
            FeatureBatch(
                np.array([r.id for r in chunk], dtype=np.uint64),
                np.stack([r.h for r in chunk]).astype(np.float64),
                np.stack([r.t for r in chunk]).astype(np.float64),
            )
            for chunk in (
                pretrain_records[i : i + 128]
                for i in range(0, len(pretrain_records), 128)
            )
        ]
        vec = params_to_vector(params)
        for _ in range(train_steps):
            params = vector_to_params(vec, d_v, d_t, d)
            vec = vec - train_eta * eval_mean_gradient(params, batches, 0.0)
        params = vector_to_params(vec, d_v, d_t, d)

    pool_paths = []
    bounds = np.linspace(0, pool_count, shards + 1).astype(int)
    for s in range(shards):
        path = out / f"pool-{s:03d}.chfs"
        write_shard(path, pool_records[bounds[s] : bounds[s + 1]], d_v, d_t, tagged)
        pool_paths.append(str(path))
    eval_path = out / "eval.chfs"
    write_shard(eval_path, eval_records, d_v, d_t, tagged)
    params_path = out / "params.chep"
    write_params(params_path, params)
    clusters_path = out / "clusters.json"
    clusters_path.write_text(
        json.dumps({str(int(i)): int(c) for i, c in enumerate(pool_clusters)})
        + "\n"
    )
    return {
        "pool": pool_paths,
        "eval": str(eval_path),
        "params": str(params_path),
        "clusters": str(clusters_path),
    }


# ------------------------------------------------------------------ verify

def verify_records(seed: int = 0) -> Iterator[dict]:
    """Every theory check at its acceptance scale, one record per world."""
    for i in range(20):
        world = make_linearized_world(seed + i, aligned_covariance=bool(i % 2))
        rep = verify_correlation_bound(world, samples=10_000, seed=seed + i)
        yield {**rep.record(), "seed": seed + i}
    for i in range(2):
        world = make_population_world(seed + i)
        rep = verify_sketch_error_split(world, seed=seed + i)
        yield {**rep.record(), "seed": seed + i}
    for i in range(8):
        toy = make_toy_encoder(seed + i)
        rep = verify_descent(toy, trials=50, seed=seed + i)
        yield {**rep.record(), "seed": seed + i}
    toy = make_toy_encoder(seed)
    for B in (1, 4, 8):
        rep = verify_batch_moments(toy, B=B, mc_draws=100_000, seed=seed)
        yield {**rep.record(), "seed": seed}
    for i in range(2):
        toy = make_toy_encoder(seed + i, optimizer=AdamConfig())
        rep = verify_adamw_alignment(toy)
        yield {**rep.record(), "seed": seed + i}
    rep = verify_proxy_fidelity(master_seed=seed)
    yield {**rep.record(), "seed": seed}


def run_verify(sink: TextIO, seed: int = 0) -> bool:
    """Emit line-delimited JSON check records; True iff every check passed."""
    all_passed = True
    for rec in verify_records(seed):
        sink.write(json.dumps(rec, sort_keys=True) + "\n")
        all_passed = all_passed and bool(rec["passed"])
    return all_passed
