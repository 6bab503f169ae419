"""On-disk formats and typed configuration.

Four binary formats, all little-endian, features float32 on disk and
float64 in compute:

CHFS feature shard
    magic "CHFS" | version u32 | sample_count u64 | d_v u32 | d_t u32 |
    flags u32 (bit 0: records carry concept tags), then per record:
    id u64 | h d_v*f32 | t d_t*f32 |
    [tag_count u16, then per tag: byte_len u16 + UTF-8].

CHEP endpoint checkpoint
    magic "CHEP" | version u32 | d_v u32 | d_t u32 | d u32 |
    W_v row-major f32 | W_t row-major f32 | tau_log f64.

CHSC score file
    magic "CHSC" | version u32 | count u64 | method str16 | ablation str16 |
    config fingerprint str16 | sketch kind str16, k u32, P u64, seed u64,
    s u32, then per record:
    id u64 | alignment f64 | learnability f64 | relevance f64 |
    utility f64 | batch fingerprint u8 byte length + 8 raw bytes.
    (str16 = u16 byte length + UTF-8.)

CHCV curvature surrogate
    magic "CHCV" | version u32 | dim u64 | alpha f64 | lambda f64 |
    ridge_mode u8 | sketch fingerprint str16 (empty = exact mode) |
    M dim*dim f64 | has_dir u8 | [dir dim*f64 | cg iters u32 | residual f64].
    The surrogate stays float64: it feeds 1e-8-class solve comparisons.

Score files also exist as an equivalent tab-separated text format, and
manifests are plain text; both carry their parameters in '#' header
lines. Readers validate magic and version before touching payload;
truncation reports the byte offset where the file ran out.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .baselines import (
    DEFAULT_DOWNSAMPLE_RATE,
    OVERREPRESENTED_CONCEPTS,
    WHITELIST_CONCEPTS,
)
from .curvature import CurvatureSurrogate
from .endpoint import EndpointParams
from .errors import ConfigError, CorruptShard, FormatError
from .numerics import CgReport, ensure_finite
from .scoring import ScoreRecord, SelectionManifest
from .sketch import SketchSpec

_VERSION = 1

METHODS = (
    "chips",
    "dot",
    "tracin",
    "trak",
    "clipscore",
    "random",
    "concept-filter",
    "concept-balance",
)

ABLATIONS = ("full", "alignment-only", "alignment-margin")

SKETCH_KINDS_CFG = ("countsketch", "sparse-signed", "srht", "none")


# ---------------------------------------------------------------- low level

class _Reader:
    """Sequential binary reader that reports the offset of any truncation."""

    def __init__(self, fh, path: str):
        self.fh = fh
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        buf = self.fh.read(n)
        if len(buf) != n:
            raise CorruptShard(
                f"{self.path}: truncated at byte {self.offset + len(buf)} "
                f"(needed {n} more bytes)"
            )
        self.offset += n
        return buf

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def str16(self) -> str:
        n = self.u16()
        return self.take(n).decode("utf-8")

    def f32_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").copy()

    def f64_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()

    def expect_eof(self):
        tail = self.fh.read(1)
        if tail:
            raise CorruptShard(f"{self.path}: trailing bytes after byte {self.offset}")


def _check_magic(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != _VERSION:
        raise FormatError(f"{r.path}: unsupported version {version}")


def _str16(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ConfigError(f"string field too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


def file_checksum(path: str | Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------- CHFS shards

@dataclass
class ShardRecord:
    id: int
    h: np.ndarray  # float32, (d_v,)
    t: np.ndarray  # float32, (d_t,)
    tags: tuple[str, ...] = ()


@dataclass
class ShardHeader:
    sample_count: int
    d_v: int
    d_t: int
    has_tags: bool


def write_shard(
    path: str | Path,
    records: Iterable[ShardRecord],
    d_v: int,
    d_t: int,
    tagged: bool,
) -> ShardHeader:
    recs = list(records)
    for rec in recs:
        if rec.h.shape != (d_v,) or rec.t.shape != (d_t,):
            raise ConfigError(
                f"record {rec.id}: feature shapes {rec.h.shape}/{rec.t.shape} "
                f"do not match shard dims ({d_v},)/({d_t},)"
            )
        ensure_finite(rec.h, f"record {rec.id} image features")
        ensure_finite(rec.t, f"record {rec.id} text features")
    flags = 1 if tagged else 0
    with open(path, "wb") as fh:
        fh.write(b"CHFS")
        fh.write(struct.pack("<IQIII", _VERSION, len(recs), d_v, d_t, flags))
        for rec in recs:
            fh.write(struct.pack("<Q", rec.id))
            fh.write(np.asarray(rec.h, dtype="<f4").tobytes())
            fh.write(np.asarray(rec.t, dtype="<f4").tobytes())
            if tagged:
                fh.write(struct.pack("<H", len(rec.tags)))
                for tag in rec.tags:
                    fh.write(_str16(tag))
    return ShardHeader(len(recs), d_v, d_t, tagged)


def read_shard_header(path: str | Path) -> ShardHeader:
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, b"CHFS")
        count = r.u64()
        d_v = r.u32()
        d_t = r.u32()
        flags = r.u32()
    return ShardHeader(count, d_v, d_t, bool(flags & 1))


def read_shard(path: str | Path) -> Iterator[ShardRecord]:
    """Stream records without loading the whole shard."""
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, b"CHFS")
        count = r.u64()
        d_v = r.u32()
        d_t = r.u32()
        flags = r.u32()
        tagged = bool(flags & 1)
        for _ in range(count):
            rid = r.u64()
            h = r.f32_array(d_v)
            t = r.f32_array(d_t)
            tags: tuple[str, ...] = ()
            if tagged:
                n_tags = r.u16()
                tags = tuple(r.str16() for _ in range(n_tags))
            yield ShardRecord(rid, h, t, tags)
        r.expect_eof()


# -------------------------------------------------------- CHEP checkpoints

def write_params(path: str | Path, params: EndpointParams) -> None:
    with open(path, "wb") as fh:
        fh.write(b"CHEP")
        fh.write(
            struct.pack("<IIII", _VERSION, params.d_v, params.d_t, params.d)
        )
        fh.write(np.asarray(params.W_v, dtype="<f4").tobytes())
        fh.write(np.asarray(params.W_t, dtype="<f4").tobytes())
        fh.write(struct.pack("<d", params.tau_log))


def read_params(path: str | Path) -> EndpointParams:
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, b"CHEP")
        d_v = r.u32()
        d_t = r.u32()
        d = r.u32()
        W_v = r.f32_array(d_v * d).reshape(d_v, d)
        W_t = r.f32_array(d_t * d).reshape(d_t, d)
        tau_log = r.f64()
        r.expect_eof()
    return EndpointParams(W_v.astype(np.float64), W_t.astype(np.float64), tau_log)


class CheckpointStore:
    """Append-only trajectory of (params, learning rate) under one directory.

    Files are %05d.chep plus a text index 'trajectory.tsv' holding one
    'index<TAB>eta' line per checkpoint, in insertion order.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "trajectory.tsv"

    def _index(self) -> list[float]:
        if not self.index_path.exists():
            return []
        etas = []
        for line in self.index_path.read_text().splitlines():
            if not line.strip():
                continue
            idx_s, eta_s = line.split("\t")
            if int(idx_s) != len(etas):
                raise CorruptShard(f"{self.index_path}: indices out of order")
            etas.append(float(eta_s))
        return etas

    def __len__(self) -> int:
        return len(self._index())

    def put(self, params: EndpointParams, eta: float) -> int:
        if not eta > 0:
            raise ConfigError(f"learning rate must be > 0, got {eta}")
        idx = len(self)
        write_params(self.root / f"{idx:05d}.chep", params)
        with open(self.index_path, "a") as fh:
            fh.write(f"{idx}\t{eta!r}\n")
        return idx

    def get(self, t: int) -> tuple[EndpointParams, float]:
        etas = self._index()
        if not 0 <= t < len(etas):
            raise ConfigError(f"checkpoint index {t} out of range [0, {len(etas)})")
        return read_params(self.root / f"{t:05d}.chep"), etas[t]

    def __iter__(self) -> Iterator[tuple[EndpointParams, float]]:
        for t in range(len(self)):
            yield self.get(t)


# ------------------------------------------------------------- CHSC scores

_SCORE_STRUCT = struct.Struct("<QddddB8s")


@dataclass
class ScoreFileHeader:
    count: int
    method: str
    ablation: str
    config_fingerprint: str
    sketch_kind: str  # "none" in exact mode
    sketch_k: int
    sketch_input_dim: int
    sketch_seed: int
    sketch_s: int

    def sketch_spec(self) -> SketchSpec | None:
        if self.sketch_kind == "none":
            return None
        return SketchSpec(
            self.sketch_kind,
            self.sketch_k,
            self.sketch_input_dim,
            self.sketch_seed,
            self.sketch_s,
        )


def _fp_bytes(fingerprint: str) -> tuple[int, bytes]:
    raw = bytes.fromhex(fingerprint) if fingerprint else b""
    if len(raw) > 8:
        raise ConfigError(f"batch fingerprint {fingerprint!r} longer than 8 bytes")
    return len(raw), raw.ljust(8, b"\x00")


def write_scores_binary(
    path: str | Path, header: ScoreFileHeader, records: Sequence[ScoreRecord]
) -> None:
    if header.count != len(records):
        raise ConfigError(
            f"header count {header.count} != record count {len(records)}"
        )
    with open(path, "wb") as fh:
        fh.write(b"CHSC")
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", header.count))
        fh.write(_str16(header.method))
        fh.write(_str16(header.ablation))
        fh.write(_str16(header.config_fingerprint))
        fh.write(_str16(header.sketch_kind))
        fh.write(
            struct.pack(
                "<IQQI",
                header.sketch_k,
                header.sketch_input_dim,
                header.sketch_seed,
                header.sketch_s,
            )
        )
        for rec in records:
            fp_len, fp_raw = _fp_bytes(rec.batch_fingerprint)
            fh.write(
                _SCORE_STRUCT.pack(
                    rec.id,
                    rec.alignment,
                    rec.learnability,
                    rec.relevance,
                    rec.utility,
                    fp_len,
                    fp_raw,
                )
            )


def read_scores_binary(path: str | Path) -> tuple[ScoreFileHeader, list[ScoreRecord]]:
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, b"CHSC")
        count = r.u64()
        header = ScoreFileHeader(
            count=count,
            method=r.str16(),
            ablation=r.str16(),
            config_fingerprint=r.str16(),
            sketch_kind=r.str16(),
            sketch_k=r.u32(),
            sketch_input_dim=r.u64(),
            sketch_seed=r.u64(),
            sketch_s=r.u32(),
        )
        records = []
        for _ in range(count):
            rid, a, l, w, u, fp_len, fp_raw = _SCORE_STRUCT.unpack(
                r.take(_SCORE_STRUCT.size)
            )
            records.append(ScoreRecord(rid, a, l, w, u, fp_raw[:fp_len].hex()))
        r.expect_eof()
    return header, records


def write_scores_text(
    path: str | Path, header: ScoreFileHeader, records: Sequence[ScoreRecord]
) -> None:
    lines = [
        "# chips-scores v1",
        f"# method={header.method} ablation={header.ablation} "
        f"config={header.config_fingerprint}",
        f"# sketch={header.sketch_kind} k={header.sketch_k} "
        f"P={header.sketch_input_dim} seed={header.sketch_seed} s={header.sketch_s}",
        "# id\talignment\tlearnability\trelevance\tutility\tbatch_fp",
    ]
    for rec in records:
        lines.append(
            f"{rec.id}\t{rec.alignment!r}\t{rec.learnability!r}"
            f"\t{rec.relevance!r}\t{rec.utility!r}\t{rec.batch_fingerprint}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores_text(path: str | Path) -> list[ScoreRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        rid, a, l, w, u, fp = line.split("\t")
        records.append(
            ScoreRecord(int(rid), float(a), float(l), float(w), float(u), fp)
        )
    return records


# ---------------------------------------------------------- CHCV surrogate

def write_surrogate(path: str | Path, surr: CurvatureSurrogate) -> None:
    dim = surr.dim
    with open(path, "wb") as fh:
        fh.write(b"CHCV")
        fh.write(struct.pack("<IQdd", _VERSION, dim, surr.alpha, surr.lambda_ridge))
        fh.write(struct.pack("<B", 0 if surr.ridge_mode == "identity" else 1))
        fh.write(_str16(surr.fingerprint or ""))
        fh.write(np.asarray(surr.M, dtype="<f8").tobytes())
        if surr.precond_dir is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(np.asarray(surr.precond_dir, dtype="<f8").tobytes())
            report = surr.cg_report
            fh.write(
                struct.pack(
                    "<Id",
                    report.iterations if report else 0,
                    report.residual if report else float("nan"),
                )
            )


def read_surrogate(path: str | Path) -> CurvatureSurrogate:
    with open(path, "rb") as fh:
        r = _Reader(fh, str(path))
        _check_magic(r, b"CHCV")
        dim = r.u64()
        alpha = r.f64()
        lam = r.f64()
        ridge_mode = "identity" if r.u8() == 0 else "gram"
        fingerprint = r.str16() or None
        M = r.f64_array(dim * dim).reshape(dim, dim)
        surr = CurvatureSurrogate(
            alpha=alpha,
            lambda_ridge=lam,
            M=M,
            ridge_mode=ridge_mode,
            fingerprint=fingerprint,
        )
        if r.u8():
            surr.precond_dir = r.f64_array(dim)
            iters = r.u32()
            residual = r.f64()
            surr.cg_report = CgReport(iters, residual, True)
        r.expect_eof()
    return surr


# --------------------------------------------------------------- manifests

def write_manifest(path: str | Path, manifest: SelectionManifest) -> None:
    lines = [
        "# chips-manifest v1",
        f"# method={manifest.method} r={manifest.retention_ratio!r} "
        f"n={manifest.n} config={manifest.config_fingerprint} "
        f"drift_kl_upper={manifest.drift_kl_upper!r}",
    ]
    lines.extend(str(int(i)) for i in manifest.retained)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> SelectionManifest:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "# chips-manifest v1":
        raise FormatError(f"{path}: not a manifest file")
    meta = {}
    ids = []
    for line in lines[1:]:
        if line.startswith("# "):
            for part in line[2:].split():
                key, _, val = part.partition("=")
                meta[key] = val
        elif line.strip():
            ids.append(int(line))
    manifest = SelectionManifest(
        retained=np.array(ids, dtype=np.uint64),
        retention_ratio=float(meta["r"]),
        n=int(meta["n"]),
        config_fingerprint=meta["config"],
        drift_kl_upper=float(meta["drift_kl_upper"]),
        method=meta["method"],
    )
    if manifest.n != len(ids):
        raise CorruptShard(f"{path}: header says n={manifest.n}, found {len(ids)} ids")
    return manifest


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    method: str = "chips"
    ablation: str = "full"
    alpha: float = 0.6
    beta: float = 0.5
    lambda_ridge: float | None = None  # None: trace-scaled default
    lambda_trak: float | None = None
    sketch_kind: str = "countsketch"
    sketch_k: int = 4096
    sketch_s: int = 4
    cg_iters: int = 5
    cg_tol: float = 1e-10
    jacobi_precondition: bool = False
    identity_preconditioner: bool = False
    scoring_batch_size: int = 256
    eval_batch_size: int = 256
    eval_ema_decay: float = 0.0
    moment_ema_decay: float = 0.0
    eval_samples_per_task: int = 200
    retention: float = 0.1
    retention_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.5)
    seed: int = 0
    workers: int = 1
    tracin_epochs: int = 10
    shard_znorm: bool = False
    concept_whitelist: tuple[str, ...] = WHITELIST_CONCEPTS
    concept_overrepresented: tuple[str, ...] = OVERREPRESENTED_CONCEPTS
    concept_downsample_rate: float = DEFAULT_DOWNSAMPLE_RATE

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"config key {key!r} {why}")

        if self.method not in METHODS:
            bad("method", f"must be one of {METHODS}, got {self.method!r}")
        if self.ablation not in ABLATIONS:
            bad("ablation", f"must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0.0 <= self.alpha <= 1.0:
            bad("alpha", f"must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            bad("beta", f"must lie in [0, 1], got {self.beta}")
        for key in ("lambda_ridge", "lambda_trak"):
            val = getattr(self, key)
            if val is not None and not val > 0.0:
                bad(key, f"must be > 0 when given, got {val}")
        if self.sketch_kind not in SKETCH_KINDS_CFG:
            bad("sketch_kind", f"must be one of {SKETCH_KINDS_CFG}, got {self.sketch_kind!r}")
        if self.sketch_k < 1:
            bad("sketch_k", f"must be >= 1, got {self.sketch_k}")
        if self.sketch_s < 1:
            bad("sketch_s", f"must be >= 1, got {self.sketch_s}")
        if self.cg_iters < 1:
            bad("cg_iters", f"must be >= 1, got {self.cg_iters}")
        if not self.cg_tol > 0.0:
            bad("cg_tol", f"must be > 0, got {self.cg_tol}")
        if self.scoring_batch_size < 2:
            bad("scoring_batch_size", f"must be >= 2, got {self.scoring_batch_size}")
        if self.eval_batch_size < 1:
            bad("eval_batch_size", f"must be >= 1, got {self.eval_batch_size}")
        for key in ("eval_ema_decay", "moment_ema_decay"):
            val = getattr(self, key)
            if not 0.0 <= val < 1.0:
                bad(key, f"must lie in [0, 1), got {val}")
        if self.eval_samples_per_task < 1:
            bad("eval_samples_per_task", f"must be >= 1, got {self.eval_samples_per_task}")
        if not 0.0 < self.retention <= 1.0:
            bad("retention", f"must lie in (0, 1], got {self.retention}")
        self.retention_grid = tuple(float(r) for r in self.retention_grid)
        for r in self.retention_grid:
            if not 0.0 < r <= 1.0:
                bad("retention_grid", f"entries must lie in (0, 1], got {r}")
        if not 0 <= self.seed < 2**64:
            bad("seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        if self.workers < 1:
            bad("workers", f"must be >= 1, got {self.workers}")
        if self.tracin_epochs < 1:
            bad("tracin_epochs", f"must be >= 1, got {self.tracin_epochs}")
        if not 0.0 <= self.concept_downsample_rate <= 1.0:
            bad(
                "concept_downsample_rate",
                f"must lie in [0, 1], got {self.concept_downsample_rate}",
            )
        self.concept_whitelist = tuple(str(s) for s in self.concept_whitelist)
        self.concept_overrepresented = tuple(str(s) for s in self.concept_overrepresented)

    def replace(self, **updates) -> "RunConfig":
        return replace(self, **updates)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out

    def fingerprint(self) -> str:
        # workers is execution infrastructure: outputs are byte-identical
        # across worker counts, so it cannot enter the run identity
        canon_dict = {k: v for k, v in self.to_dict().items() if k != "workers"}
        canon = json.dumps(canon_dict, sort_keys=True, separators=(",", ":"))
        return hashlib.blake2b(canon.encode(), digest_size=8).hexdigest()

    def sketch_spec(self, input_dim: int) -> SketchSpec | None:
        if self.sketch_kind == "none":
            return None
        k = min(self.sketch_k, input_dim)  # small toy subspaces cap k at P
        return SketchSpec(self.sketch_kind, k, input_dim, self.seed, self.sketch_s)


def config_from_dict(raw: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    return RunConfig(**raw)


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: config is not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)
