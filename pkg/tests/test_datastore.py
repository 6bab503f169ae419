"""Format tests: golden bytes first, then round-trips and failure modes."""

import json
import struct

import numpy as np
import pytest

from chips.curvature import CurvatureSurrogate
from chips.datastore import (
    OVERREPRESENTED_CONCEPTS,
    WHITELIST_CONCEPTS,
    CheckpointStore,
    RunConfig,
    ScoreFileHeader,
    ShardRecord,
    config_from_dict,
    file_checksum,
    load_config,
    read_manifest,
    read_params,
    read_scores_binary,
    read_scores_text,
    read_shard,
    read_shard_header,
    read_surrogate,
    write_manifest,
    write_params,
    write_scores_binary,
    write_scores_text,
    write_shard,
    write_surrogate,
)
from chips.endpoint import EndpointParams
from chips.errors import ConfigError, CorruptShard, FormatError, NumericalBreakdown
from chips.scoring import ScoreRecord, SelectionManifest


def small_params() -> EndpointParams:
    # values chosen exactly representable in float32
    return EndpointParams(
        W_v=np.array([[1.0], [2.0]]),
        W_t=np.array([[3.0], [4.0]]),
        tau_log=0.25,
    )


def sample_records(n=5, d_v=3, d_t=2, seed=0, tagged=True):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        tags = ("Maps", "Tables") if (tagged and i % 2 == 0) else ()
        out.append(
            ShardRecord(
                id=100 + i,
                h=rng.normal(size=d_v).astype(np.float32),
                t=rng.normal(size=d_t).astype(np.float32),
                tags=tags,
            )
        )
    return out


# ------------------------------------------------------------ CHFS golden

def test_shard_golden_bytes(tmp_path):
    # one tagged record, assembled by hand from the documented layout
    expected = b"CHFS"
    expected += struct.pack("<I", 1)                       # version
    expected += struct.pack("<Q", 1)                       # sample count
    expected += struct.pack("<III", 2, 3, 1)               # d_v, d_t, flags
    expected += struct.pack("<Q", 7)                       # id
    expected += struct.pack("<ff", 1.0, 2.0)               # h
    expected += struct.pack("<fff", 0.5, -1.0, 3.0)        # t
    expected += struct.pack("<H", 1)                       # tag count
    expected += struct.pack("<H", 4) + b"Maps"             # tag

    rec = ShardRecord(
        id=7,
        h=np.array([1.0, 2.0], dtype=np.float32),
        t=np.array([0.5, -1.0, 3.0], dtype=np.float32),
        tags=("Maps",),
    )
    path = tmp_path / "one.chfs"
    write_shard(path, [rec], d_v=2, d_t=3, tagged=True)
    assert path.read_bytes() == expected

    got = list(read_shard(path))
    assert len(got) == 1
    assert got[0].id == 7
    assert got[0].tags == ("Maps",)
    np.testing.assert_array_equal(got[0].h, rec.h)
    np.testing.assert_array_equal(got[0].t, rec.t)


def test_shard_roundtrip_tagged(tmp_path):
    recs = sample_records(n=9, tagged=True)
    path = tmp_path / "pool.chfs"
    write_shard(path, recs, d_v=3, d_t=2, tagged=True)
    header = read_shard_header(path)
    assert (header.sample_count, header.d_v, header.d_t) == (9, 3, 2)
    assert header.has_tags
    got = list(read_shard(path))
    assert [r.id for r in got] == [r.id for r in recs]
    for a, b in zip(got, recs):
        np.testing.assert_array_equal(a.h, b.h)
        np.testing.assert_array_equal(a.t, b.t)
        assert a.tags == b.tags


def test_shard_roundtrip_untagged(tmp_path):
    recs = sample_records(n=4, tagged=False)
    path = tmp_path / "pool.chfs"
    write_shard(path, recs, d_v=3, d_t=2, tagged=False)
    assert not read_shard_header(path).has_tags
    got = list(read_shard(path))
    assert all(r.tags == () for r in got)
    assert [r.id for r in got] == [r.id for r in recs]


def test_shard_empty_roundtrip(tmp_path):
    path = tmp_path / "empty.chfs"
    write_shard(path, [], d_v=8, d_t=8, tagged=False)
    assert read_shard_header(path).sample_count == 0
    assert list(read_shard(path)) == []


def test_shard_bad_magic(tmp_path):
    path = tmp_path / "bad.chfs"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        list(read_shard(path))


def test_shard_bad_version(tmp_path):
    path = tmp_path / "bad.chfs"
    path.write_bytes(b"CHFS" + struct.pack("<I", 99) + b"\x00" * 24)
    with pytest.raises(FormatError, match="version 99"):
        list(read_shard(path))


def test_shard_truncation_reports_offset(tmp_path):
    path = tmp_path / "pool.chfs"
    write_shard(path, sample_records(n=3), d_v=3, d_t=2, tagged=True)
    blob = path.read_bytes()
    for cut in (2, 10, 30, len(blob) - 1):
        clipped = tmp_path / f"cut{cut}.chfs"
        clipped.write_bytes(blob[:cut])
        with pytest.raises((CorruptShard, FormatError), match="byte|magic") as err:
            list(read_shard(clipped))
        if cut > 8:  # magic+version intact: must be CorruptShard with offset
            assert isinstance(err.value, CorruptShard)
            assert "byte" in str(err.value)


def test_shard_trailing_bytes(tmp_path):
    path = tmp_path / "pool.chfs"
    write_shard(path, sample_records(n=2), d_v=3, d_t=2, tagged=True)
    path.write_bytes(path.read_bytes() + b"\x99")
    with pytest.raises(CorruptShard, match="trailing"):
        list(read_shard(path))


def test_shard_rejects_nonfinite(tmp_path):
    rec = sample_records(n=1)[0]
    rec.h[1] = np.nan
    with pytest.raises(NumericalBreakdown):
        write_shard(tmp_path / "bad.chfs", [rec], d_v=3, d_t=2, tagged=True)


def test_shard_rejects_wrong_dims(tmp_path):
    rec = sample_records(n=1)[0]
    with pytest.raises(ConfigError, match="record 100"):
        write_shard(tmp_path / "bad.chfs", [rec], d_v=4, d_t=2, tagged=True)


def test_shard_reader_streams(tmp_path):
    path = tmp_path / "pool.chfs"
    write_shard(path, sample_records(n=50), d_v=3, d_t=2, tagged=True)
    it = read_shard(path)
    first = next(it)
    assert first.id == 100
    it.close()  # abandoning mid-stream closes the file cleanly


# ------------------------------------------------------------ CHEP golden

def test_params_golden_bytes(tmp_path):
    expected = b"CHEP"
    expected += struct.pack("<IIII", 1, 2, 2, 1)
    expected += struct.pack("<ff", 1.0, 2.0)   # W_v rows
    expected += struct.pack("<ff", 3.0, 4.0)   # W_t rows
    expected += struct.pack("<d", 0.25)
    path = tmp_path / "ref.chep"
    write_params(path, small_params())
    assert path.read_bytes() == expected


def test_params_roundtrip_byte_identical(tmp_path):
    p1 = tmp_path / "a.chep"
    p2 = tmp_path / "b.chep"
    write_params(p1, small_params())
    write_params(p2, read_params(p1))
    assert p1.read_bytes() == p2.read_bytes()
    got = read_params(p1)
    np.testing.assert_array_equal(got.W_v, small_params().W_v)
    assert got.tau_log == 0.25


def test_params_roundtrip_quantizes_to_float32(tmp_path):
    rng = np.random.default_rng(3)
    params = EndpointParams(
        W_v=rng.normal(size=(4, 3)),
        W_t=rng.normal(size=(5, 3)),
        tau_log=float(np.log(55.5)),
    )
    path = tmp_path / "q.chep"
    write_params(path, params)
    got = read_params(path)
    np.testing.assert_array_equal(got.W_v, params.W_v.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(got.W_t, params.W_t.astype(np.float32).astype(np.float64))
    assert got.tau_log == params.tau_log  # tau_log stays float64


def test_params_truncation(tmp_path):
    path = tmp_path / "ref.chep"
    write_params(path, small_params())
    blob = path.read_bytes()
    (tmp_path / "cut.chep").write_bytes(blob[:-4])
    with pytest.raises(CorruptShard, match="byte"):
        read_params(tmp_path / "cut.chep")


# -------------------------------------------------------- checkpoint store

def test_checkpoint_store_roundtrip(tmp_path):
    store = CheckpointStore(tmp_path / "traj")
    rng = np.random.default_rng(5)
    etas = [0.1, 0.05, 0.025]
    saved = []
    for eta in etas:
        params = EndpointParams(
            rng.normal(size=(3, 2)).astype(np.float32).astype(np.float64),
            rng.normal(size=(4, 2)).astype(np.float32).astype(np.float64),
            float(rng.normal()),
        )
        saved.append(params)
        store.put(params, eta)
    assert len(store) == 3
    for t, (params, eta) in enumerate(store):
        assert eta == etas[t]
        np.testing.assert_array_equal(params.W_v, saved[t].W_v)
        np.testing.assert_array_equal(params.W_t, saved[t].W_t)
        assert params.tau_log == saved[t].tau_log


def test_checkpoint_store_append_after_reopen(tmp_path):
    store = CheckpointStore(tmp_path / "traj")
    store.put(small_params(), 0.1)
    again = CheckpointStore(tmp_path / "traj")
    assert len(again) == 1
    idx = again.put(small_params(), 0.2)
    assert idx == 1
    assert again.get(1)[1] == 0.2


def test_checkpoint_store_errors(tmp_path):
    store = CheckpointStore(tmp_path / "traj")
    with pytest.raises(ConfigError, match="learning rate"):
        store.put(small_params(), 0.0)
    store.put(small_params(), 0.1)
    with pytest.raises(ConfigError, match="out of range"):
        store.get(1)
    with pytest.raises(ConfigError, match="out of range"):
        store.get(-1)


# ------------------------------------------------------------- CHSC scores

def score_fixture():
    rng = np.random.default_rng(11)
    records = []
    for i in range(6):
        a = float(rng.normal())
        l = float(rng.uniform(0, 2))
        w = float(rng.uniform(0.27, 0.73))
        records.append(ScoreRecord(i * 3, a, l, w, a * l * w, f"{rng.integers(2**63):016x}"))
    # leading-zero fingerprint must survive the round trip
    records[0].batch_fingerprint = "00" + records[0].batch_fingerprint[2:]
    header = ScoreFileHeader(
        count=len(records),
        method="chips",
        ablation="full",
        config_fingerprint="aabbccdd00112233",
        sketch_kind="countsketch",
        sketch_k=64,
        sketch_input_dim=1000,
        sketch_seed=9,
        sketch_s=4,
    )
    return header, records


def test_scores_binary_roundtrip(tmp_path):
    header, records = score_fixture()
    path = tmp_path / "scores.chsc"
    write_scores_binary(path, header, records)
    got_header, got = read_scores_binary(path)
    assert got_header == header
    assert got == records
    spec = got_header.sketch_spec()
    assert spec is not None and (spec.kind, spec.k, spec.input_dim) == (
        "countsketch", 64, 1000,
    )


def test_scores_text_roundtrip(tmp_path):
    header, records = score_fixture()
    path = tmp_path / "scores.tsv"
    write_scores_text(path, header, records)
    assert read_scores_text(path) == records


def test_scores_binary_truncation(tmp_path):
    header, records = score_fixture()
    path = tmp_path / "scores.chsc"
    write_scores_binary(path, header, records)
    (tmp_path / "cut.chsc").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CorruptShard, match="byte"):
        read_scores_binary(tmp_path / "cut.chsc")


def test_scores_count_mismatch_rejected(tmp_path):
    header, records = score_fixture()
    header.count = 99
    with pytest.raises(ConfigError, match="count"):
        write_scores_binary(tmp_path / "x.chsc", header, records)


def test_scores_exact_mode_header(tmp_path):
    header, records = score_fixture()
    header.sketch_kind = "none"
    path = tmp_path / "scores.chsc"
    write_scores_binary(path, header, records)
    got_header, _ = read_scores_binary(path)
    assert got_header.sketch_spec() is None


# ---------------------------------------------------------- CHCV surrogate

def test_surrogate_roundtrip(tmp_path):
    rng = np.random.default_rng(21)
    A = rng.normal(size=(6, 6))
    surr = CurvatureSurrogate(
        alpha=0.6,
        lambda_ridge=1e-3,
        M=A @ A.T + 1e-3 * np.eye(6),
        ridge_mode="identity",
        fingerprint="0123456789abcdef",
    )
    path = tmp_path / "surr.chcv"
    write_surrogate(path, surr)
    got = read_surrogate(path)
    assert (got.alpha, got.lambda_ridge, got.ridge_mode) == (0.6, 1e-3, "identity")
    assert got.fingerprint == "0123456789abcdef"
    np.testing.assert_array_equal(got.M, surr.M)  # float64: no quantization
    assert got.precond_dir is None


def test_surrogate_roundtrip_with_direction(tmp_path):
    from chips.curvature import solve_direction

    rng = np.random.default_rng(22)
    A = rng.normal(size=(5, 5))
    surr = CurvatureSurrogate(
        alpha=0.0, lambda_ridge=0.5, M=A @ A.T + 0.5 * np.eye(5)
    )
    u = rng.normal(size=5)
    solve_direction(surr, u, iters=20, tol=1e-12)
    path = tmp_path / "surr.chcv"
    write_surrogate(path, surr)
    got = read_surrogate(path)
    np.testing.assert_array_equal(got.precond_dir, surr.precond_dir)
    assert got.cg_report.iterations == surr.cg_report.iterations
    assert got.cg_report.residual == surr.cg_report.residual
    assert got.fingerprint is None


# --------------------------------------------------------------- manifests

def test_manifest_roundtrip(tmp_path):
    manifest = SelectionManifest(
        retained=np.array([9, 2, 5], dtype=np.uint64),
        retention_ratio=0.3,
        n=3,
        config_fingerprint="deadbeef00000001",
        drift_kl_upper=0.0123,
        method="chips",
    )
    path = tmp_path / "sel.manifest"
    write_manifest(path, manifest)
    got = read_manifest(path)
    np.testing.assert_array_equal(got.retained, manifest.retained)
    assert got.retention_ratio == 0.3
    assert got.n == 3
    assert got.config_fingerprint == "deadbeef00000001"
    assert got.drift_kl_upper == 0.0123
    assert got.method == "chips"


def test_manifest_count_mismatch(tmp_path):
    path = tmp_path / "sel.manifest"
    write_manifest(
        path,
        SelectionManifest(np.array([1, 2], dtype=np.uint64), 0.5, 2, "ff", 0.0),
    )
    text = path.read_text().replace("n=2", "n=3")
    path.write_text(text)
    with pytest.raises(CorruptShard, match="n=3"):
        read_manifest(path)


def test_manifest_wrong_file(tmp_path):
    path = tmp_path / "x.manifest"
    path.write_text("id,score\n1,0.5\n")
    with pytest.raises(FormatError):
        read_manifest(path)


# ------------------------------------------------------------------ config

def test_config_defaults():
    cfg = RunConfig()
    assert cfg.method == "chips"
    assert cfg.alpha == 0.6
    assert cfg.beta == 0.5
    assert cfg.sketch_kind == "countsketch"
    assert cfg.sketch_k == 4096
    assert cfg.sketch_s == 4
    assert cfg.cg_iters == 5
    assert cfg.cg_tol == 1e-10
    assert cfg.scoring_batch_size == 256
    assert cfg.retention == 0.1
    assert cfg.retention_grid == (0.1, 0.2, 0.3, 0.5)
    assert cfg.tracin_epochs == 10
    assert cfg.concept_whitelist == WHITELIST_CONCEPTS
    assert cfg.concept_overrepresented == OVERREPRESENTED_CONCEPTS
    assert cfg.concept_downsample_rate == 0.25
    assert cfg.lambda_ridge is None


def test_config_unknown_key_named():
    with pytest.raises(ConfigError, match="alpa"):
        config_from_dict({"alpa": 0.5})


def test_config_bad_values_name_key():
    cases = [
        ({"alpha": 1.5}, "alpha"),
        ({"beta": -0.1}, "beta"),
        ({"method": "magic"}, "method"),
        ({"ablation": "none"}, "ablation"),
        ({"sketch_kind": "gaussian"}, "sketch_kind"),
        ({"sketch_k": 0}, "sketch_k"),
        ({"cg_iters": 0}, "cg_iters"),
        ({"cg_tol": 0.0}, "cg_tol"),
        ({"scoring_batch_size": 1}, "scoring_batch_size"),
        ({"eval_ema_decay": 1.0}, "eval_ema_decay"),
        ({"retention": 0.0}, "retention"),
        ({"retention_grid": [0.5, 1.5]}, "retention_grid"),
        ({"workers": 0}, "workers"),
        ({"lambda_ridge": -1.0}, "lambda_ridge"),
        ({"concept_downsample_rate": 1.5}, "concept_downsample_rate"),
    ]
    for raw, key in cases:
        with pytest.raises(ConfigError, match=key):
            config_from_dict(raw)


def test_config_fingerprint_order_independent():
    a = config_from_dict({"alpha": 0.3, "seed": 7})
    b = config_from_dict({"seed": 7, "alpha": 0.3})
    assert a.fingerprint() == b.fingerprint()
    c = config_from_dict({"alpha": 0.3, "seed": 8})
    assert c.fingerprint() != a.fingerprint()
    # fingerprint covers defaults, so it is stable across equal configs
    assert RunConfig().fingerprint() == RunConfig().fingerprint()
    # worker count is execution infrastructure, not run identity
    assert a.replace(workers=4).fingerprint() == a.fingerprint()


def test_config_json_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"alpha": 0.25, "method": "trak", "seed": 12}))
    cfg = load_config(path)
    assert (cfg.alpha, cfg.method, cfg.seed) == (0.25, "trak", 12)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(arr)


def test_config_sketch_spec_caps_k():
    cfg = RunConfig(sketch_k=4096)
    spec = cfg.sketch_spec(input_dim=200)
    assert spec.k == 200  # k never exceeds the subspace dimension
    spec_big = cfg.sketch_spec(input_dim=10**6)
    assert spec_big.k == 4096
    assert RunConfig(sketch_kind="none").sketch_spec(100) is None


def test_config_replace_revalidates():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="alpha"):
        cfg.replace(alpha=2.0)
    assert cfg.replace(alpha=0.0).alpha == 0.0


# ---------------------------------------------------------------- checksum

def test_file_checksum(tmp_path):
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    a.write_bytes(b"\x00" * 4096 + b"payload")
    b.write_bytes(b"\x00" * 4096 + b"payload")
    assert file_checksum(a) == file_checksum(b)
    b.write_bytes(b"\x00" * 4096 + b"payloae")
    assert file_checksum(a) != file_checksum(b)
