import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import reference_fnv1a
from rtvsearch.errors import SnapshotFormatError
from rtvsearch.features import FeatureStore, SyntheticProvider, fnv1a_64, splitmix64, synthetic_extract


def test_fnv_known_values():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


@given(st.binary(max_size=64))
def test_fnv_matches_reference(data):
    assert fnv1a_64(data) == reference_fnv1a(data)


def test_splitmix_reference_sequence():
    # first outputs of SplitMix64 seeded with 0
    assert [int(x) for x in splitmix64(0, 3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_synthetic_deterministic_and_normalized():
    a = synthetic_extract("http://img/1.jpg", 128, 7)
    b = synthetic_extract("http://img/1.jpg", 128, 7)
    assert a.dtype == np.float32 and a.shape == (128,)
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a.astype(np.float64)) - 1) < 1e-6
    assert synthetic_extract("http://img/1.jpg", 128, 8).tobytes() != a.tobytes()


def test_synthetic_uniform_range():
    v = synthetic_extract("u", 1, 0)
    assert abs(abs(float(v[0])) - 1) < 1e-7


def test_synthetic_no_collisions():
    vs = {synthetic_extract(f"http://img/{i}.jpg", 32, 0).tobytes() for i in range(10_000)}
    assert len(vs) == 10_000


def test_get_or_extract_counts():
    s = FeatureStore(16)
    p = SyntheticProvider(16)
    f1, hit1 = s.get_or_extract("u1", p)
    assert (hit1, s.total_extractions) == (False, 1)
    f2, hit2 = s.get_or_extract("u1", p)
    assert (hit2, s.total_extractions, s.cache_hits) == (True, 1, 1)
    assert f1.tobytes() == f2.tobytes()


def test_distinct_count_oracle():
    s = FeatureStore(8)
    p = SyntheticProvider(8)
    urls = [f"x{i}" for i in np.random.default_rng(1).integers(0, 100, 1000)]
    for u in urls:
        s.get_or_extract(u, p)
    assert s.total_extractions == len(set(urls))
    assert s.cache_hits == 1000 - len(set(urls))


def test_provider_failure_stores_nothing():
    s = FeatureStore(4)

    def broken(url):
        raise RuntimeError("model down")

    with pytest.raises(RuntimeError):
        s.get_or_extract("u", broken)
    assert "u" not in s and s.total_extractions == 0
    with pytest.raises(ValueError):
        s.get_or_extract("", SyntheticProvider(4))


def test_concurrent_same_url_stores_one_result():
    s = FeatureStore(8)
    calls = []
    gate = threading.Barrier(8)

    def slow(url):
        calls.append(url)
        return synthetic_extract(url, 8)

    results = []

    def worker():
        gate.wait()
        results.append(s.get_or_extract("same", slow)[0].tobytes())

    ts = [threading.Thread(target=worker) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert len(s) == 1 and len(set(results)) == 1


def test_store_is_function_of_url_set():
    p = SyntheticProvider(8, seed=3)
    a, b = FeatureStore(8, clock=lambda: 0), FeatureStore(8, clock=lambda: 0)
    urls = [f"u{i}" for i in range(50)]
    for u in urls:
        a.get_or_extract(u, p)
    for u in reversed(urls):
        b.get_or_extract(u, p)
    assert all(a.get(u).tobytes() == b.get(u).tobytes() for u in urls)


def test_round_trip(tmp_path):
    p = SyntheticProvider(12)
    s = FeatureStore(12, clock=lambda: 1_700_000_000)
    for i in range(1000):
        s.get_or_extract(f"http://img/{i}.jpg", p)
    path = tmp_path / "s.jvsk"
    s.persist(path)
    raw = path.read_bytes()
    assert raw[:5] == b"JVSK\x01"
    assert int.from_bytes(raw[5:9], "big") == 12 and int.from_bytes(raw[9:17], "big") == 1000
    back = FeatureStore.load(path)
    assert back.urls() == s.urls()
    for u in s.urls():
        assert back.get(u).tobytes() == s.get(u).tobytes()
        assert back.record(u).extracted_at == 1_700_000_000


def test_empty_round_trip(tmp_path):
    FeatureStore(3).persist(tmp_path / "e.jvsk")
    back = FeatureStore.load(tmp_path / "e.jvsk")
    assert len(back) == 0 and back.dim == 3


def test_truncated_file(tmp_path):
    s = FeatureStore(4)
    s.get_or_extract("abc", SyntheticProvider(4))
    path = tmp_path / "s.jvsk"
    s.persist(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(SnapshotFormatError) as e:
        FeatureStore.load(path)
    assert e.value.offset == 21  # just past the url length field
    path.write_bytes(raw + b"junk")
    with pytest.raises(SnapshotFormatError):
        FeatureStore.load(path)
