import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from acpc import data as dt

SMALL = dt.SyntheticSpec(alphabet_size=5, channels=2, sequences_per_channel=6, sequence_length=256)


@pytest.fixture(scope="module")
def corpus():
    return dt.generate(dt.SyntheticSpec(), 0)


def test_default_corpus_shape(corpus):
    assert len(corpus) == 800
    assert np.bincount(corpus.channel_ids()).tolist() == [200] * 4
    s = corpus.sequences[0]
    assert s.samples.dtype == np.float32 and s.samples.shape == (1024,)
    assert s.frame_labels.dtype == np.uint16 and s.frame_labels.shape == (128,)


def test_same_seed_same_bytes():
    a, b = dt.generate(SMALL, 7), dt.generate(SMALL, 7)
    assert dt.dataset_to_bytes(a) == dt.dataset_to_bytes(b)
    assert dt.dataset_to_bytes(dt.generate(SMALL, 8)) != dt.dataset_to_bytes(a)


def test_single_symbol_noiseless_is_constant():
    spec = dt.SyntheticSpec(alphabet_size=1, noise=0.0, channels=1, sequences_per_channel=3, sequence_length=128)
    ds = dt.generate(spec, 0)
    for s in ds.sequences:
        assert np.all(s.frame_labels == 0)
        frames = s.samples.reshape(-1, spec.samples_per_frame)
        np.testing.assert_allclose(frames, np.broadcast_to(frames[0], frames.shape), atol=1e-6)
    with pytest.raises(ValueError):
        dt.generate(dt.SyntheticSpec(alphabet_size=1, noise=0.1), 0)


@pytest.mark.parametrize("bad", [
    dict(alphabet_size=0), dict(min_duration=0), dict(min_duration=5, max_duration=4),
    dict(min_duration=5, max_duration=6), dict(noise=-1.0), dict(sequence_length=1020),
    dict(channels=0), dict(sequence_length=16, min_duration=4),
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        dt.SyntheticSpec(**bad).validate()


def test_segments_within_bounds(corpus):
    spec = corpus.spec
    for s in corpus.sequences[:200]:
        segs = s.segments()
        assert sum(b - a for a, b, _ in segs) == spec.frames_per_sequence
        for (a, b, lab), nxt in zip(segs, segs[1:] + [None]):
            assert spec.min_duration <= b - a <= spec.max_duration
            if nxt is not None:
                assert nxt[2] != lab


def test_duration_uniformity(corpus):
    spec = corpus.spec
    lo, hi = spec.min_duration, spec.max_duration
    counts = np.zeros(hi - lo + 1)
    for s in corpus.sequences:
        for a, b, _ in s.segments():
            # only segments whose draw could not have been adjusted
            if a <= spec.frames_per_sequence - (lo + hi):
                counts[b - a - lo] += 1
    assert stats.chisquare(counts).pvalue > 1e-3


def test_labels_cover_alphabet(corpus):
    labels = np.concatenate([s.frame_labels for s in corpus.sequences])
    assert set(np.unique(labels).tolist()) == set(range(corpus.spec.alphabet_size))


@given(st.integers(4, 64).map(lambda f: f * 8), st.integers(0, 1000))
@settings(max_examples=25)
def test_durations_tile_property(length, seed):
    spec = dt.SyntheticSpec(sequence_length=length, min_duration=2, max_duration=5)
    d = dt.sample_durations(spec, np.random.default_rng(seed))
    assert sum(d) == spec.frames_per_sequence
    assert all(2 <= x <= 5 for x in d)


def test_noiseless_decode_recovers_labels():
    spec = dt.SyntheticSpec(noise=0.0, channels=3, sequences_per_channel=2, sequence_length=512)
    ds = dt.generate(spec, 3)
    templates = dt.symbol_templates(spec, 3)
    params = dt.channel_params(spec, 3)
    for s in ds.sequences:
        got = dt.decode_frames(s.samples, params[s.channel_id], templates, int(s.frame_labels[0]))
        np.testing.assert_array_equal(got, s.frame_labels)


def test_latent_labels_use_receptive_field_centre():
    frames = np.repeat(np.arange(16, dtype=np.uint16), 1)
    # centre of latent t is sample 8t + 9.5 -> frame (8t + 9.5) // 8 = t + 1
    out = dt.latent_labels(frames, 14, 20, 8, 8)
    np.testing.assert_array_equal(out, np.arange(1, 15))


# -- file format -------------------------------------------------------------------

def test_roundtrip_is_byte_exact(tmp_path):
    ds = dt.generate(SMALL, 1)
    path = tmp_path / "d.bin"
    dt.write_dataset(ds, path)
    assert path.stat().st_size == dt.expected_file_size(ds)
    back = dt.read_dataset(path)
    assert back.equals(ds)
    assert dt.dataset_to_bytes(back) == path.read_bytes()


def test_header_layout():
    ds = dt.generate(SMALL, 1)
    blob = dt.dataset_to_bytes(ds)
    assert blob[:8] == b"ACPCDS01"
    assert int.from_bytes(blob[8:12], "little") == len(ds)
    assert int.from_bytes(blob[12:16], "little") == 256


def test_bad_magic_and_version():
    blob = dt.dataset_to_bytes(dt.generate(SMALL, 1))
    with pytest.raises(dt.DatasetFormatError, match="magic"):
        dt.dataset_from_bytes(b"XXXXXX01" + blob[8:])
    with pytest.raises(dt.DatasetFormatError, match="version"):
        dt.dataset_from_bytes(b"ACPCDS02" + blob[8:])


def test_truncated_and_trailing():
    blob = dt.dataset_to_bytes(dt.generate(SMALL, 1))
    with pytest.raises(dt.DatasetFormatError):
        dt.dataset_from_bytes(blob[:-1])
    with pytest.raises(dt.DatasetFormatError):
        dt.dataset_from_bytes(blob[:5])
    with pytest.raises(dt.DatasetFormatError):
        dt.dataset_from_bytes(blob + b"\0\0")


def test_empty_dataset_roundtrip():
    blob = dt.dataset_to_bytes(dt.Dataset([]))
    assert len(blob) == 12
    assert len(dt.dataset_from_bytes(blob)) == 0


# -- batching ----------------------------------------------------------------------

def test_batches_are_single_channel(corpus):
    seen = []
    for b in dt.batches(corpus, 32, 4, seed=0):
        assert b.samples.shape == (32, 1024)
        assert set(corpus.channel_ids()[b.indices]) == {b.channel_id}
        seen.extend(b.indices.tolist())
    # 200 sequences per channel -> 6 full batches each, the rest dropped
    assert len(seen) == 4 * 6 * 32 == len(set(seen))


def test_batch_order_is_seeded(corpus):
    a = [b.indices.tolist() for b in dt.batches(corpus, 32, 4, seed=1, epoch=2)]
    b = [b.indices.tolist() for b in dt.batches(corpus, 32, 4, seed=1, epoch=2)]
    c = [b.indices.tolist() for b in dt.batches(corpus, 32, 4, seed=1, epoch=3)]
    assert a == b and a != c


def test_group_assignment():
    np.testing.assert_array_equal(dt.group_assignment(8, 4), [0, 0, 1, 1, 2, 2, 3, 3])
    np.testing.assert_array_equal(dt.group_assignment(6, 1), 0)
    with pytest.raises(ValueError):
        dt.group_assignment(8, 8)  # one sequence per group leaves no negatives
    with pytest.raises(ValueError):
        dt.group_assignment(4, 0)
    with pytest.raises(ValueError):
        dt.group_assignment(4, 5)


def test_batch_larger_than_channel():
    with pytest.raises(ValueError):
        next(dt.batches(dt.generate(SMALL, 0), 8, 2, seed=0))
