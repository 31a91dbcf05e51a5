import numpy as np
import pytest
from hypothesis import given, strategies as st

from clipmem import datagen as dg
from clipmem.datagen import XorMotifTask


@pytest.fixture(scope="module")
def small_task():
    return XorMotifTask(T=16, F=8, noise_sigma=0.3, n_train=40, n_val=20)


def test_motifs_orthonormal():
    M = XorMotifTask().motifs()
    np.testing.assert_allclose(M @ M.T, np.eye(4), atol=1e-12)


def test_noise_free_motif_frames_equal_motifs():
    task = XorMotifTask(T=16, F=8, noise_sigma=0.0, n_train=30, n_val=10)
    motifs = task.motifs()
    train, _ = dg.gen_dataset(task, seed=3)
    for v in train:
        nonzero = np.flatnonzero(np.abs(v.frames).sum(axis=1))
        assert len(nonzero) == 2
        t_a, t_b = nonzero
        assert t_a < 8 <= t_b
        i = [k for k in (0, 1) if np.array_equal(v.frames[t_a], motifs[k])]
        j = [k for k in (0, 1) if np.array_equal(v.frames[t_b], motifs[2 + k])]
        assert len(i) == 1 and len(j) == 1
        assert v.label == i[0] ^ j[0]


def test_same_seed_is_byte_identical(small_task, tmp_path):
    a, b = dg.gen_dataset(small_task, 11), dg.gen_dataset(small_task, 11)
    for split in (0, 1):
        dg.write_dataset(tmp_path / f"a{split}", a[split])
        dg.write_dataset(tmp_path / f"b{split}", b[split])
        assert (tmp_path / f"a{split}").read_bytes() == (tmp_path / f"b{split}").read_bytes()
    c, _ = dg.gen_dataset(small_task, 12)
    assert not np.array_equal(a[0][0].frames, c[0].frames)


def test_label_frequency_large_sample():
    task = XorMotifTask(T=8, F=4, n_train=10000, n_val=10)
    train, _ = dg.gen_dataset(task, 0)
    freq = np.mean([v.label for v in train])
    assert abs(freq - 0.5) <= 0.02


@pytest.mark.parametrize("n", [1, 7, 20, 101])
def test_labels_balanced_per_split(n):
    task = XorMotifTask(T=8, F=4, n_train=n, n_val=n)
    for split in dg.gen_dataset(task, 5):
        assert abs(np.mean([v.label for v in split]) - 0.5) <= 0.05 + 0.5 / n


def test_first_half_motif_independent_of_label():
    task = XorMotifTask(T=8, F=4, noise_sigma=0.0, n_train=8000, n_val=10)
    motifs = task.motifs()
    train, _ = dg.gen_dataset(task, 1)
    counts = np.zeros((2, 2))
    for v in train:
        t_a = np.flatnonzero(np.abs(v.frames[:4]).sum(axis=1))[0]
        i = int(np.argmax(motifs[:2] @ v.frames[t_a]))
        counts[i, v.label] += 1
    p = counts / counts.sum()
    outer = p.sum(1, keepdims=True) * p.sum(0, keepdims=True)
    assert np.abs(p - outer).max() < 0.02


def test_short_videos_rejected():
    with pytest.raises(dg.ConfigError):
        dg.gen_dataset(XorMotifTask(T=3, F=4, n_train=2, n_val=2), 0)


# --- clip sampling ------------------------------------------------------------

def _video(T=16):
    return dg.VideoSample(np.zeros((T, 4)), 0, 0)


def test_full_length_clip_starts_at_zero():
    clips = dg.sample_clips(_video(16), 5, 16, np.random.default_rng(0))
    assert [c.start for c in clips] == [0] * 5


def test_starts_cover_range():
    rng = np.random.default_rng(0)
    starts = [c.start for c in dg.sample_clips(_video(16), 1000, 8, rng)]
    assert set(starts) == set(range(9))


def test_single_clip_sampling():
    clips = dg.sample_clips(_video(16), 1, 8, np.random.default_rng(1))
    assert len(clips) == 1 and 0 <= clips[0].start <= 8 and clips[0].length == 8


def test_clip_too_long():
    with pytest.raises(dg.ClipLengthError):
        dg.sample_clips(_video(8), 2, 9, np.random.default_rng(0))
    with pytest.raises(dg.ClipLengthError):
        dg.uniform_test_crops(_video(8), 9, 3)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 12), st.integers(0, 10**6))
def test_every_clip_in_bounds(T, L, N, seed):
    if L > T:
        return
    for c in dg.sample_clips(_video(T), N, L, np.random.default_rng(seed)):
        assert 0 <= c.start <= T - L


# --- test crops -------------------------------------------------------------

def test_three_crops():
    assert [c.start for c in dg.uniform_test_crops(_video(16), 8, 3)] == [0, 4, 8]


def test_center_crop():
    assert [c.start for c in dg.uniform_test_crops(_video(16), 8, 1)] == [4]


def test_ten_crops_endpoints():
    starts = [c.start for c in dg.uniform_test_crops(_video(16), 8, 10)]
    assert starts[0] == 0 and starts[-1] == 8
    assert all(a <= b for a, b in zip(starts, starts[1:]))


def test_crop_layout_is_pure():
    assert dg.crop_starts(32, 8, 10) == dg.crop_starts(32, 8, 10) == [0, 3, 5, 8, 11, 13, 16, 19, 21, 24]


# --- single-clip Bayes oracle ----------------------------------------------

def test_bayes_is_chance_when_no_clip_straddles():
    # L=1 can never contain both motifs
    assert dg.bayes_single_clip_accuracy(XorMotifTask(T=32), 1) == 0.5


def test_bayes_matches_enumeration():
    # independent oracle: enumerate every (start, t_a, t_b) triple
    T, L = 32, 8
    half = T // 2
    hits = total = 0
    for s in range(T - L + 1):
        for ta in range(half):
            for tb in range(half, T):
                total += 1
                hits += (s <= ta < s + L) and (s <= tb < s + L)
    expected = 0.5 + 0.5 * hits / total
    assert dg.bayes_single_clip_accuracy(XorMotifTask(T=T), L) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.5 + 0.5 * 84 / (25 * 256), abs=1e-15)


def test_bayes_symmetry_under_motif_swap():
    # swapping a0 <-> a1 maps label -> 1 - label; accuracy of the best rule is unchanged
    task = XorMotifTask(T=32)
    swapped = XorMotifTask(T=32, motif_seed=task.motif_seed + 1)
    assert dg.bayes_single_clip_accuracy(task, 6) == dg.bayes_single_clip_accuracy(swapped, 6)


def test_bayes_rejects_long_clips():
    with pytest.raises(dg.OracleInapplicableError):
        dg.bayes_single_clip_accuracy(XorMotifTask(T=32), 16)


# --- CMVD1 ------------------------------------------------------------------

def test_dataset_file_round_trip(small_task, tmp_path):
    train, _ = dg.gen_dataset(small_task, 9)
    path = tmp_path / "train.cmvd"
    dg.write_dataset(path, train)
    raw = path.read_bytes()
    assert raw[:5] == b"CMVD1"
    back, C = dg.read_dataset(path)
    assert C == 2 and len(back) == len(train)
    for a, b in zip(train, back):
        assert a.label == b.label and a.video_id == b.video_id
        assert a.frames.tobytes() == b.frames.tobytes()


def test_dataset_file_header_layout(small_task, tmp_path):
    import struct
    train, _ = dg.gen_dataset(small_task, 9)
    dg.write_dataset(tmp_path / "d", train)
    raw = (tmp_path / "d").read_bytes()
    assert struct.unpack_from("<5I", raw, 5) == (1, 40, 16, 8, 2)
    assert len(raw) == 25 + 40 * (4 + 8 * 16 * 8)


def test_dataset_file_truncated(small_task, tmp_path):
    train, _ = dg.gen_dataset(small_task, 9)
    dg.write_dataset(tmp_path / "d", train)
    (tmp_path / "t").write_bytes((tmp_path / "d").read_bytes()[:-3])
    with pytest.raises(dg.FormatError):
        dg.read_dataset(tmp_path / "t")
