import numpy as np
import pytest

from depthlip.conditioning import ImageFrame
from depthlip.dataset_pipeline import (ClipManifest, ClipRecord, CurationFilter,
                                       CurationRecord, FaceTrack, StatsConfig,
                                       apply_curation_filters, build_manifest,
                                       compute_statistics, crop_face, load_face_track_csv,
                                       load_manifest, sample_frames, segment_clips,
                                       write_manifest, write_stats)
from depthlip.errors import FormatError


def make_track(counts, fps=25.0):
    boxes = [(1.0, 2.0, 30.0, 40.0) if c == 1 else None for c in counts]
    return FaceTrack(counts=np.array(counts), boxes=boxes, fps=fps)


def scan_oracle(counts, min_len):
    """Naive linear scan for single-face runs (independent of the numpy path)."""
    runs = []
    start = None
    for i, c in enumerate(list(counts) + [0]):
        if c == 1 and start is None:
            start = i
        elif c != 1 and start is not None:
            if i - start >= min_len:
                runs.append((start, i))
            start = None
    return runs


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def test_segment_example_runs():
    track = make_track([1, 1, 1, 0, 1, 1])
    assert segment_clips(track, min_len=2) == [(0, 3), (4, 6)]


def test_segment_discards_multi_face():
    track = make_track([2] * 10)
    assert segment_clips(track, min_len=1) == []


def test_segment_matches_scan_oracle(rng):
    counts = rng.choice([0, 1, 1, 1, 2], size=10000)
    track = make_track(counts)
    for min_len in (1, 5, 25):
        assert segment_clips(track, min_len) == scan_oracle(counts, min_len)


def test_segment_runs_cover_track():
    counts = [1, 1, 0, 1, 1, 1, 2, 1]
    track = make_track(counts)
    runs = segment_clips(track, min_len=1)
    covered = sum(e - s for s, e in runs)
    discarded = sum(1 for i, c in enumerate(counts)
                    if c != 1 or not any(s <= i < e for s, e in runs))
    assert covered + discarded == len(counts)


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------


def test_sample_caps_long_clips():
    picked = sample_frames(20000, 10000, seed=1)
    assert picked.size == 10000
    assert np.unique(picked).size == 10000
    assert np.all(np.diff(picked) > 0)
    assert picked.min() >= 0 and picked.max() < 20000


def test_sample_passthrough_under_cap():
    assert np.array_equal(sample_frames(500, 10000, seed=1), np.arange(500))


def test_sample_deterministic_per_seed():
    assert np.array_equal(sample_frames(1000, 100, seed=9), sample_frames(1000, 100, seed=9))
    assert not np.array_equal(sample_frames(1000, 100, seed=9), sample_frames(1000, 100, seed=10))


def test_sample_uniformity_chi_square():
    length, cap, seeds = 200, 50, 100
    counts = np.zeros(length)
    for seed in range(seeds):
        counts[sample_frames(length, cap, seed)] += 1
    expected = seeds * cap / length
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    df = length - 1
    assert chi2 < df + 3.0 * np.sqrt(2.0 * df)


def test_sample_rejects_bad_cap():
    with pytest.raises(ValueError):
        sample_frames(10, 0, seed=0)


# ---------------------------------------------------------------------------
# face cropping
# ---------------------------------------------------------------------------


def test_crop_full_frame_identity(rng):
    frame = ImageFrame(rng.uniform(size=(3, 20, 24)))
    out = crop_face(frame, (0, 0, 24, 20), (24, 20))
    assert np.array_equal(out.values, frame.values)


def test_crop_resizes_to_full_scale_size(rng):
    frame = ImageFrame(rng.uniform(size=(3, 64, 64)))
    out = crop_face(frame, (8, 8, 40, 40), 256)
    assert out.values.shape == (3, 256, 256)


def test_crop_padding_matches_geometry_oracle():
    frame = ImageFrame(np.ones((3, 16, 16)))
    # box hangs half off the left edge; identity-size resize keeps geometry exact
    out = crop_face(frame, (-5, 2, 10, 8), (10, 8)).values
    want = np.zeros((8, 10))
    for yy in range(8):
        for xx in range(10):
            src_x, src_y = xx - 5, yy + 2
            if 0 <= src_x < 16 and 0 <= src_y < 16:
                want[yy, xx] = 1.0
    for c in range(3):
        assert np.array_equal(out[c], want)


def test_crop_rejects_empty_intersection():
    frame = ImageFrame(np.ones((3, 8, 8)))
    with pytest.raises(ValueError, match="intersect"):
        crop_face(frame, (20, 20, 4, 4), 8)


def test_crop_rejects_nonpositive_box():
    frame = ImageFrame(np.ones((3, 8, 8)))
    with pytest.raises(ValueError, match="positive"):
        crop_face(frame, (1, 1, 0, 4), 8)


def test_crop_deterministic(rng):
    frame = ImageFrame(rng.uniform(size=(3, 32, 32)))
    a = crop_face(frame, (4, 6, 20, 18), (13, 9)).values
    b = crop_face(frame, (4, 6, 20, 18), (13, 9)).values
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# curation
# ---------------------------------------------------------------------------


def record(video, account, **flags):
    defaults = dict(single_face=True, audio_speaker_match=True,
                    mouth_visible=True, clean_audio=True)
    defaults.update(flags)
    return CurationRecord(video_id=video, account_id=account, **defaults)


def test_duplicate_account_rejected():
    results = apply_curation_filters([record("v1", "acct"), record("v2", "acct")])
    assert results[0].accepted
    assert not results[1].accepted
    assert results[1].reason == "duplicate-account"


def test_all_flags_true_new_account_accepts():
    assert apply_curation_filters([record("v1", "a1")])[0].accepted


def test_first_failed_criterion_reported():
    r = record("v", "a", single_face=False, clean_audio=False)
    assert apply_curation_filters([r])[0].reason == "multiple-faces"
    r = record("v", "a", clean_audio=False)
    assert apply_curation_filters([r])[0].reason == "noisy-audio"


def test_rejected_record_does_not_consume_account():
    results = apply_curation_filters([
        record("v1", "acct", single_face=False),
        record("v2", "acct"),
    ])
    assert not results[0].accepted
    assert results[1].accepted


def test_curation_matches_bruteforce_oracle(rng):
    records = []
    for i in range(100):
        records.append(record(
            f"v{i}", f"a{int(rng.integers(0, 40))}",
            single_face=bool(rng.random() < 0.8),
            audio_speaker_match=bool(rng.random() < 0.8),
            mouth_visible=bool(rng.random() < 0.8),
            clean_audio=bool(rng.random() < 0.8),
        ))
    got = {r.video_id for r, res in zip(records, apply_curation_filters(records))
           if res.accepted}
    # oracle: sequential set semantics, accounts consumed on accept only
    seen, want = set(), set()
    for r in records:
        if (r.account_id not in seen and r.single_face and r.audio_speaker_match
                and r.mouth_visible and r.clean_audio):
            want.add(r.video_id)
            seen.add(r.account_id)
    assert got == want


def test_missing_metadata_field_rejected():
    r = CurationRecord(video_id="v", account_id="a", single_face=None,
                       audio_speaker_match=True, mouth_visible=True, clean_audio=True)
    with pytest.raises(ValueError, match="missing field"):
        CurationFilter().apply(r)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def make_record(video, clip, n_frames, fps=25.0, sizes=(40.0,)):
    return ClipRecord(video_id=video, clip_id=clip, start_frame=0, end_frame=n_frames,
                      fps=fps, face_sizes=np.array(sizes))


def test_totals_for_three_videos():
    manifest = ClipManifest([
        make_record("a", "a0", 60 * 25),
        make_record("b", "b0", 120 * 25),
        make_record("c", "c0", 180 * 25),
    ])
    stats = compute_statistics(manifest)
    assert stats.total_seconds == pytest.approx(360.0)
    assert stats.video_count == 3
    assert stats.duration_hist[0].sum() == 3


def test_single_record_single_occupied_bin():
    stats = compute_statistics(ClipManifest([make_record("a", "a0", 100)]))
    for counts, _ in (stats.duration_hist, stats.fps_hist, stats.face_size_hist):
        assert counts.sum() == 1
        assert (counts > 0).sum() == 1


def test_histograms_match_direct_binning_oracle(rng):
    records = []
    for i in range(1000):
        records.append(make_record(f"v{i}", f"c{i}", int(rng.integers(25, 5000)),
                                   fps=float(rng.choice([24.0, 25.0, 30.0])),
                                   sizes=tuple(rng.uniform(20, 300, size=3))))
    manifest = ClipManifest(records)
    edges = np.linspace(0.0, 200.0, 11)
    stats = compute_statistics(manifest, StatsConfig(duration_edges=edges))
    durations = np.clip([r.duration for r in records], edges[0], edges[-1])
    want, _ = np.histogram(durations, bins=edges)
    assert np.array_equal(stats.duration_hist[0], want)


def test_histogram_mass_conservation(rng):
    records = [make_record(f"v{i}", f"c{i}", int(rng.integers(25, 50000)),
                           sizes=tuple(rng.uniform(10, 500, size=5)))
               for i in range(317)]
    stats = compute_statistics(ClipManifest(records))
    for counts, _ in (stats.duration_hist, stats.fps_hist, stats.face_size_hist):
        assert counts.sum() == 317


def test_empty_manifest_rejected():
    with pytest.raises(ValueError):
        compute_statistics(ClipManifest([]))


# ---------------------------------------------------------------------------
# manifest and track files
# ---------------------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    manifest = ClipManifest([
        make_record("vb", "vb_c000", 100),
        make_record("va", "va_c000", 200, sizes=(31.0, 42.0)),
    ])
    path = tmp_path / "m.csv"
    write_manifest(path, manifest)
    loaded = load_manifest(path)
    assert [r.video_id for r in loaded.records] == ["va", "vb"]  # sorted
    assert loaded.records[0].end_frame == 200
    assert np.array_equal(loaded.records[0].face_sizes, [31.0, 42.0])


def test_manifest_header_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("nope,nope\n1,2\n")
    with pytest.raises(FormatError):
        load_manifest(path)


def test_manifest_optional_gender_column_ignored(tmp_path):
    # human-labeled attribute column is carried but not computed on
    from depthlip.dataset_pipeline import MANIFEST_HEADER

    path = tmp_path / "g.csv"
    header = ",".join(MANIFEST_HEADER + ["gender"])
    path.write_text(header + "\nva,va_c000,0,100,25.0,4.0,40.0,,,,female\n")
    manifest = load_manifest(path)
    assert len(manifest) == 1
    assert manifest.records[0].video_id == "va"


def test_face_track_csv_and_manifest_build(tmp_path):
    rows = ["video_id,frame_idx,count,x,y,w,h"]
    for i in range(60):
        rows.append(f"vid1,{i},1,10,12,30,44")
    rows.append("vid1,60,0,,,,")
    for i in range(61, 100):
        rows.append(f"vid1,{i},1,10,12,30,50")
    path = tmp_path / "tracks.csv"
    path.write_text("\n".join(rows) + "\n")
    tracks = load_face_track_csv(path, fps=25.0)
    assert set(tracks) == {"vid1"}
    manifest = build_manifest(tracks, data_root=str(tmp_path), min_len=25)
    assert len(manifest) == 2
    first = manifest.records[0]
    assert (first.start_frame, first.end_frame) == (0, 60)
    assert first.face_size == 44.0     # median of max(w, h)
    assert first.landmarks_path.endswith("vid1/mouth.csv")


def test_write_stats_outputs(tmp_path):
    manifest = ClipManifest([make_record("a", "a0", 500), make_record("b", "b0", 700)])
    stats = compute_statistics(manifest)
    write_stats(tmp_path / "stats", stats)
    assert (tmp_path / "stats" / "hist_duration.csv").exists()
    assert (tmp_path / "stats" / "hist_fps.csv").exists()
    assert (tmp_path / "stats" / "hist_face_size.csv").exists()
    summary = (tmp_path / "stats" / "summary.txt").read_text()
    assert "videos: 2" in summary
