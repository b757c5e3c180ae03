import numpy as np
import pytest

from helpers import (
    ahc_oracle,
    block_similarity,
    der_oracle,
    eer_oracle,
    random_timeline_pair,
)
from spkmtl import evaluation
from spkmtl.dataio import Manifest, UtteranceRecord
from spkmtl.errors import DataError
from spkmtl.evaluation import (
    Segment,
    Timeline,
    Trial,
    ahc_cluster,
    aggregate_der,
    compute_der,
    compute_eer,
    cosine_score,
    cosine_similarity_matrix,
    diarize,
    make_trials,
    parse_rttm,
    read_trials,
    sad_from_reference,
    window_timeline,
    windows_for_segment,
    write_rttm,
    write_trials,
)


def trial_manifest(n_speakers, utts_per_speaker, prefix="spk", shared_rec=False):
    records = []
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            records.append(UtteranceRecord(
                utt_id=f"{prefix}{s}_u{u}",
                rec_id=f"{prefix}{s}_rec" if shared_rec else f"{prefix}{s}_rec{u}",
                speaker_id=f"{prefix}{s}",
                num_frames=100, start_time=0.0, end_time=1.0,
            ))
    return Manifest(tuple(records))


class TestMakeTrials:
    def test_two_speakers_six_utts_gives_15_plus_15(self):
        m = trial_manifest(2, 6)
        trials = make_trials(m, train_speakers=set(), n_per_speaker=15, seed=0)
        for spk in ("spk0", "spk1"):
            tgt = [t for t in trials if t.target and t.enrol_utt.startswith(spk)]
            non = [t for t in trials if not t.target and t.enrol_utt.startswith(spk)]
            assert len(tgt) == 15  # C(6,2) == 15 exactly
            assert len(non) == 15
        for t in trials:
            if t.target:
                assert t.enrol_utt.split("_")[0] == t.test_utt.split("_")[0]
            else:
                assert t.enrol_utt.split("_")[0] != t.test_utt.split("_")[0]

    def test_train_speaker_excluded(self):
        m = trial_manifest(3, 6)
        trials = make_trials(m, train_speakers={"spk1"}, n_per_speaker=15, seed=0)
        for t in trials:
            assert "spk1" not in (t.enrol_utt.split("_")[0], t.test_utt.split("_")[0])

    def test_deterministic(self):
        m = trial_manifest(4, 8)
        a = make_trials(m, set(), n_per_speaker=15, seed=5)
        b = make_trials(m, set(), n_per_speaker=15, seed=5)
        assert a == b

    def test_single_utterance_speaker_has_no_own_trials(self):
        records = list(trial_manifest(2, 6).records)
        records.append(UtteranceRecord(
            utt_id="solo_u0", rec_id="solo_rec", speaker_id="solo",
            num_frames=100, start_time=0.0, end_time=1.0,
        ))
        trials = make_trials(Manifest(tuple(records)), set(), 15, seed=0)
        assert not any(t.enrol_utt.startswith("solo") for t in trials)

    def test_too_few_speakers_rejected(self):
        m = trial_manifest(2, 6)
        with pytest.raises(DataError):
            make_trials(m, train_speakers={"spk0"}, n_per_speaker=15, seed=0)

    def test_sampled_subset_when_many_pairs(self):
        m = trial_manifest(2, 10)  # C(10,2) = 45 > 15
        trials = make_trials(m, set(), n_per_speaker=15, seed=1)
        tgt0 = [t for t in trials if t.target and t.enrol_utt.startswith("spk0")]
        assert len(tgt0) == 15
        assert len({(t.enrol_utt, t.test_utt) for t in tgt0}) == 15

    def test_nontargets_avoid_same_recording_when_possible(self):
        m = trial_manifest(3, 4, shared_rec=True)
        trials = make_trials(m, set(), n_per_speaker=6, seed=2)
        by_utt = m.by_utt_id()
        for t in trials:
            if not t.target:
                assert by_utt[t.enrol_utt].rec_id != by_utt[t.test_utt].rec_id


class TestCosineScore:
    def test_identical(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_score(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_score([1, 0, 0], [0, 1, 0]) == pytest.approx(0.0)

    def test_scale_invariant(self):
        v = np.array([0.3, -1.2, 0.7])
        assert cosine_score(v, 2 * v) == pytest.approx(1.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(DataError):
            cosine_score([0.0, 0.0], [1.0, 0.0])


class TestComputeEer:
    def test_perfect_separation(self):
        eer, _ = compute_eer([(0.9, True), (0.8, True), (0.1, False), (0.2, False)])
        assert eer == 0.0

    def test_derived_crossing(self):
        scored = [(0.9, True), (0.8, True), (0.7, True), (0.3, True),
                  (0.6, False), (0.2, False), (0.1, False), (0.05, False)]
        eer, thr = compute_eer(scored)
        assert eer == pytest.approx(0.25)
        assert thr == pytest.approx(0.6)

    def test_swapped_labels(self):
        eer, _ = compute_eer([(0.1, True), (0.2, True), (0.9, False), (0.8, False)])
        assert eer == pytest.approx(1.0)

    def test_degenerate_identical_scores(self):
        eer, _ = compute_eer([(0.5, True), (0.5, False)])
        assert eer == pytest.approx(0.5)

    def test_matches_midpoint_sweep_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(4, 200))
            scores = rng.normal(size=n)
            labels = rng.random(n) < rng.uniform(0.2, 0.8)
            if labels.all() or not labels.any():
                continue
            scored = list(zip(scores, labels))
            eer, _ = compute_eer(scored)
            assert abs(eer - eer_oracle(scored)) < 0.005

    def test_invariant_under_increasing_transform(self, rng):
        scores = rng.normal(size=80)
        labels = rng.random(80) < 0.5
        if labels.all() or not labels.any():
            labels[0] = True
            labels[1] = False
        base, _ = compute_eer(list(zip(scores, labels)))
        warped, _ = compute_eer(list(zip(np.exp(scores) + 3 * scores, labels)))
        assert base == warped

    def test_needs_both_classes(self):
        with pytest.raises(DataError):
            compute_eer([(0.5, True), (0.6, True)])


class TestWindowing:
    def test_three_second_segment(self):
        assert windows_for_segment(0.0, 3.0) == [(0.0, 1.5), (0.75, 2.25), (1.5, 3.0)]

    def test_short_segment(self):
        assert windows_for_segment(0.0, 1.0) == [(0.0, 1.0)]

    def test_tail_window(self):
        got = windows_for_segment(0.0, 3.1)
        assert len(got) == 4
        assert got[:3] == [(0.0, 1.5), (0.75, 2.25), (1.5, 3.0)]
        assert got[3][0] == pytest.approx(1.6)
        assert got[3][1] == pytest.approx(3.1)

    def test_windows_stay_inside_segment_and_overlap(self, rng):
        for _ in range(200):
            start = float(rng.uniform(0, 50))
            length = float(rng.uniform(0.1, 20))
            windows = windows_for_segment(start, start + length)
            for a, b in windows:
                assert a >= start - 1e-9 and b <= start + length + 1e-9
            regular = [w for i, w in enumerate(windows)
                       if i < len(windows) - 1 or w[0] == pytest.approx(start + i * 0.75)]
            for (a1, b1), (a2, b2) in zip(regular, regular[1:]):
                if a2 == pytest.approx(a1 + 0.75):
                    assert b1 - a2 == pytest.approx(0.75)

    def test_window_timeline_covers_all_segments(self):
        tl = Timeline("rec", (Segment(0.0, 3.0, "x"), Segment(10.0, 11.0, "y")))
        windows = window_timeline(tl)
        assert windows == [(0.0, 1.5), (0.75, 2.25), (1.5, 3.0), (10.0, 11.0)]


class TestAhcCluster:
    def test_k_equals_n_identity(self, rng):
        sim, _ = block_similarity([3, 3], rng=rng, jitter=0.01)
        labels = ahc_cluster(sim, k=6)
        assert list(labels) == [0, 1, 2, 3, 4, 5]

    def test_k_one_single_cluster(self, rng):
        sim, _ = block_similarity([4, 4])
        assert set(ahc_cluster(sim, k=1)) == {0}

    def test_recovers_planted_blocks(self, rng):
        for trial in range(30):
            sizes = rng.integers(2, 8, size=int(rng.integers(2, 5)))
            sim, truth = block_similarity(list(sizes), rng=rng, jitter=0.05)
            labels = ahc_cluster(sim, k=len(sizes))
            # same partition: the label arrays agree up to renaming
            mapping = {}
            for got, want in zip(labels, truth):
                assert mapping.setdefault(got, want) == want

    def test_matches_step_by_step_reference(self, rng):
        for trial in range(50):
            n = int(rng.integers(2, 9))
            a = rng.uniform(-1, 1, size=(n, n))
            sim = 0.5 * (a + a.T)
            np.fill_diagonal(sim, 1.0)
            k = int(rng.integers(1, n + 1))
            assert np.array_equal(ahc_cluster(sim, k), ahc_oracle(sim, k))

    def test_tie_break_deterministic(self):
        sim = np.full((4, 4), 0.5)
        np.fill_diagonal(sim, 1.0)
        # all pairs tie: merges must go to the lowest index pairs first
        assert list(ahc_cluster(sim, k=2)) == [0, 0, 0, 1]

    def test_k_out_of_range(self):
        sim = np.eye(3)
        with pytest.raises(DataError):
            ahc_cluster(sim, k=4)
        with pytest.raises(DataError):
            ahc_cluster(sim, k=0)

    def test_asymmetric_rejected(self):
        sim = np.eye(3)
        sim[0, 1] = 0.5
        with pytest.raises(DataError, match="symmetric"):
            ahc_cluster(sim, k=1)


def fake_embeddings_by_center(boundaries_to_vec):
    """embed_windows stand-in labeling each window by its center."""
    def fake(model, features, windows, frames_per_second=100.0):
        out = []
        for a, b in windows:
            center = (a + b) / 2
            out.append(boundaries_to_vec(center))
        return np.stack(out).astype(np.float32)
    return fake


class TestDiarize:
    def test_two_cluster_recording(self, monkeypatch):
        # speaker switch at t=3 inside one 6 s SAD region; windows whose
        # center falls before 3 s get one embedding direction, after it
        # the other
        vec_a, vec_b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        monkeypatch.setattr(
            evaluation, "embed_windows",
            fake_embeddings_by_center(lambda c: vec_a if c < 3.0 else vec_b),
        )
        sad = Timeline("rec", (Segment(0.0, 6.0, "speech"),))
        hyp = diarize(None, None, sad, k=2)
        assert len(hyp.speakers()) == 2
        # centers: 0.75, 1.5, 2.25 -> A; 3.0, ... -> B; cut at the midpoint
        # between centers 2.25 and 3.0
        switch = [s.end for s in hyp.segments if s.speaker == hyp.segments[0].speaker][-1]
        assert switch == pytest.approx(2.625)
        ref = Timeline("rec", (Segment(0.0, 3.0, "A"), Segment(3.0, 6.0, "B")))
        der = compute_der(ref, hyp, mode="all")
        assert der.der == pytest.approx(0.375 / 6.0)

    def test_k_one_covers_all_sad(self, monkeypatch):
        monkeypatch.setattr(
            evaluation, "embed_windows",
            fake_embeddings_by_center(lambda c: np.array([np.cos(c), np.sin(c)])),
        )
        sad = Timeline("rec", (Segment(0.0, 4.0, "s"), Segment(5.0, 7.0, "s")))
        hyp = diarize(None, None, sad, k=1)
        assert hyp.speakers() == ["spk0"]
        assert [(s.start, s.end) for s in hyp.segments] == [(0.0, 4.0), (5.0, 7.0)]

    def test_deterministic(self, monkeypatch):
        monkeypatch.setattr(
            evaluation, "embed_windows",
            fake_embeddings_by_center(lambda c: np.array([np.cos(c), np.sin(c), 0.2])),
        )
        sad = Timeline("rec", (Segment(0.0, 9.0, "s"),))
        a = diarize(None, None, sad, k=3)
        b = diarize(None, None, sad, k=3)
        assert a == b


class TestComputeDer:
    def test_relabeled_hypothesis_is_zero(self):
        ref = Timeline("r", (Segment(0, 10, "A"), Segment(10, 20, "B")))
        hyp = Timeline("r", (Segment(0, 10, "x7"), Segment(10, 20, "x2")))
        der = compute_der(ref, hyp, mode="all")
        assert der.der == pytest.approx(0.0)
        assert der.total_scored_time == pytest.approx(20.0)

    def test_confusion_example(self):
        ref = Timeline("r", (Segment(0, 10, "A"), Segment(10, 20, "B")))
        hyp = Timeline("r", (Segment(0, 12, "a"), Segment(12, 20, "b")))
        der = compute_der(ref, hyp, mode="all")
        assert der.confusion == pytest.approx(2.0)
        assert der.miss == pytest.approx(0.0)
        assert der.false_alarm == pytest.approx(0.0)
        assert der.der == pytest.approx(0.10)

    def test_unseen_mode_restricts_scoring(self):
        ref = Timeline("r", (Segment(0, 10, "A"), Segment(10, 20, "B")))
        hyp = Timeline("r", (Segment(0, 12, "a"), Segment(12, 20, "b")))
        der = compute_der(ref, hyp, mode="unseen", unseen_speakers={"B"})
        assert der.total_scored_time == pytest.approx(10.0)
        assert der.confusion == pytest.approx(2.0)
        assert der.der == pytest.approx(0.20)

    def test_label_permutation_invariance(self, rng):
        ref, hyp = random_timeline_pair(rng, 3, 3)
        base = compute_der(ref, hyp, mode="all")
        renamed = Timeline(hyp.rec_id, tuple(
            Segment(s.start, s.end, "XYZ"[int(s.speaker[1:]) % 3] * 2) for s in hyp.segments
        ))
        permuted = compute_der(ref, renamed, mode="all")
        for field in ("miss", "false_alarm", "confusion", "total_scored_time", "der"):
            assert getattr(base, field) == pytest.approx(getattr(permuted, field))

    def test_matches_frame_oracle(self, rng):
        checked = 0
        while checked < 40:
            ref, hyp = random_timeline_pair(rng, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            if not ref.segments:
                continue
            got = compute_der(ref, hyp, mode="all")
            want = der_oracle(ref, hyp, mode="all")
            assert abs(got.der - want["der"]) < 1e-3
            checked += 1

    def test_unseen_scored_time_never_exceeds_all(self, rng):
        for _ in range(20):
            ref, hyp = random_timeline_pair(rng, 3, 2)
            if not ref.segments:
                continue
            unseen = {ref.speakers()[0]}
            all_der = compute_der(ref, hyp, mode="all")
            try:
                unseen_der = compute_der(ref, hyp, mode="unseen", unseen_speakers=unseen)
            except DataError:
                continue
            assert unseen_der.total_scored_time <= all_der.total_scored_time + 1e-9

    def test_unseen_requires_speaker_set(self):
        ref = Timeline("r", (Segment(0, 1, "A"),))
        with pytest.raises(DataError):
            compute_der(ref, ref, mode="unseen")

    def test_empty_scored_region_is_error(self):
        ref = Timeline("r", (Segment(0, 1, "A"),))
        with pytest.raises(DataError, match="empty|no reference"):
            compute_der(ref, ref, mode="unseen", unseen_speakers={"Z"})

    def test_miss_and_false_alarm(self):
        ref = Timeline("r", (Segment(0, 10, "A"),))
        hyp = Timeline("r", (Segment(0, 6, "a"), Segment(8, 12, "a")))
        der = compute_der(ref, hyp, mode="all")
        assert der.miss == pytest.approx(2.0)  # [6, 8]
        assert der.false_alarm == pytest.approx(2.0)  # [10, 12]
        assert der.confusion == pytest.approx(0.0)

    def test_overlapping_reference_counts_multiply(self):
        ref = Timeline("r", (Segment(0, 10, "A"), Segment(5, 10, "B")))
        hyp = Timeline("r", (Segment(0, 10, "a"),))
        der = compute_der(ref, hyp, mode="all")
        assert der.total_scored_time == pytest.approx(15.0)
        assert der.miss == pytest.approx(5.0)

    def test_collar_forgives_boundary(self):
        ref = Timeline("r", (Segment(0, 10, "A"), Segment(10, 20, "B")))
        hyp = Timeline("r", (Segment(0, 10.5, "a"), Segment(10.5, 20, "b")))
        sharp = compute_der(ref, hyp, mode="all")
        forgiving = compute_der(ref, hyp, mode="all", collar=0.6)
        assert sharp.confusion == pytest.approx(0.5)
        assert forgiving.confusion == pytest.approx(0.0)

    def test_aggregate(self):
        ref = Timeline("r", (Segment(0, 10, "A"),))
        hyp_good = Timeline("r", (Segment(0, 10, "a"),))
        hyp_bad = Timeline("r", (Segment(0, 5, "a"),))
        d1 = compute_der(ref, hyp_good, mode="all")
        d2 = compute_der(ref, hyp_bad, mode="all")
        agg = aggregate_der([d1, d2])
        assert agg.total_scored_time == pytest.approx(20.0)
        assert agg.der == pytest.approx(5.0 / 20.0)


class TestTimelineIo:
    def test_rttm_roundtrip(self, tmp_path):
        tl = Timeline("recA", (Segment(0.5, 2.25, "spk1"), Segment(2.25, 4.0, "spk2")))
        write_rttm([tl], tmp_path / "x.rttm")
        back = parse_rttm(tmp_path / "x.rttm")["recA"]
        assert back == tl

    def test_rttm_format_line(self, tmp_path):
        tl = Timeline("rec", (Segment(1.0, 2.5, "s"),))
        write_rttm([tl], tmp_path / "x.rttm")
        line = (tmp_path / "x.rttm").read_text().strip()
        assert line == "SPEAKER rec 1 1.000 1.500 <NA> <NA> s <NA> <NA>"

    def test_same_speaker_overlap_rejected(self):
        with pytest.raises(DataError, match="overlap"):
            Timeline("r", (Segment(0, 2, "A"), Segment(1, 3, "A")))

    def test_cross_speaker_overlap_allowed(self):
        tl = Timeline("r", (Segment(0, 2, "A"), Segment(1, 3, "B")))
        assert len(tl.segments) == 2

    def test_sad_from_reference_merges(self):
        ref = Timeline("r", (Segment(0, 2, "A"), Segment(1, 3, "B"), Segment(5, 6, "A")))
        sad = sad_from_reference(ref)
        assert [(s.start, s.end) for s in sad.segments] == [(0, 3), (5, 6)]

    def test_trials_roundtrip(self, tmp_path):
        trials = [Trial("a", "b", True), Trial("c", "d", False)]
        write_trials(trials, tmp_path / "t.txt")
        assert read_trials(tmp_path / "t.txt") == trials
        write_trials(trials, tmp_path / "s.txt", scores=[0.9, -0.1])
        lines = (tmp_path / "s.txt").read_text().splitlines()
        assert lines[0] == "tgt a b 0.900000"
        assert lines[1] == "non c d -0.100000"


class TestSimilarityMatrix:
    def test_cosine_matrix_properties(self, rng):
        emb = rng.normal(size=(12, 6))
        sim = cosine_similarity_matrix(emb)
        assert np.allclose(sim, sim.T)
        assert np.allclose(np.diag(sim), 1.0)
        assert sim.min() >= -1.0 and sim.max() <= 1.0

    def test_zero_embedding_rejected(self):
        with pytest.raises(DataError):
            cosine_similarity_matrix(np.zeros((3, 4)))
