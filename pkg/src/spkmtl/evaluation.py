"""Verification and diarization evaluation.

Verification: trial generation over unseen speakers, cosine scoring, and
EER via a threshold sweep with linear interpolation at the FAR/FRR
crossing. Diarization: sliding windows over reference speech regions,
agglomerative clustering of window embeddings to the oracle speaker
count, and DER against the reference under "all" and "unseen" scoring.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .dataio import Manifest
from .errors import DataError
from .model import MultiTaskModel
from .seeding import derive_seed
from .training import wrap_rows

NORM_FLOOR = 1e-8
EXHAUSTIVE_MAPPING_LIMIT = 8  # brute-force speaker mappings up to this many


# ---------------------------------------------------------------------------
# Trials and verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    enrol_utt: str
    test_utt: str
    target: bool

    def __post_init__(self):
        if self.enrol_utt == self.test_utt:
            raise DataError(f"trial pairs an utterance with itself: {self.enrol_utt!r}")


def make_trials(test_manifest: Manifest, train_speakers, n_per_speaker: int = 15,
                seed: int = 0) -> list[Trial]:
    """Target and nontarget trials for every test speaker not seen in
    training.

    Each eligible speaker gets up to n_per_speaker target trials (distinct
    same-speaker pairs, sampled without replacement) and exactly as many
    nontargets pairing its utterances with other unseen speakers'
    utterances. Nontargets avoid same-recording pairs when possible.
    Speakers with a single utterance contribute no trials of their own but
    remain available as nontarget partners.
    """
    train_speakers = set(train_speakers)
    by_spk: dict[str, list] = {}
    for rec in test_manifest.records:
        if rec.speaker_id not in train_speakers:
            by_spk.setdefault(rec.speaker_id, []).append(rec)
    n_multi = sum(1 for utts in by_spk.values() if len(utts) >= 2)
    if n_multi < 2:
        raise DataError(
            "need at least 2 unseen speakers with >= 2 utterances each to build trials"
        )
    rng = np.random.default_rng(derive_seed(seed, "trials"))
    trials: list[Trial] = []
    for spk in sorted(by_spk):
        utts = by_spk[spk]
        if len(utts) < 2:
            continue
        pairs = list(itertools.combinations(range(len(utts)), 2))
        if len(pairs) > n_per_speaker:
            chosen = rng.choice(len(pairs), size=n_per_speaker, replace=False)
            pairs = [pairs[int(c)] for c in sorted(chosen)]
        for a, b in pairs:
            trials.append(Trial(utts[a].utt_id, utts[b].utt_id, True))
        others = [r for s, recs in sorted(by_spk.items()) if s != spk for r in recs]
        n_targets = len(pairs)
        seen_pairs: set[tuple[str, str]] = set()
        nontargets: list[Trial] = []
        attempts = 0
        while len(nontargets) < n_targets and attempts < 100 * n_targets:
            attempts += 1
            enrol = utts[int(rng.integers(0, len(utts)))]
            pool = [r for r in others if r.rec_id != enrol.rec_id] or others
            other = pool[int(rng.integers(0, len(pool)))]
            key = (enrol.utt_id, other.utt_id)
            if key in seen_pairs:
                continue
            seen_pairs.add(key)
            nontargets.append(Trial(enrol.utt_id, other.utt_id, False))
        while len(nontargets) < n_targets:  # tiny pools: accept repeats
            enrol = utts[int(rng.integers(0, len(utts)))]
            other = others[int(rng.integers(0, len(others)))]
            nontargets.append(Trial(enrol.utt_id, other.utt_id, False))
        trials.extend(nontargets)
    return trials


def write_trials(trials, path, scores=None) -> None:
    """Trial list lines: "tgt|non enrol test"; with scores, a fourth
    column is appended."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for i, trial in enumerate(trials):
            tag = "tgt" if trial.target else "non"
            line = f"{tag} {trial.enrol_utt} {trial.test_utt}"
            if scores is not None:
                line += f" {scores[i]:.6f}"
            fh.write(line + "\n")


def read_trials(path) -> list[Trial]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"trial list {path} does not exist")
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3 or parts[0] not in ("tgt", "non"):
                raise DataError(f"{path}: line {lineno}: expected 'tgt|non enrol test'")
            trials.append(Trial(parts[1], parts[2], parts[0] == "tgt"))
    return trials


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DataError("cannot cosine-score a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class EerResult(NamedTuple):
    eer: float
    threshold: float


def compute_eer(scored_trials) -> EerResult:
    """Equal error rate over (score, is_target) pairs.

    Thresholds sweep the sorted unique scores with FRR(t) = P(target
    score < t) and FAR(t) = P(nontarget score >= t); the EER and its
    threshold are linearly interpolated on the (FAR, FRR) polyline where
    FAR - FRR changes sign. A virtual operating point above the largest
    score (FAR 0, FRR 1) closes the sweep for degenerate score sets.
    """
    scores = np.array([float(s) for s, _ in scored_trials], dtype=np.float64)
    targets = np.array([bool(t) for _, t in scored_trials], dtype=bool)
    if not np.isfinite(scores).all():
        raise DataError("scores must be finite")
    tgt = np.sort(scores[targets])
    non = np.sort(scores[~targets])
    if len(tgt) == 0 or len(non) == 0:
        raise DataError("need at least one target and one nontarget score")

    thresholds = np.unique(scores)
    frr = np.searchsorted(tgt, thresholds, side="left") / len(tgt)
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    # virtual point above every score: everything rejected
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)

    diff = far - frr
    idx = int(np.argmax(diff <= 0))  # diff is non-increasing; first crossing
    if diff[idx] == 0:
        return EerResult(eer=float(far[idx]), threshold=float(thresholds[idx]))
    lo = idx - 1  # diff[lo] > 0 >= diff[idx]; lo >= 0 since diff[0] = 1
    alpha = diff[lo] / (diff[lo] - diff[idx])
    eer = far[lo] + alpha * (far[idx] - far[lo])
    thr = thresholds[lo] + alpha * (thresholds[idx] - thresholds[lo])
    return EerResult(eer=float(eer), threshold=float(thr))


# ---------------------------------------------------------------------------
# Timelines and RTTM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    speaker: str

    def __post_init__(self):
        if not (self.end > self.start):
            raise DataError(f"segment end ({self.end}) must be > start ({self.start})")


@dataclass(frozen=True)
class Timeline:
    """Labeled segmentation of one recording, sorted by start time.

    Segments of the same speaker must not overlap; different speakers may
    (reference overlap is permitted).
    """

    rec_id: str
    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "segments", tuple(sorted(self.segments, key=lambda s: (s.start, s.end, s.speaker)))
        )
        last_end: dict[str, float] = {}
        for seg in self.segments:
            if seg.speaker in last_end and seg.start < last_end[seg.speaker] - 1e-9:
                raise DataError(
                    f"timeline {self.rec_id!r}: same-speaker overlap for {seg.speaker!r} "
                    f"at {seg.start:.3f}"
                )
            last_end[seg.speaker] = max(last_end.get(seg.speaker, seg.start), seg.end)

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def total_speech(self) -> float:
        return sum(s.end - s.start for s in self.segments)


def merge_intervals(intervals, tol: float = 1e-9) -> list[tuple[float, float]]:
    """Union of intervals, merging ones that touch or overlap."""
    out: list[list[float]] = []
    for start, end in sorted(intervals):
        if out and start <= out[-1][1] + tol:
            out[-1][1] = max(out[-1][1], end)
        else:
            out.append([start, end])
    return [(s, e) for s, e in out]


def speech_regions(timeline: Timeline) -> list[tuple[float, float]]:
    """Merged speech intervals of a timeline, labels ignored."""
    return merge_intervals((s.start, s.end) for s in timeline.segments)


def sad_from_reference(ref: Timeline) -> Timeline:
    """Collapse a reference timeline into unlabeled speech regions (the
    reference speaker activity segmentation)."""
    segs = tuple(Segment(s, e, "speech") for s, e in speech_regions(ref))
    return Timeline(rec_id=ref.rec_id, segments=segs)


def parse_rttm(path) -> dict[str, Timeline]:
    """Read SPEAKER lines from an RTTM file, one Timeline per recording."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"RTTM file {path} does not exist")
    segments: dict[str, list[Segment]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "SPEAKER":
                continue
            if len(parts) < 8:
                raise DataError(f"{path}: line {lineno}: malformed RTTM SPEAKER line")
            rec_id = parts[1]
            try:
                start = float(parts[3])
                dur = float(parts[4])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: bad start/duration") from exc
            if dur <= 0:
                raise DataError(f"{path}: line {lineno}: duration must be positive")
            segments.setdefault(rec_id, []).append(Segment(start, start + dur, parts[7]))
    return {rec: Timeline(rec_id=rec, segments=tuple(segs)) for rec, segs in segments.items()}


def write_rttm(timelines, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for tl in timelines:
            for seg in tl.segments:
                fh.write(
                    f"SPEAKER {tl.rec_id} 1 {seg.start:.3f} {seg.end - seg.start:.3f} "
                    f"<NA> <NA> {seg.speaker} <NA> <NA>\n"
                )


# ---------------------------------------------------------------------------
# Windowing and clustering
# ---------------------------------------------------------------------------


def windows_for_segment(start: float, end: float, win: float = 1.5,
                        hop: float = 0.75) -> list[tuple[float, float]]:
    """Sliding windows within one speech segment.

    Regular windows start at offsets 0, hop, 2*hop, ... while they fit; a
    tail window [end-win, end] covers the remainder unless the last
    regular window already ends there. Segments shorter than one window
    yield a single window spanning the whole segment.
    """
    length = end - start
    if length <= 0:
        raise DataError("segment must have positive length")
    if length < win - 1e-9:
        return [(start, end)]
    out = []
    k = 0
    while k * hop + win <= length + 1e-9:
        out.append((start + k * hop, min(start + k * hop + win, end)))
        k += 1
    if out[-1][1] < end - 1e-9:
        out.append((end - win, end))
    return out


def window_timeline(sad: Timeline, win: float = 1.5, hop: float = 0.75) -> list[tuple[float, float]]:
    """All embedding windows over a SAD timeline, labels ignored."""
    windows = []
    for seg in sad.segments:
        windows.extend(windows_for_segment(seg.start, seg.end, win, hop))
    return windows


def cosine_similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities: symmetric, unit diagonal, in [-1, 1]."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if (norms < NORM_FLOOR).any():
        raise DataError("zero-norm embedding in similarity matrix input")
    unit = emb / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def validate_similarity(sim: np.ndarray) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DataError(f"similarity matrix must be square, got shape {sim.shape}")
    if not np.isfinite(sim).all():
        raise DataError("similarity matrix contains non-finite values")
    if np.abs(sim - sim.T).max() > 1e-6:
        raise DataError("similarity matrix is not symmetric within 1e-6")
    return sim


def ahc_cluster(sim: np.ndarray, k: int) -> np.ndarray:
    """Average-linkage agglomerative clustering down to k clusters.

    Repeatedly merges the cluster pair with the highest mean pairwise
    similarity; exact ties go to the lowest (i, j) position pair. Output
    labels are 0..k-1 ordered by each cluster's smallest item index.
    """
    sim = validate_similarity(sim)
    n = sim.shape[0]
    if not (1 <= k <= n):
        raise DataError(f"cluster count k={k} must be in [1, {n}]")
    clusters: list[list[int]] = [[i] for i in range(n)]

    def block_mean(a: list[int], b: list[int]) -> float:
        return float(sim[np.ix_(a, b)].mean())

    m = n
    avg = np.full((m, m), -np.inf)
    for i in range(m):
        for j in range(i + 1, m):
            avg[i, j] = sim[i, j]

    while len(clusters) > k:
        flat = int(np.argmax(avg))  # first max in row-major order = lowest (i, j)
        i, j = divmod(flat, avg.shape[1])
        merged = sorted(clusters[i] + clusters[j])
        clusters[i] = merged
        del clusters[j]
        avg = np.delete(np.delete(avg, j, axis=0), j, axis=1)
        for q in range(len(clusters)):
            if q == i:
                continue
            lo, hi = (q, i) if q < i else (i, q)
            avg[lo, hi] = block_mean(clusters[lo], clusters[hi])

    order = sorted(range(len(clusters)), key=lambda c: clusters[c][0])
    labels = np.empty(n, dtype=np.int64)
    for rank, c in enumerate(order):
        labels[clusters[c]] = rank
    return labels


# ---------------------------------------------------------------------------
# Diarization pipeline
# ---------------------------------------------------------------------------


def embed_windows(model: MultiTaskModel, features: np.ndarray, windows,
                  frames_per_second: float = 100.0) -> np.ndarray:
    """Embedding per (start, end) window of a recording's feature matrix;
    windows shorter than the extractor context are wrap-padded."""
    feats = np.asarray(features, dtype=np.float32)
    n_frames = feats.shape[0]
    min_frames = model.extractor.config.min_frames
    model.eval()
    out = []
    with torch.no_grad():
        for start, end in windows:
            a = max(0, int(round(start * frames_per_second)))
            b = min(n_frames, int(round(end * frames_per_second)))
            if b <= a:
                raise DataError(
                    f"window [{start:.3f}, {end:.3f}] lies outside the {n_frames}-frame "
                    f"feature matrix"
                )
            chunk = feats[a:b]
            if chunk.shape[0] < min_frames:
                chunk = wrap_rows(chunk, min_frames)
            emb = model(torch.from_numpy(np.ascontiguousarray(chunk)).unsqueeze(0))[0]
            out.append(emb.numpy())
    return np.stack(out).astype(np.float32)


def diarize(model: MultiTaskModel, features: np.ndarray, sad: Timeline, k: int,
            frames_per_second: float = 100.0, win: float = 1.5,
            hop: float = 0.75) -> Timeline:
    """Window -> embed -> cluster -> label instants.

    Each instant inside a SAD segment takes the label of the window whose
    center is nearest; adjacent same-label segments are merged. The
    speaker count k is the oracle value for the recording.
    """
    per_segment = [
        (seg, windows_for_segment(seg.start, seg.end, win, hop)) for seg in sad.segments
    ]
    all_windows = [w for _, ws in per_segment for w in ws]
    if not all_windows:
        raise DataError("SAD yielded no windows")
    embeddings = embed_windows(model, features, all_windows, frames_per_second)
    labels = ahc_cluster(cosine_similarity_matrix(embeddings), k)

    pieces: list[Segment] = []
    cursor = 0
    for seg, windows in per_segment:
        n = len(windows)
        centers = [(a + b) / 2 for a, b in windows]
        cuts = [seg.start]
        cuts += [(centers[i] + centers[i + 1]) / 2 for i in range(n - 1)]
        cuts += [seg.end]
        for i in range(n):
            if cuts[i + 1] > cuts[i]:
                pieces.append(Segment(cuts[i], cuts[i + 1], f"spk{labels[cursor + i]}"))
        cursor += n

    merged: list[Segment] = []
    for piece in pieces:
        if merged and merged[-1].speaker == piece.speaker and piece.start <= merged[-1].end + 1e-9:
            merged[-1] = Segment(merged[-1].start, max(merged[-1].end, piece.end), piece.speaker)
        else:
            merged.append(piece)
    return Timeline(rec_id=sad.rec_id, segments=tuple(merged))


# ---------------------------------------------------------------------------
# DER
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DerBreakdown:
    miss: float
    false_alarm: float
    confusion: float
    total_scored_time: float
    der: float
    mode: str

    def to_json_obj(self) -> dict:
        return {
            "miss": self.miss,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "total_scored_time": self.total_scored_time,
            "der": self.der,
            "mode": self.mode,
        }


def _subtract_collar(regions, boundaries, collar):
    """Remove +/- collar zones around reference boundaries from regions."""
    zones = merge_intervals((b - collar, b + collar) for b in boundaries)
    out = []
    for start, end in regions:
        cur = start
        for zs, ze in zones:
            if ze <= cur or zs >= end:
                continue
            if zs > cur:
                out.append((cur, zs))
            cur = max(cur, ze)
        if cur < end:
            out.append((cur, end))
    return out


def optimal_mapping(overlap: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one ref/hyp speaker assignment maximizing attributed time.

    Exhaustive over permutations up to 8 speakers a side, maximum-weight
    bipartite matching beyond.
    """
    nr, nh = overlap.shape
    if nr == 0 or nh == 0:
        return []
    if max(nr, nh) <= EXHAUSTIVE_MAPPING_LIMIT:
        best, best_val = [], -1.0
        if nr <= nh:
            for perm in itertools.permutations(range(nh), nr):
                val = sum(overlap[r, h] for r, h in enumerate(perm))
                if val > best_val:
                    best_val = val
                    best = list(enumerate(perm))
        else:
            for perm in itertools.permutations(range(nr), nh):
                val = sum(overlap[r, h] for h, r in enumerate(perm))
                if val > best_val:
                    best_val = val
                    best = [(r, h) for h, r in enumerate(perm)]
        return best
    rows, cols = linear_sum_assignment(-overlap)
    return list(zip(rows.tolist(), cols.tolist()))


def compute_der(ref: Timeline, hyp: Timeline, mode: str = "all",
                unseen_speakers=None, collar: float = 0.0) -> DerBreakdown:
    """DER between a reference and a hypothesis timeline.

    The speaker mapping maximizes correctly attributed time within the
    scored region. Mode "unseen" restricts scoring to instants where at
    least one unseen speaker is active in the reference. The denominator
    is the total reference speaker time in the scored region (overlapping
    reference speakers count multiply).
    """
    if mode not in ("all", "unseen"):
        raise DataError(f"mode must be 'all' or 'unseen', got {mode!r}")
    if mode == "unseen":
        if unseen_speakers is None:
            raise DataError("mode 'unseen' requires the unseen speaker set")
        unseen = set(unseen_speakers)
        scored = merge_intervals(
            (s.start, s.end) for s in ref.segments if s.speaker in unseen
        )
    else:
        events = [s.start for s in ref.segments + hyp.segments]
        events += [s.end for s in ref.segments + hyp.segments]
        scored = [(min(events), max(events))] if events else []
    if collar > 0:
        boundaries = [s.start for s in ref.segments] + [s.end for s in ref.segments]
        scored = _subtract_collar(scored, boundaries, collar)
    if not scored:
        raise DataError("empty scored region; DER is undefined")

    ref_speakers = ref.speakers()
    hyp_speakers = hyp.speakers()
    r_index = {s: i for i, s in enumerate(ref_speakers)}
    h_index = {s: i for i, s in enumerate(hyp_speakers)}

    bounds = sorted(
        {b for s in ref.segments for b in (s.start, s.end)}
        | {b for s in hyp.segments for b in (s.start, s.end)}
        | {b for interval in scored for b in interval}
    )

    def active(segments, index, t):
        out = []
        for seg in segments:
            if seg.start <= t < seg.end:
                out.append(index[seg.speaker])
        return out

    def in_scored(t):
        return any(s <= t < e for s, e in scored)

    cells = []
    overlap = np.zeros((len(ref_speakers), len(hyp_speakers)))
    for a, b in zip(bounds, bounds[1:]):
        if b <= a:
            continue
        mid = (a + b) / 2
        if not in_scored(mid):
            continue
        dt = b - a
        r_act = active(ref.segments, r_index, mid)
        h_act = active(hyp.segments, h_index, mid)
        cells.append((dt, r_act, h_act))
        for ri in r_act:
            for hj in h_act:
                overlap[ri, hj] += dt

    mapping = set(optimal_mapping(overlap))
    miss = fa = conf = scored_time = 0.0
    for dt, r_act, h_act in cells:
        nref, nhyp = len(r_act), len(h_act)
        ncorrect = sum(1 for ri in r_act for hj in h_act if (ri, hj) in mapping)
        miss += max(0, nref - nhyp) * dt
        fa += max(0, nhyp - nref) * dt
        conf += (min(nref, nhyp) - ncorrect) * dt
        scored_time += nref * dt

    if scored_time <= 0:
        raise DataError("scored region contains no reference speech; DER is undefined")
    return DerBreakdown(
        miss=miss, false_alarm=fa, confusion=conf,
        total_scored_time=scored_time,
        der=(miss + fa + conf) / scored_time, mode=mode,
    )


def aggregate_der(breakdowns) -> DerBreakdown:
    """Corpus-level DER: component sums over per-recording breakdowns."""
    breakdowns = list(breakdowns)
    if not breakdowns:
        raise DataError("nothing to aggregate")
    modes = {b.mode for b in breakdowns}
    if len(modes) != 1:
        raise DataError(f"cannot aggregate mixed modes {sorted(modes)}")
    miss = sum(b.miss for b in breakdowns)
    fa = sum(b.false_alarm for b in breakdowns)
    conf = sum(b.confusion for b in breakdowns)
    scored = sum(b.total_scored_time for b in breakdowns)
    return DerBreakdown(
        miss=miss, false_alarm=fa, confusion=conf, total_scored_time=scored,
        der=(miss + fa + conf) / scored, mode=modes.pop(),
    )
