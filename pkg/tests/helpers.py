"""Shared fixtures-as-functions: synthetic corpora and independent metric
oracles used by both the unit tests and the acceptance suite."""

import itertools

import numpy as np
import torch

from spkmtl.dataio import Manifest, UtteranceRecord
from spkmtl.evaluation import Segment, Timeline
from spkmtl.model import MlpHead, TaskHeadSpec, build_model
from spkmtl.training import InMemoryFeatures

# ---------------------------------------------------------------------------
# Synthetic Gaussian speaker corpora
# ---------------------------------------------------------------------------


def gaussian_means(n_speakers: int, dim: int, min_dist: float, rng) -> np.ndarray:
    """Speaker means with pairwise distance >= min_dist (rejection)."""
    means = []
    while len(means) < n_speakers:
        cand = rng.normal(0.0, 5.0, size=dim)
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
    return np.stack(means)


def gaussian_corpus(n_speakers, utts_per_speaker, frames, dim, seed, prefix="s",
                    sigma=1.0, means=None, ages=None):
    """Manifest + in-memory features where each speaker's frames are drawn
    from an isotropic Gaussian around that speaker's mean."""
    rng = np.random.default_rng(seed)
    if means is None:
        means = gaussian_means(n_speakers, dim, min_dist=6.0 * sigma, rng=rng)
    records = []
    feats = {}
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            utt_id = f"{prefix}{s:02d}u{u:02d}"
            attrs = {}
            if ages is not None:
                attrs["age"] = float(ages[s])
            records.append(UtteranceRecord(
                utt_id=utt_id,
                rec_id=f"{prefix}{s:02d}r{u:02d}",
                speaker_id=f"{prefix}{s:02d}",
                feature_path="",
                num_frames=frames,
                start_time=0.0,
                end_time=frames / 100.0,
                attributes=attrs,
            ))
            feats[utt_id] = rng.normal(means[s], sigma, size=(frames, dim)).astype(np.float32)
    return Manifest(tuple(records)), InMemoryFeatures(feats), means


# ---------------------------------------------------------------------------
# EER oracle: evaluate FAR/FRR at every midpoint between adjacent sorted
# scores (plus end points), then take the crossing on the polyline.
# ---------------------------------------------------------------------------


def eer_oracle(scored_trials):
    scores = np.array([s for s, _ in scored_trials], dtype=np.float64)
    is_tgt = np.array([bool(t) for _, t in scored_trials])
    tgt = scores[is_tgt]
    non = scores[~is_tgt]
    uniq = np.unique(scores)
    mids = np.concatenate([
        [uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]
    ])
    # full comparison matrices: every midpoint against every score
    frr = (tgt[None, :] < mids[:, None]).mean(axis=1)
    far = (non[None, :] >= mids[:, None]).mean(axis=1)
    for i in range(len(mids)):
        d = far[i] - frr[i]
        if d == 0:
            return float(far[i])
        if d < 0:
            pd = far[i - 1] - frr[i - 1]
            alpha = pd / (pd - d)
            return float(far[i - 1] + alpha * (far[i] - far[i - 1]))
    return float(far[-1])


# ---------------------------------------------------------------------------
# DER oracle: 10 ms frame quantization, brute force over speaker mappings.
# ---------------------------------------------------------------------------


def der_oracle(ref: Timeline, hyp: Timeline, mode="all", unseen=None, step=0.01):
    end = max(s.end for s in ref.segments + hyp.segments)
    n_frames = int(round(end / step)) + 1
    times = (np.arange(n_frames) + 0.5) * step

    def activity(timeline):
        speakers = timeline.speakers()
        act = np.zeros((len(speakers), n_frames), dtype=bool)
        for i, spk in enumerate(speakers):
            for seg in timeline.segments:
                if seg.speaker == spk:
                    act[i] |= (times >= seg.start) & (times < seg.end)
        return speakers, act

    ref_spk, ref_act = activity(ref)
    hyp_spk, hyp_act = activity(hyp)

    if mode == "unseen":
        scored = np.zeros(n_frames, dtype=bool)
        for i, spk in enumerate(ref_spk):
            if spk in set(unseen):
                scored |= ref_act[i]
    else:
        scored = np.ones(n_frames, dtype=bool)

    ref_act = ref_act[:, scored]
    hyp_act = hyp_act[:, scored]
    overlap = (ref_act[:, None, :] & hyp_act[None, :, :]).sum(axis=2)

    nr, nh = len(ref_spk), len(hyp_spk)
    best_pairs, best_val = [], -1
    small, big = (nr, nh) if nr <= nh else (nh, nr)
    for perm in itertools.permutations(range(big), small):
        pairs = [(r, h) for r, h in enumerate(perm)] if nr <= nh else [(r, h) for h, r in enumerate(perm)]
        val = sum(overlap[r, h] for r, h in pairs)
        if val > best_val:
            best_val, best_pairs = val, pairs

    nref = ref_act.sum(axis=0)
    nhyp = hyp_act.sum(axis=0)
    correct = np.zeros(ref_act.shape[1], dtype=int)
    for r, h in best_pairs:
        correct += (ref_act[r] & hyp_act[h]).astype(int)
    miss = np.maximum(0, nref - nhyp).sum() * step
    fa = np.maximum(0, nhyp - nref).sum() * step
    conf = (np.minimum(nref, nhyp) - correct).sum() * step
    scored_time = nref.sum() * step
    if scored_time == 0:
        raise ValueError("oracle: empty scored region")
    return {
        "miss": miss, "false_alarm": fa, "confusion": conf,
        "total_scored_time": scored_time,
        "der": (miss + fa + conf) / scored_time,
    }


def random_timeline_pair(rng, n_ref_spk, n_hyp_spk, duration=60.0, grid=0.1):
    """Random ref/hyp timelines with all boundaries on a coarse grid (so
    the frame-quantized oracle is exact)."""
    def build(n_spk, prefix):
        segs = []
        for i in range(n_spk):
            cursor = float(rng.integers(0, 10)) * grid
            for _ in range(int(rng.integers(1, 5))):
                length = float(rng.integers(5, 80)) * grid
                start = cursor + float(rng.integers(0, 40)) * grid
                end = min(start + length, duration)
                if end > start:
                    segs.append(Segment(start, end, f"{prefix}{i}"))
                cursor = end + grid
                if cursor >= duration:
                    break
        return segs

    ref = Timeline(rec_id="r", segments=tuple(build(n_ref_spk, "A")))
    hyp = Timeline(rec_id="r", segments=tuple(build(n_hyp_spk, "B")))
    return ref, hyp


# ---------------------------------------------------------------------------
# AHC oracle: literal step-by-step merge simulation, no caching.
# ---------------------------------------------------------------------------


def ahc_oracle(sim: np.ndarray, k: int) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    clusters = [[i] for i in range(sim.shape[0])]
    while len(clusters) > k:
        best, best_val = None, None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                val = sim[np.ix_(clusters[i], clusters[j])].mean()
                if best_val is None or val > best_val:
                    best, best_val = (i, j), val
        i, j = best
        clusters[i] = sorted(clusters[i] + clusters[j])
        del clusters[j]
    order = sorted(range(len(clusters)), key=lambda c: clusters[c][0])
    labels = np.empty(sim.shape[0], dtype=np.int64)
    for rank, c in enumerate(order):
        labels[clusters[c]] = rank
    return labels


def block_similarity(block_sizes, rng=None, within=0.9, cross=0.1, jitter=0.0):
    """Planted block-diagonal similarity matrix."""
    n = sum(block_sizes)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes)
    sim = np.where(labels[:, None] == labels[None, :], within, cross).astype(np.float64)
    if jitter and rng is not None:
        noise = rng.uniform(-jitter, jitter, size=(n, n))
        noise = 0.5 * (noise + noise.T)
        sim = sim + noise
    np.fill_diagonal(sim, 1.0)
    return sim, labels


def same_partition(a, b) -> bool:
    """True when two label arrays induce the same partition."""
    mapping = {}
    for x, y in zip(a, b):
        if mapping.setdefault(x, y) != y:
            return False
    return len(set(mapping.values())) == len(mapping)


# ---------------------------------------------------------------------------
# Gradient-check fixture: tiny double-precision model in a region with no
# Leaky ReLU kink inside the finite-difference step.
# ---------------------------------------------------------------------------


def gradcheck_fixture(extractor_cfg):
    from spkmtl.losses import AuxTaskSpec, Batch, MultiTaskConfig

    specs = [TaskHeadSpec("speaker", "cosface", 5), TaskHeadSpec("age", "mlp_ce", 3)]
    model = build_model(extractor_cfg, specs, seed=199).double()
    mtl = MultiTaskConfig(tasks=(AuxTaskSpec("age", "age_bin", weight=0.7),))
    g = torch.Generator().manual_seed(699)
    feats = 1.0 + torch.rand(3, 6, 4, generator=g, dtype=torch.float64)
    batch = Batch(
        features=feats,
        labels={
            "speaker": (torch.tensor([0, 1, 2]), torch.ones(3, dtype=torch.bool)),
            "age": (torch.tensor([0, 1, 2]), torch.tensor([True, True, False])),
        },
    )
    return model, batch, mtl


def min_abs_preactivation(model, batch, mtl):
    """Smallest |preactivation| feeding a Leaky ReLU anywhere in the net."""
    from spkmtl.losses import batch_loss

    values = []
    hooks = []

    def grab(_mod, _inp, out):
        values.append(out.detach().abs().min().item())

    for conv in model.extractor.convs:
        hooks.append(conv.register_forward_hook(grab))
    for head in model.heads.values():
        if isinstance(head, MlpHead):
            hooks.append(head.linear0.register_forward_hook(grab))
            hooks.append(head.linear1.register_forward_hook(grab))
    with torch.no_grad():
        batch_loss(model, batch, mtl)
    for h in hooks:
        h.remove()
    return min(values)
