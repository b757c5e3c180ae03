"""Command-line entry points.

Commands: prepare, compute-features, train, finetune, make-trials,
eval-verify, eval-diarize, plot. Exit codes: 0 success, 2 config/schema
error, 3 data error, 4 numerical abort. Report paths write JSON plus a
CSV and a rendered figure for anything plottable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, evaluation, frontend, plots, training
from .config import load_config
from .errors import DataError, NumericsError, SchemaError
from .model import extract_embedding, load_checkpoint, save_checkpoint

EMBED_CACHE_ENV = "MTL_EMBED_CACHE"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")


def _prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    marker = out / "summary.json"
    if marker.exists() and not force:
        raise DataError(
            f"{out} already holds a completed run (summary.json present); "
            f"pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_manifest_rebased(path) -> dataio.Manifest:
    manifest = dataio.load_manifest(path)
    return dataio.rebase_feature_paths(manifest, Path(path).resolve().parent)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    manifest = dataio.load_manifest(args.utterances)
    attrs = dataio.load_attribute_csv(args.attributes)
    manifest = dataio.apply_attributes(manifest, attrs)

    ages = [r.attributes["age"] for r in manifest.records if "age" in r.attributes]
    if ages:
        binner = dataio.make_age_binner(ages, n_bins=args.bins)
    else:
        binner = dataio.AgeBinner(n_bins=args.bins, lo=0.0, hi=1.0)
    seed = args.seed if args.seed is not None else 0
    train_m, test_m = dataio.split_train_test(manifest, args.train_frac, binner, seed=seed)

    dataio.save_manifest(train_m, out / "train_manifest.jsonl")
    dataio.save_manifest(test_m, out / "test_manifest.jsonl")
    write_json(out / "age_binner.json", binner.to_dict())

    vocabs = {"speaker": dataio.build_speaker_vocab(train_m).to_dict()}
    if any("nationality" in r.attributes for r in train_m.records):
        vocabs["nationality"] = dataio.build_nationality_vocab(train_m).to_dict()
    if any("gender" in r.attributes for r in train_m.records):
        vocabs["gender"] = dataio.build_gender_vocab(train_m).to_dict()
    write_json(out / "vocabs.json", vocabs)

    def hist(side):
        counts = [0] * binner.n_bins
        for rec in side.records:
            age = rec.attributes.get("age")
            if age is not None:
                counts[dataio.bin_age(binner, float(age))] += 1
        return counts

    train_hist, test_hist = hist(train_m), hist(test_m)
    edges = binner.edges.tolist()
    plots.write_csv(
        out / "age_hist.csv",
        ["bin", "lo", "hi", "train_count", "test_count"],
        [
            [i, edges[i], edges[i + 1], train_hist[i], test_hist[i]]
            for i in range(binner.n_bins)
        ],
    )
    plots.save_split_age_histograms(edges, train_hist, test_hist, out / "age_hist.png")

    th = np.asarray(train_hist, dtype=float)
    xh = np.asarray(test_hist, dtype=float)
    report = {
        "train_utterances": len(train_m),
        "test_utterances": len(test_m),
        "train_fraction": len(train_m) / max(len(manifest), 1),
        "train_recordings": len({r.rec_id for r in train_m.records}),
        "test_recordings": len({r.rec_id for r in test_m.records}),
        "train_speakers": len(train_m.speakers()),
        "test_speakers": len(test_m.speakers()),
        "age_hist_l1": (
            float(np.abs(th / th.sum() - xh / xh.sum()).sum())
            if th.sum() > 0 and xh.sum() > 0 else None
        ),
        "age_bin_edges": edges,
        "train_age_hist": train_hist,
        "test_age_hist": test_hist,
    }
    write_json(out / "summary.json", report)
    print(f"prepare: {len(train_m)} train / {len(test_m)} test utterances -> {out}")
    return 0


# ---------------------------------------------------------------------------
# compute-features
# ---------------------------------------------------------------------------


def cmd_compute_features(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    feat_dir = out / "features"
    cfg = frontend.MfccConfig(mean_subtract=not args.no_cms)
    records = []
    listing = Path(args.listing)
    if not listing.exists():
        raise DataError(f"listing {listing} does not exist")
    with open(listing, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{listing}: line {lineno}: invalid JSON: {exc}") from exc
            for key in ("utt_id", "speaker_id", "wav"):
                if key not in obj:
                    raise DataError(f"{listing}: line {lineno}: missing key {key!r}")
            wav_path = Path(obj["wav"])
            if not wav_path.is_absolute():
                wav_path = listing.resolve().parent / wav_path
            wav = frontend.read_wav(wav_path)
            start = float(obj.get("start_time", 0.0))
            end = float(obj.get("end_time", len(wav.samples) / wav.sample_rate))
            lo = int(round(start * wav.sample_rate))
            hi = int(round(end * wav.sample_rate))
            clip = frontend.Waveform(wav.samples[lo:hi], wav.sample_rate)
            feats = frontend.compute_mfcc(clip, cfg)
            feat_path = feat_dir / f"{obj['utt_id']}.feat1"
            dataio.write_features(feat_path, feats)
            records.append(dataio.UtteranceRecord(
                utt_id=str(obj["utt_id"]),
                rec_id=str(obj.get("rec_id", obj["utt_id"])),
                speaker_id=str(obj["speaker_id"]),
                feature_path=str(feat_path.relative_to(out)),
                num_frames=feats.shape[0],
                start_time=start,
                end_time=end,
                attributes=dict(obj.get("attributes", {})),
            ))
    manifest = dataio.Manifest(tuple(records), provenance=str(listing))
    dataio.save_manifest(manifest, out / "manifest.jsonl")
    write_json(out / "summary.json", {
        "utterances": len(records),
        "feature_dim": cfg.n_ceps,
        "frames_total": int(sum(r.num_frames for r in records)),
    })
    print(f"compute-features: {len(records)} utterances -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train / finetune
# ---------------------------------------------------------------------------


def _run_training(args, finetune: bool) -> int:
    require = ("train", "finetune") if finetune else ("train",)
    cfg = load_config(args.config, require=require)
    out = _prepare_out_dir(args.out, args.force)
    train_manifest = _load_manifest_rebased(args.train_manifest)
    valid_manifest = _load_manifest_rebased(args.valid_manifest) if args.valid_manifest else None

    run_cfg = cfg.train if not finetune else cfg.finetune
    if args.seed is not None:
        run_cfg = dataclasses.replace(run_cfg, seed=args.seed)

    (out / "config.json").write_text(canonical_json(cfg.raw), encoding="utf-8")
    log_path = out / "log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        def sink(entry):
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")

        if finetune:
            ckpt = load_checkpoint(args.checkpoint)
            result = training.finetune(
                ckpt, run_cfg, train_manifest, valid_manifest=valid_manifest,
                log_sink=sink,
            )
        else:
            result = training.train(
                run_cfg, cfg.model, train_manifest, valid_manifest=valid_manifest,
                speaker_head=cfg.speaker_head, log_sink=sink,
            )

    save_checkpoint(result.final, out / "checkpoint_final.ckpt")
    if result.best is not None:
        save_checkpoint(result.best, out / "checkpoint_best.ckpt")
    if result.warmup is not None:
        save_checkpoint(result.warmup, out / "checkpoint_warmup.ckpt")
    write_json(out / "summary.json", result.summary)
    if result.diverged:
        print(f"{'finetune' if finetune else 'train'}: diverged; last good checkpoint kept in {out}",
              file=sys.stderr)
        return 4
    print(f"{'finetune' if finetune else 'train'}: {result.final.iteration} iterations -> {out}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, finetune=False)


def cmd_finetune(args) -> int:
    return _run_training(args, finetune=True)


# ---------------------------------------------------------------------------
# make-trials
# ---------------------------------------------------------------------------


def cmd_make_trials(args) -> int:
    test_manifest = dataio.load_manifest(args.test_manifest)
    if args.train_manifest:
        train_speakers = set(dataio.load_manifest(args.train_manifest).speakers())
    elif args.exclude_speakers:
        exclude_path = Path(args.exclude_speakers)
        if not exclude_path.exists():
            raise DataError(f"speaker exclusion list {exclude_path} does not exist")
        train_speakers = {
            line.strip() for line in exclude_path.read_text().splitlines() if line.strip()
        }
    else:
        train_speakers = set()
    trials = evaluation.make_trials(
        test_manifest, train_speakers, n_per_speaker=args.n_per_speaker, seed=args.seed
    )
    evaluation.write_trials(trials, args.out)
    n_tgt = sum(1 for t in trials if t.target)
    print(f"make-trials: {n_tgt} target / {len(trials) - n_tgt} nontarget -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval-verify
# ---------------------------------------------------------------------------


def _embedder(model, features, checkpoint_path):
    """Per-record embedding function, optionally disk-cached via
    MTL_EMBED_CACHE keyed on the checkpoint contents."""
    cache_root = os.environ.get(EMBED_CACHE_ENV)
    min_frames = model.extractor.config.min_frames
    cache_dir = None
    if cache_root:
        digest = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()[:16]
        cache_dir = Path(cache_root) / digest
        cache_dir.mkdir(parents=True, exist_ok=True)

    def embed(record):
        if cache_dir is not None:
            cached = cache_dir / f"{record.utt_id}.feat1"
            if cached.exists():
                return dataio.read_features(cached)[0]
        feats = features(record)
        if feats.shape[0] < min_frames:
            feats = training.wrap_rows(feats, min_frames)
        emb = extract_embedding(model, feats)
        if cache_dir is not None:
            dataio.write_features(cache_dir / f"{record.utt_id}.feat1", emb.reshape(1, -1))
        return emb

    return embed


def cmd_eval_verify(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    manifest = _load_manifest_rebased(args.manifest)
    trials = evaluation.read_trials(args.trials)
    by_utt = manifest.by_utt_id()
    needed = sorted({t.enrol_utt for t in trials} | {t.test_utt for t in trials})
    missing = [u for u in needed if u not in by_utt]
    if missing:
        raise DataError(f"trials reference utt_ids absent from the manifest: {missing[:10]}")

    embed = _embedder(model, training.FeatureStore(), args.checkpoint)
    embeddings = {u: embed(by_utt[u]) for u in needed}
    scores = [
        evaluation.cosine_score(embeddings[t.enrol_utt], embeddings[t.test_utt])
        for t in trials
    ]
    eer, threshold = evaluation.compute_eer(list(zip(scores, (t.target for t in trials))))

    evaluation.write_trials(trials, out / "scores.txt", scores=scores)
    tgt = [s for s, t in zip(scores, trials) if t.target]
    non = [s for s, t in zip(scores, trials) if not t.target]
    sweep = sorted(set(scores))
    rows = []
    for thr in sweep:
        frr = sum(1 for s in tgt if s < thr) / len(tgt)
        far = sum(1 for s in non if s >= thr) / len(non)
        rows.append([f"{thr:.6f}", f"{far:.6f}", f"{frr:.6f}"])
    plots.write_csv(out / "roc_sweep.csv", ["threshold", "far", "frr"], rows)
    plots.save_score_histogram(tgt, non, threshold, out / "score_hist.png")
    write_json(out / "summary.json", {
        "eer": eer,
        "threshold": threshold,
        "n_trials": len(trials),
        "n_target": len(tgt),
        "n_nontarget": len(non),
    })
    print(f"eval-verify: EER {100 * eer:.2f}% at threshold {threshold:.4f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval-diarize
# ---------------------------------------------------------------------------


def _read_k_table(path) -> dict[str, int]:
    if not Path(path).exists():
        raise DataError(f"k table {path} does not exist")
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno}: expected '<rec_id> <k>'")
        try:
            table[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: bad speaker count {parts[1]!r}") from exc
    return table


def cmd_eval_diarize(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    recordings = _load_manifest_rebased(args.recordings)
    refs = evaluation.parse_rttm(args.ref_rttm)
    k_table = _read_k_table(args.k_table)
    unseen = None
    if args.unseen:
        unseen_path = Path(args.unseen)
        if not unseen_path.exists():
            raise DataError(f"unseen speaker list {unseen_path} does not exist")
        unseen = {
            line.strip() for line in unseen_path.read_text().splitlines() if line.strip()
        }
    features = training.FeatureStore()

    def score_one(rec):
        if rec.rec_id not in refs:
            raise DataError(f"recording {rec.rec_id!r} has no reference RTTM")
        if rec.rec_id not in k_table:
            raise DataError(f"recording {rec.rec_id!r} has no entry in the k table")
        ref = refs[rec.rec_id]
        sad = evaluation.sad_from_reference(ref)
        feats = features(rec)
        hyp = evaluation.diarize(
            model, feats, sad, k_table[rec.rec_id],
            frames_per_second=args.frames_per_second,
        )
        der_all = evaluation.compute_der(ref, hyp, mode="all", collar=args.collar)
        der_unseen = None
        unseen_note = None
        if unseen is not None:
            try:
                der_unseen = evaluation.compute_der(
                    ref, hyp, mode="unseen", unseen_speakers=unseen, collar=args.collar
                )
            except DataError as exc:
                unseen_note = str(exc)
        return rec.rec_id, hyp, der_all, der_unseen, unseen_note

    ordered = sorted(recordings.records, key=lambda r: r.rec_id)
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as ex:
            results = list(ex.map(score_one, ordered))
    else:
        results = [score_one(rec) for rec in ordered]

    hyps = [hyp for _, hyp, _, _, _ in results]
    evaluation.write_rttm(hyps, out / "hypothesis.rttm")

    per_rec = {}
    for rec_id, _, der_all, der_unseen, note in results:
        entry = {"all": der_all.to_json_obj()}
        entry["unseen"] = der_unseen.to_json_obj() if der_unseen else None
        if note:
            entry["unseen_note"] = note
        per_rec[rec_id] = entry

    agg = {"all": evaluation.aggregate_der(d for _, _, d, _, _ in results).to_json_obj()}
    unseen_parts = [d for _, _, _, d, _ in results if d is not None]
    agg["unseen"] = evaluation.aggregate_der(unseen_parts).to_json_obj() if unseen_parts else None

    plots.write_csv(
        out / "der_per_recording.csv",
        ["rec_id", "der_all", "der_unseen", "miss", "false_alarm", "confusion", "scored_time"],
        [
            [
                rec_id,
                f"{d_all.der:.6f}",
                f"{d_un.der:.6f}" if d_un else "",
                f"{d_all.miss:.3f}",
                f"{d_all.false_alarm:.3f}",
                f"{d_all.confusion:.3f}",
                f"{d_all.total_scored_time:.3f}",
            ]
            for rec_id, _, d_all, d_un, _ in results
        ],
    )
    plots.save_der_bars(
        [r for r, *_ in results],
        [d.der for _, _, d, _, _ in results],
        [d.der if d else None for _, _, _, d, _ in results],
        out / "der_bars.png",
    )
    write_json(out / "summary.json", {"aggregate": agg, "per_recording": per_rec})
    line = f"eval-diarize: DER(all) {100 * agg['all']['der']:.2f}%"
    if agg["unseen"]:
        line += f", DER(unseen) {100 * agg['unseen']['der']:.2f}%"
    print(line + f" -> {out}")
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def cmd_plot(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    manifest = dataio.load_manifest(args.manifest)
    if args.kind == "age":
        ages = [float(r.attributes["age"]) for r in manifest.records if "age" in r.attributes]
        if not ages:
            raise DataError("no record in the manifest carries an age attribute")
        binner = dataio.make_age_binner(ages, n_bins=args.bins)
        counts = [0] * binner.n_bins
        for age in ages:
            counts[dataio.bin_age(binner, age)] += 1
        edges = binner.edges.tolist()
        plots.write_csv(
            out / "age_counts.csv",
            ["bin", "lo", "hi", "count"],
            [[i, edges[i], edges[i + 1], counts[i]] for i in range(binner.n_bins)],
        )
        plots.save_age_histogram(edges, counts, out / "age_hist.png")
        write_json(out / "summary.json", {"kind": "age", "bins": counts, "edges": edges})
    else:
        nat_of = dataio.speaker_attribute_map(manifest, "nationality")
        if not nat_of:
            raise DataError("no record in the manifest carries a nationality attribute")
        counts: dict[str, int] = {}
        for nat in nat_of.values():
            counts[nat] = counts.get(nat, 0) + 1
        shown = sorted(
            (n for n, c in counts.items() if c > args.min_shown),
            key=lambda n: (-counts[n], n),
        )
        other = sum(c for n, c in counts.items() if n not in shown)
        labels = shown + (["Other"] if other else [])
        values = [counts[n] for n in shown] + ([other] if other else [])
        plots.write_csv(out / "nationality_counts.csv", ["nationality", "speakers"],
                        list(zip(labels, values)))
        plots.save_bar_counts(labels, values, out / "nationality_bars.png",
                              "Speaker nationality distribution", xlabel="nationality")
        write_json(out / "summary.json",
                   {"kind": "nationality", "labels": labels, "counts": values})
    print(f"plot: {args.kind} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spkmtl",
        description="Multi-task speaker embedding training and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--force", action="store_true", help="overwrite a completed run")
        p.add_argument("--workers", type=int, default=1, help="parallel workers")

    p = sub.add_parser("prepare", help="build train/test manifests from labels")
    p.add_argument("--utterances", required=True, help="utterance listing (JSONL manifest)")
    p.add_argument("--attributes", required=True, help="attribute CSV")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--bins", type=int, default=10, help="age bins for split balancing")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("compute-features", help="extract MFCC features from WAV files")
    p.add_argument("--listing", required=True, help="JSONL with utt_id/speaker_id/wav per line")
    p.add_argument("--no-cms", action="store_true", help="disable cepstral mean subtraction")
    common(p)
    p.set_defaults(func=cmd_compute_features)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--config", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--valid-manifest", default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new label set")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--valid-manifest", default=None)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("make-trials", help="generate verification trials")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--train-manifest", default=None, help="speakers here are excluded")
    p.add_argument("--exclude-speakers", default=None, help="text file of speaker ids")
    p.add_argument("--n-per-speaker", type=int, default=15)
    p.add_argument("--out", required=True, help="output trial list file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_trials)

    p = sub.add_parser("eval-verify", help="score trials and report EER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--manifest", required=True)
    common(p)
    p.set_defaults(func=cmd_eval_verify)

    p = sub.add_parser("eval-diarize", help="diarize recordings and report DER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recordings", required=True, help="recording-level manifest (JSONL)")
    p.add_argument("--ref-rttm", required=True, help="reference RTTM (also provides SAD)")
    p.add_argument("--k-table", required=True, help="text file: '<rec_id> <k>' per line")
    p.add_argument("--unseen", default=None, help="text file of unseen speaker ids")
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--frames-per-second", type=float, default=100.0)
    common(p)
    p.set_defaults(func=cmd_eval_diarize)

    p = sub.add_parser("plot", help="attribute distribution figure + CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", required=True, choices=("age", "nationality"))
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--min-shown", type=int, default=50,
                   help="nationalities with more speakers than this get their own bar")
    common(p)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except SchemaError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
