"""Command-line entry point wiring every stage into a reproducible pipeline.

Each subcommand reads its inputs from explicit flags, defaulting to the files an
earlier stage wrote into the same ``--out`` directory, so a whole run is

    ecgbert synth --out run && ecgbert preprocess --out run && ecgbert fit-vocab --out run
    ecgbert tokenize --out run && ecgbert pretrain --out run && ecgbert finetune --out run
    ecgbert evaluate --out run
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import PipelineConfig, stage_seed
from .errors import DataError
from .pipeline import ProcessedWindow, collect_waves, process_window, token_sentences, window_sentences
from .sentences import collate, read_corpus, write_corpus
from .signal_io import EcgRecord, Window, read_csv, read_wfdb, resample, window, write_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


class StageError(Exception):
    """Data failure tagged with the stage and input that caused it."""

    def __init__(self, stage: str, source, err: Exception):
        super().__init__(f"{stage}: {source}: {err}")


# ---------------------------------------------------------------- file helpers


def _read_text(path: Path, stage: str) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise StageError(stage, path, FileNotFoundError("file not found")) from None


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_plain))


def _load_records(path: Path, fs: int) -> list[tuple[EcgRecord, list | None]]:
    """Records plus optional annotations from a synth manifest, a directory, or one file."""
    path = Path(path)
    if path.is_dir():
        man = path / "manifest.json"
        if man.exists():
            return _load_records(man, fs)
        files = sorted(list(path.glob("*.hea")) + list(path.glob("*.csv")))
        if not files:
            raise DataError(f"no .hea or .csv records in {path}")
        return [r for f in files for r in _load_records(f, fs)]
    if path.suffix == ".json":
        man = json.loads(_read_text(path, "preprocess"))
        out = []
        for rec in man["records"]:
            r = read_csv(_read_text(path.parent / rec["signal"], "preprocess"), int(man["fs"]), rec["record_id"], rec["patient_id"])
            ann = None
            if rec.get("annotations"):
                ann = ev.read_annotations(_read_text(path.parent / rec["annotations"], "preprocess"))
            out.append((r, ann))
        return out
    if path.suffix == ".hea":
        dat = path.with_suffix(".dat")
        if not dat.exists():
            raise DataError(f"{path}: missing {dat.name}")
        rec = read_wfdb(_read_text(path, "preprocess"), dat.read_bytes())
    elif path.suffix == ".csv":
        rec = read_csv(_read_text(path, "preprocess"), fs, path.stem, path.stem)
    else:
        raise DataError(f"unsupported input {path}")
    side = path.with_suffix(".tsv")
    ann = ev.read_annotations(side.read_text()) if side.exists() else None
    return [(rec, ann)]


def _save_windows(path: Path, windows: list[ProcessedWindow], starts: list[int]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        signals=np.stack([w.signal for w in windows]) if windows else np.zeros((0, 0)),
        window_ids=np.array([w.window_id for w in windows], dtype=str),
        patient_ids=np.array([w.patient_id for w in windows], dtype=str),
        labels=np.array(["" if w.label is None else w.label for w in windows], dtype=str),
        starts=np.array(starts, dtype=np.int64),
    )


def _load_windows(path: Path, cfg: PipelineConfig, stage: str) -> list[ProcessedWindow]:
    """Cleaned windows re-delineated with the configured parameters (deterministic)."""
    try:
        z = np.load(path)
    except FileNotFoundError:
        raise StageError(stage, path, FileNotFoundError("file not found; run preprocess first")) from None
    except (OSError, ValueError) as e:
        raise StageError(stage, path, e) from None
    params = cfg.stage_params()
    fs = cfg["fs"]
    out = []
    from .delineation import delineate, detect_r_peaks

    for sig, wid, pid, lab in zip(z["signals"], z["window_ids"], z["patient_ids"], z["labels"]):
        x = np.asarray(sig, dtype=np.float64)
        beats = delineate(x, fs, detect_r_peaks(x, fs, params.detector), params.delineation)
        out.append(ProcessedWindow(str(wid), str(pid), x, beats, str(lab) or None))
    return out


def _class_names(labels: list[str]) -> tuple[str, ...]:
    uniq = sorted(set(labels), key=lambda s: (s.upper() not in ev.NORMAL_LABELS, s))
    return tuple(uniq)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg, seed, out: Path) -> None:
    from .synthgen import SynthSpec, generate_corpus

    s = cfg["synth"]
    n_p = args.patients if args.patients is not None else s["n_patients"]
    n_w = args.windows if args.windows is not None else s["windows_per_patient"]
    corpus = generate_corpus(
        n_p, n_w, SynthSpec(fs=cfg["fs"], duration_s=cfg["window_seconds"]), stage_seed(seed, "synth"), s["irregular_fraction"], s["snr_db"]
    )
    records = []
    for w in corpus.windows:
        rid = w.record.record_id
        (out / "signals").mkdir(parents=True, exist_ok=True)
        (out / "annotations").mkdir(parents=True, exist_ok=True)
        (out / "signals" / f"{rid}.csv").write_text(write_csv(w.record.samples))
        label = "AFIB" if w.label else "N"
        (out / "annotations" / f"{rid}.tsv").write_text(ev.write_annotations([(0, label)]))
        records.append(
            {
                "record_id": rid,
                "patient_id": w.patient_id,
                "signal": f"signals/{rid}.csv",
                "annotations": f"annotations/{rid}.tsv",
                "label": label,
                "morphology_id": w.morphology_id,
                "r_indices": w.truth.r_indices,
                "segments": [[s.wave_type.value, s.onset, s.offset] for s in w.truth.segments],
                "rr_intervals": w.truth.rr_intervals,
            }
        )
    _write_json(out / "manifest.json", {"fs": cfg["fs"], "seed": seed, "records": records})
    print(f"synth: wrote {len(records)} records to {out}")


def cmd_preprocess(args, cfg, seed, out: Path) -> None:
    src = Path(args.input) if args.input else out / "manifest.json"
    params = cfg.stage_params()
    fs = cfg["fs"]
    windows, starts = [], []
    for rec, ann in _load_records(src, fs):
        try:
            if rec.fs != fs:
                rec = resample(rec, fs)
            for k, w in enumerate(window(rec, cfg["window_seconds"])):
                label = ev.majority_label(w, ann) if ann else None
                wid = f"{rec.record_id}_{k:03d}"
                windows.append(process_window(w.samples, fs, params, wid, rec.patient_id or rec.record_id, label))
                starts.append(w.start_sample)
        except (DataError, ValueError) as e:
            raise StageError("preprocess", rec.record_id, e) from None
    if not windows:
        raise DataError(f"preprocess: no complete {cfg['window_seconds']} s windows in {src}")
    _save_windows(out / "windows.npz", windows, starts)
    print(f"preprocess: {len(windows)} windows -> {out / 'windows.npz'}")


def cmd_delineate(args, cfg, seed, out: Path) -> None:
    from .delineation import window_segments

    windows = _load_windows(Path(args.windows) if args.windows else out / "windows.npz", cfg, "delineate")
    lines = []
    for i, w in enumerate(windows):
        for s in window_segments(w.beats, len(w.signal)):
            lines.append(f"{i}\t{s.wave_type.value}\t{s.onset}\t{s.offset}\n")
    (out / "segments.tsv").write_text("".join(lines))
    print(f"delineate: {sum(len(w.beats) for w in windows)} beats in {len(windows)} windows -> {out / 'segments.tsv'}")


def cmd_fit_vocab(args, cfg, seed, out: Path) -> None:
    from .vocabulary import fit_vocabulary

    windows = _load_windows(Path(args.windows) if args.windows else out / "windows.npz", cfg, "fit-vocab")
    vocab = fit_vocabulary(collect_waves(windows), cfg.vocab_config(stage_seed(seed, "vocab")))
    (out / "vocab.json").write_text(vocab.to_json())
    print(f"fit-vocab: {vocab.n_centroids} centroids, fingerprint {vocab.fingerprint[:12]} -> {out / 'vocab.json'}")


def _vocab(args, out: Path, stage: str):
    from .vocabulary import Vocabulary

    path = Path(args.vocab) if getattr(args, "vocab", None) else out / "vocab.json"
    try:
        return Vocabulary.from_json(_read_text(path, stage))
    except DataError as e:
        raise StageError(stage, path, e) from None


def cmd_tokenize(args, cfg, seed, out: Path) -> None:
    vocab = _vocab(args, out, "tokenize")
    windows = _load_windows(Path(args.windows) if args.windows else out / "windows.npz", cfg, "tokenize")
    max_len = cfg["sentences"]["max_seq_len"]
    sents = token_sentences(windows, vocab, np.random.default_rng(stage_seed(seed, "sentences")), max_len)
    header = f"# vocab_fingerprint={vocab.fingerprint}\n"
    (out / "corpus.tsv").write_text(header + write_corpus(sents))
    seqs = [s for _, s in window_sentences(windows, vocab, max_len)]
    (out / "sequences.tsv").write_text(header + write_corpus(seqs))
    print(f"tokenize: {len(sents)} sentences -> corpus.tsv, {len(seqs)} window sequences -> sequences.tsv")


def _read_token_file(path: Path, stage: str):
    text = _read_text(path, stage)
    fp = None
    first = text.split("\n", 1)[0]
    if first.startswith("# vocab_fingerprint="):
        fp = first.split("=", 1)[1].strip()
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    try:
        return read_corpus(body), fp
    except DataError as e:
        raise StageError(stage, path, e) from None


def _signals(windows_path: Path, stage: str) -> tuple[dict, dict, dict]:
    try:
        z = np.load(windows_path)
    except FileNotFoundError:
        raise StageError(stage, windows_path, FileNotFoundError("file not found")) from None
    ids = [str(w) for w in z["window_ids"]]
    sig = {w: s for w, s in zip(ids, z["signals"])}
    pids = {w: str(p) for w, p in zip(ids, z["patient_ids"])}
    labels = {w: str(lab) for w, lab in zip(ids, z["labels"])}
    return sig, pids, labels


def cmd_pretrain(args, cfg, seed, out: Path) -> None:
    from .model import load_checkpoint
    from .training import JsonlLog, pretrain

    vocab = _vocab(args, out, "pretrain")
    sents, fp = _read_token_file(Path(args.corpus) if args.corpus else out / "corpus.tsv", "pretrain")
    sig, _, _ = _signals(Path(args.windows) if args.windows else out / "windows.npz", "pretrain")
    over = {} if args.epochs is None else {"epochs": args.epochs}
    tcfg = cfg.train_config("pretrain", stage_seed(seed, "pretrain"), **over)
    log_path = out / "pretrain_log.jsonl"
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
    elif log_path.exists():
        log_path.unlink()
    ck = pretrain(
        sents, sig, tcfg, cfg.model_config(stage_seed(seed, "model")), vocab.fingerprint, fp, out / "checkpoints", resume, JsonlLog(log_path)
    )
    print(f"pretrain: {ck.extra['epoch']} epochs, {ck.extra['step']} steps -> {out / 'checkpoints' / 'final'}")


def _labeled(sents, sig, pids, labels, task, class_names=None):
    from .training import LabeledSet

    keys = [pids[s.window_ref] if task in ("identify",) else labels[s.window_ref] for s in sents]
    if any(k == "" for k in keys):
        raise DataError("some windows have no label; supply annotations at preprocess time")
    names = class_names or _class_names(keys)
    missing = set(keys) - set(names)
    if missing:
        raise DataError(f"labels {sorted(missing)} not among trained classes {list(names)}")
    return LabeledSet(list(sents), [names.index(k) for k in keys], names)


def _split(sents, pids, cfg, seed):
    mode = cfg["split"]["mode"]
    frac = cfg["split"]["test_fraction"]
    if mode == "inter_patient":
        train_p, test_p = ev.inter_patient_split(sorted(set(pids[s.window_ref] for s in sents)), frac, seed)
        test_p = set(test_p)
        test = [s.window_ref for s in sents if pids[s.window_ref] in test_p]
    else:
        rng = np.random.default_rng(seed)
        test = []
        by_p: dict[str, list[str]] = {}
        for s in sents:
            by_p.setdefault(pids[s.window_ref], []).append(s.window_ref)
        for p in sorted(by_p):
            refs = by_p[p]
            k = max(1, int(round(frac * len(refs))))
            test.extend(refs[i] for i in sorted(rng.permutation(len(refs))[:k]))
    test_set = set(test)
    train = [s.window_ref for s in sents if s.window_ref not in test_set]
    return {"mode": mode, "seed": seed, "train": train, "test": sorted(test_set)}


def cmd_finetune(args, cfg, seed, out: Path) -> None:
    from .model import load_checkpoint
    from .training import JsonlLog, finetune

    over = {}
    if args.task:
        over.update(cfg.train_config("finetune").for_task(args.task).to_dict())
        over.pop("seed")
    if args.epochs is not None:
        over["epochs"] = args.epochs
    tcfg = cfg.train_config("finetune", stage_seed(seed, "finetune"), **over)
    ck = load_checkpoint(Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "final")
    vocab = _vocab(args, out, "finetune")
    sents, fp = _read_token_file(Path(args.sequences) if args.sequences else out / "sequences.tsv", "finetune")
    if fp is not None and fp != vocab.fingerprint:
        raise StageError("finetune", "sequences.tsv", DataError("built with a different vocabulary"))
    sig, pids, labels = _signals(Path(args.windows) if args.windows else out / "windows.npz", "finetune")
    split = _split(sents, pids, cfg, stage_seed(seed, "split"))
    test_refs = set(split["test"])
    full = _labeled(sents, sig, pids, labels, tcfg.task)
    idx_tr = [i for i, s in enumerate(sents) if s.window_ref not in test_refs]
    idx_te = [i for i, s in enumerate(sents) if s.window_ref in test_refs]
    from .training import LabeledSet

    def sub(ii):
        return LabeledSet([full.sentences[i] for i in ii], full.labels[ii], full.class_names)

    log_path = out / "finetune_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    res = finetune(ck, sub(idx_tr), sub(idx_te), sig, tcfg, vocab.fingerprint, out / "finetuned", JsonlLog(log_path), split["seed"])
    split["class_names"] = list(full.class_names)
    split["task"] = tcfg.task
    _write_json(out / "split.json", split)
    if res.report is not None:
        (out / "report.json").write_text(ev.dump_report(res.report))
    acc = None if res.report is None else res.report["overall"]["accuracy"]
    print(f"finetune: task {tcfg.task}, held-out accuracy {acc} -> {out / 'finetuned' / 'final'}")


def cmd_evaluate(args, cfg, seed, out: Path) -> None:
    if args.table2:
        rows = ev.table2_report()
        _write_json(out / "table2.json", rows)
        for r in rows:
            flag = "ok" if r["ok"] else "MISMATCH"
            print(f"{r['class']} {r['metric']:<11} computed {r['computed']:.4f} published {r['published']:.2f} {flag}")
        return
    from .model import load_checkpoint
    from .training import evaluate_model

    ck = load_checkpoint(Path(args.checkpoint) if args.checkpoint else out / "finetuned" / "final")
    split = json.loads(_read_text(Path(args.split) if args.split else out / "split.json", "evaluate"))
    sents, _ = _read_token_file(Path(args.sequences) if args.sequences else out / "sequences.tsv", "evaluate")
    sig, pids, labels = _signals(Path(args.windows) if args.windows else out / "windows.npz", "evaluate")
    test = set(split["test"])
    data = _labeled([s for s in sents if s.window_ref in test], sig, pids, labels, split["task"], tuple(split["class_names"]))
    report = evaluate_model(ck.model, data, sig, split["task"], split["seed"], cfg["sentences"]["max_seq_len"])
    (out / "report.json").write_text(ev.dump_report(report))
    print(f"evaluate: accuracy {report['overall']['accuracy']} on {len(data)} windows -> {out / 'report.json'}")


def cmd_inspect_attn(args, cfg, seed, out: Path) -> None:
    import torch

    from .model import load_checkpoint

    ck = load_checkpoint(Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "final")
    sents, _ = _read_token_file(Path(args.corpus) if args.corpus else out / "corpus.tsv", "inspect-attn")
    if not 0 <= args.index < len(sents):
        raise UsageError(f"--index {args.index} outside the corpus (0..{len(sents) - 1})")
    sig, _, _ = _signals(Path(args.windows) if args.windows else out / "windows.npz", "inspect-attn")
    s = sents[args.index]
    batch = collate([s], ck.model.cfg.max_seq_len, None, sig)
    with torch.no_grad():
        _, maps = ck.model.eval().encode(ck.model.embed(batch), batch.attention_mask, return_attention=True)
    doc = {
        "index": args.index,
        "window_ref": s.window_ref,
        "token_ids": list(s.token_ids),
        "layers": [m[0].numpy().round(6).tolist() for m in maps],
    }
    _write_json(out / f"attention_{args.index}.json", doc)
    print(f"inspect-attn: {len(maps)} layers x {maps[0].shape[1]} heads -> {out / f'attention_{args.index}.json'}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "delineate": cmd_delineate,
    "fit-vocab": cmd_fit_vocab,
    "tokenize": cmd_tokenize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "inspect-attn": cmd_inspect_attn,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="master seed; every stage seed derives from it")
    common.add_argument("--out", default=".", help="output directory; also the default location of stage inputs")
    common.add_argument("--threads", type=int, default=1, help="compute threads (default 1, bitwise reproducible)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. model.d_model=64")

    p = _Parser(prog="ecgbert", description="Wave-token ECG pipeline: preprocessing, vocabulary, pretraining and fine-tuning.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="write a labeled synthetic corpus (CSV + annotations + manifest)")
    s.add_argument("--patients", type=int, help="number of patients")
    s.add_argument("--windows", type=int, help="windows per patient")
    s = sub.add_parser("preprocess", parents=[common], help="resample, window and filter records into windows.npz")
    s.add_argument("--input", help="synth manifest, directory of .hea/.csv records, or one record")
    s = sub.add_parser("delineate", parents=[common], help="dump every wave segment to segments.tsv (window_index, type, onset, offset)")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s = sub.add_parser("fit-vocab", parents=[common], help="cluster waves into the token vocabulary (vocab.json)")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s = sub.add_parser("tokenize", parents=[common], help="write corpus.tsv (sentences) and sequences.tsv (whole windows)")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s.add_argument("--vocab", help="vocab.json from fit-vocab")
    s = sub.add_parser("pretrain", parents=[common], help="masked-token pretraining; checkpoints under checkpoints/")
    s.add_argument("--corpus", help="corpus.tsv from tokenize")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s.add_argument("--vocab", help="vocab.json from fit-vocab")
    s.add_argument("--epochs", type=int, help="override pretrain.epochs")
    s.add_argument("--resume", help="epoch checkpoint directory to continue from")
    s = sub.add_parser("finetune", parents=[common], help="attach a task head and train; writes split.json and report.json")
    s.add_argument("--checkpoint", help="pretrained checkpoint directory")
    s.add_argument("--sequences", help="sequences.tsv from tokenize")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s.add_argument("--vocab", help="vocab.json from fit-vocab")
    s.add_argument("--task", choices=["afib", "heartbeat", "apnea", "verify", "identify"], help="task defaults to apply")
    s.add_argument("--epochs", type=int, help="override finetune.epochs")
    s = sub.add_parser("evaluate", parents=[common], help="metrics report for a fine-tuned checkpoint on its held-out split")
    s.add_argument("--checkpoint", help="fine-tuned checkpoint directory")
    s.add_argument("--sequences", help="sequences.tsv from tokenize")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s.add_argument("--split", help="split.json from finetune")
    s.add_argument("--table2", action="store_true", help="recompute the published heartbeat table from its counts instead")
    s = sub.add_parser("inspect-attn", parents=[common], help="dump attention matrices for one corpus sentence")
    s.add_argument("--checkpoint", help="checkpoint directory")
    s.add_argument("--corpus", help="corpus.tsv from tokenize")
    s.add_argument("--windows", help="windows.npz from preprocess")
    s.add_argument("--index", type=int, default=0, help="sentence index in the corpus")
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        text = _read_text(Path(args.config), args.command) if args.config else None
        try:
            cfg = PipelineConfig.load(text, args.set)
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"{args.command}: bad config: {e}") from None
        seed = args.seed if args.seed is not None else int(cfg["seed"])
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        import torch

        torch.set_num_threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
        COMMANDS[args.command](args, cfg, seed, out)
        return EXIT_OK
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DataError as e:
        stage = getattr(locals().get("args"), "command", "ecgbert")
        print(f"error: {stage}: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
