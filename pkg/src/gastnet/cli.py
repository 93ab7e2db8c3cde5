"""``gastnet`` command line: synth, train, infer, eval, export-attention,
gradcheck and param-count."""
import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import numpy as np

from .data import (Pose2DSequence, Pose3DSequence, load_sequences, normalize, save_predictions,
                   save_sequences, synth_dataset)
from .errors import ConfigError, DataError, GastError
from .model import (GastNetConfig, build_model, infer_sequence, load_checkpoint,
                    pad_frames, param_count, save_checkpoint)
from .train import TrainConfig, evaluate, train, write_loss_csv

MODES = {"layer": "layer_by_layer", "frame": "single_frame"}

# flag name -> (config section, key); None values mean "not given"
MODEL_KEYS = {"rf": "receptive_field", "channels": "channels", "heads": "heads",
              "causal": "causal", "dropout": "dropout"}
ABLATIONS = {"no_kinematic": "use_kinematic", "no_symmetric": "use_symmetric",
             "no_bk": "use_bk", "no_ck": "use_ck"}
TRAIN_KEYS = {"epochs": "epochs", "batch": "batch_size", "lr": "lr0",
              "lr_decay": "lr_decay", "dropout": "dropout", "seed": "seed"}


def worker_count(n_jobs):
    cap = os.environ.get("GAST_THREADS")
    try:
        cap = int(cap) if cap else os.cpu_count() or 1
    except ValueError:
        raise ConfigError(f"GAST_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(cap, n_jobs))


def fan_out(fn, items):
    """Map ``fn`` over ``items`` on up to GAST_THREADS threads, keeping order."""
    items = list(items)
    n = worker_count(len(items))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def git_blob_hash(data):
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(path):
    if path is None:
        raise ConfigError("--out is required")
    os.makedirs(path, exist_ok=True)
    return path


def _settings(args):
    """Merge flags over the optional JSON config file over built-in defaults."""
    conf = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                conf = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: malformed JSON ({exc})") from exc
        if not isinstance(conf, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    merged = dict(conf)
    for key, val in vars(args).items():
        if val is not None and val is not False:
            merged[key] = val
    return merged


def _model_config(s):
    kw = {}
    for flag, key in MODEL_KEYS.items():
        if s.get(flag) is not None:
            kw[key] = s[flag]
    for flag, key in ABLATIONS.items():
        if s.get(flag):
            kw[key] = False
    return GastNetConfig(**kw)


def _train_config(s):
    kw = {key: s[flag] for flag, key in TRAIN_KEYS.items() if s.get(flag) is not None}
    kw["flip_augment"] = not s.get("no_flip", False)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = _out_dir(args.out)
    pairs = synth_dataset(seed=args.seed or 0, n_sequences=args.sequences, length=args.length)
    path = os.path.join(out, args.name)
    save_sequences(pairs, path)
    print(f"wrote {len(pairs)} sequences x {args.length} frames to {path}")
    return 0


def cmd_train(args):
    s = _settings(args)
    if not s.get("data"):
        raise ConfigError("--data is required")
    cfg = _model_config(s)
    tcfg = _train_config(s)
    pairs = load_sequences(s["data"])
    eval_pairs = load_sequences(s["eval_data"]) if s.get("eval_data") else None
    out = _out_dir(s.get("out"))
    started = _now()
    model = build_model(cfg, seed=tcfg.seed)

    def progress(row):
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.6g}  train {row['train_mpjpe_mm']:.3f} mm",
              flush=True)

    result = train(model, pairs, tcfg, eval_pairs=eval_pairs, progress=progress)
    blob = save_checkpoint(model, os.path.join(out, "checkpoint.gast"))
    write_loss_csv(result.log, os.path.join(out, "loss.csv"))
    summary = {"final_train_mpjpe_mm": result.final_train_mpjpe()}
    if eval_pairs is not None:
        last = result.log[-1] if result.log else {}
        summary["eval_mpjpe_mm"] = last.get("eval_mpjpe_mm")
        summary["eval_pmpjpe_mm"] = last.get("eval_pmpjpe_mm")
    manifest = {"model": cfg.to_dict(), "train": vars(tcfg).copy(), "seed": tcfg.seed,
                "data": os.path.abspath(s["data"]), "started": started, "finished": _now(),
                "checkpoint": "checkpoint.gast", "checkpoint_sha1": git_blob_hash(blob),
                "parameters": param_count(model), "metrics": summary}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"saved {out}/checkpoint.gast ({param_count(model)} parameters)")
    return 0


def _load(args):
    model = load_checkpoint(args.checkpoint)
    model.eval()
    pairs = load_sequences(args.data)
    skel = pairs[0][0].skeleton
    if skel != model.cfg.skeleton:
        raise ConfigError(f"data skeleton {skel!r} does not match checkpoint skeleton "
                          f"{model.cfg.skeleton!r}")
    return model, pairs


def cmd_infer(args):
    model, pairs = _load(args)
    out = _out_dir(args.out)
    mode = MODES[args.mode]
    flip = not args.no_flip
    seqs = [p2 for p2, _ in pairs]
    run = lambda: fan_out(lambda s: infer_sequence(model, s, mode, flip), seqs)
    if args.timing:
        run()  # warm-up
        t0 = time.perf_counter()
        preds = run()
        dt = time.perf_counter() - t0
        frames = sum(s.n_frames for s in seqs)
        print(f"mode {args.mode}  frames {frames}  seconds {dt:.4f}  fps {frames / dt:.1f}")
    else:
        preds = run()
    path = os.path.join(out, "predictions.json")
    save_predictions(preds, path)
    print(f"wrote {len(preds)} sequences to {path}")
    return 0


def cmd_eval(args):
    model, pairs = _load(args)
    if args.targets:
        targets = {p2.seq_id: p3 for p2, p3 in load_sequences_3d(args.targets)}
        pairs = [(p2, targets.get(p2.seq_id)) for p2, _ in pairs]
    missing = [p2.seq_id for p2, p3 in pairs if p3 is None]
    if missing:
        raise DataError(f"no 3D targets for sequence(s): {', '.join(missing)}")
    out = _out_dir(args.out)
    mode = MODES[args.mode]
    rows = fan_out(lambda p: evaluate(model, [p], mode, flip=not args.no_flip)["sequences"][0],
                   pairs)
    total = sum(r["frames"] for r in rows)
    agg = {"frames": total,
           "mpjpe_mm": sum(r["mpjpe_mm"] * r["frames"] for r in rows) / total,
           "p_mpjpe_mm": sum(r["p_mpjpe_mm"] * r["frames"] for r in rows) / total}
    for r in rows:
        print(f"{r['id']:>16s}  frames {r['frames']:6d}  MPJPE {r['mpjpe_mm']:9.3f} mm  "
              f"P-MPJPE {r['p_mpjpe_mm']:9.3f} mm")
    print(f"{'aggregate':>16s}  frames {total:6d}  MPJPE {agg['mpjpe_mm']:9.3f} mm  "
          f"P-MPJPE {agg['p_mpjpe_mm']:9.3f} mm")
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump({"mode": args.mode, "flip": not args.no_flip, "sequences": rows,
                   "aggregate": agg}, fh, indent=2)
    return 0


def load_sequences_3d(path):
    """Read 3D-only files (as written by ``infer``) or full datasets."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc})") from exc
    out = []
    for i, s in enumerate(doc.get("sequences", [])):
        if s.get("frames_3d") is None:
            continue
        sid = str(s.get("id", i))
        f3 = np.asarray(s["frames_3d"], dtype=np.float64)
        out.append((Pose2DSequence(doc["skeleton"], doc["fps"], np.zeros(f3.shape[:2] + (2,)),
                                   None, True, sid),
                    Pose3DSequence(doc["skeleton"], doc["fps"], f3, sid)))
    return out


def attention_frames(model, frames):
    """Head-averaged attention per block for every frame: (blocks, T, N, N)."""
    rf, k = model.receptive_field, model.cfg.kernel_size
    T = len(frames)
    record = []
    model.predict(pad_frames(np.asarray(frames, dtype=model.dtype), rf, model.cfg.causal)[None],
                  record=record)
    mats = []
    for b, adj in enumerate(record):
        # block b has seen k**(b+1) frames; align its time axis to the output frames
        spare = rf - k ** (b + 1)
        start = spare if model.cfg.causal else spare // 2
        mats.append(adj[0].mean(axis=0)[start:start + T])
    return np.stack(mats)


def cmd_export_attention(args):
    model, pairs = _load(args)
    if not model.cfg.use_bk:
        raise ConfigError("checkpoint has no data-dependent attention (trained with --no-bk)")
    N = model.skeleton.n_joints
    if args.joint is not None and not 0 <= args.joint < N:
        raise ConfigError(f"joint index {args.joint} out of range [0, {N})")
    out = _out_dir(args.out)
    path = os.path.join(out, "attention.csv")
    rows_i = range(N) if args.joint is None else [args.joint]
    with open(path, "w") as fh:
        fh.write("sequence,frame,block,joint," + ",".join(f"w{j}" for j in range(N)) + "\n")
        for p2, _ in pairs:
            mats = attention_frames(model, normalize(p2).frames)
            for t in range(mats.shape[1]):
                for b in range(mats.shape[0]):
                    for i in rows_i:
                        vals = ",".join(repr(float(v)) for v in mats[b, t, i])
                        fh.write(f"{p2.seq_id},{t},{b},{i},{vals}\n")
    print(f"wrote attention rows to {path}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_gradcheck
    results = run_gradcheck(args.case, seed=args.seed or 0)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:24s} max rel err {r.max_rel_error:.3e}  ({r.checked} entries)  {status}")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    bad = [r.name for r in results if not r.passed]
    if bad:
        print(f"gastnet: error: gradient check failed for {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


def cmd_param_count(args):
    cfg = _model_config(_settings(args))
    total, groups = param_count(build_model(cfg, seed=0), per_module=True)
    for name, n in groups.items():
        print(f"{name:16s} {n:10d}")
    print(f"{'total':16s} {total:10d}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--rf", type=int, choices=(9, 27, 81, 243), help="receptive field (frames)")
    p.add_argument("--channels", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--causal", action="store_true", default=None)
    p.add_argument("--dropout", type=float)
    p.add_argument("--no-kinematic", action="store_true", help="first-order kernel in place of the kinematic one")
    p.add_argument("--no-symmetric", action="store_true")
    p.add_argument("--no-bk", action="store_true", help="drop the data-dependent attention")
    p.add_argument("--no-ck", action="store_true", help="drop the free global adjacency")
    p.add_argument("--config", help="JSON file of flag defaults")


def build_parser():
    parser = argparse.ArgumentParser(prog="gastnet", description="2D-to-3D pose lifting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired 2D/3D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synth.json")
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--out")
    _model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-flip", action="store_true", help="disable flip augmentation")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("infer", cmd_infer, "lift 2D sequences to 3D"),
                             ("eval", cmd_eval, "MPJPE / P-MPJPE against 3D targets"),
                             ("export-attention", cmd_export_attention,
                              "dump head-averaged attention rows as CSV")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name != "export-attention":
            p.add_argument("--mode", choices=tuple(MODES), default="layer")
            p.add_argument("--no-flip", action="store_true", help="disable test-time flip averaging")
        if name == "infer":
            p.add_argument("--timing", action="store_true", help="print frames per second")
        if name == "eval":
            p.add_argument("--targets", help="3D file whose sequences replace the data's targets")
        if name == "export-attention":
            p.add_argument("--joint", type=int, help="joint row to export (all rows if omitted)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", action="append", help="run only this case (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("param-count", help="parameter counts for a configuration")
    _model_flags(p)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GastError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"gastnet: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
