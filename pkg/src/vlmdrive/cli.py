"""``vlmdrive`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import BDD_OIA, DESK_MODEL, DESK_TRAIN, PSI, ModelConfig, TrainConfig
from .data import (DatasetManifest, build_object_bag, count_categories, load_pseudo_cams,
                   load_split, sidecar_path, supercategory_counts, write_pseudo_cam, DEFAULT_LEXICON)
from .errors import UsageError, VlmDriveError
from .metrics import ConfusionCounts, f1_report, format_report, write_report
from .mil import explain, topk_indices
from .synthetic import SyntheticSpec, explanation_precision, generate_synthetic, load_planted
from .vlm import DEFAULT_TOKEN_ENV, VlmEndpointConfig, derive_pseudo_cam, enrich_many, make_backend

log = logging.getLogger("vlmdrive")

ARCH_KEYS = ("dim", "heads", "hidden", "dropout", "k", "k_hat", "lam")
PRESETS = {
    "paper": ({}, {}),
    "psi": ({"k": PSI["k"]}, {}),
    "desk": ({k: v for k, v in DESK_MODEL.items() if k in ARCH_KEYS}, DESK_TRAIN),
}
GRADCHECK_SHAPES = {"paper": BDD_OIA, "bdd": BDD_OIA, "psi": PSI, "desk": DESK_MODEL}


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _manifest(args) -> DatasetManifest:
    return DatasetManifest.load(_existing(args.manifest, "manifest"))


def _model_config(args, manifest: DatasetManifest) -> ModelConfig:
    arch, _ = PRESETS[args.preset]
    kw = dict(arch)
    kw.update(manifest.dims)
    kw.update(num_classes=manifest.num_classes, multi_label=manifest.multi_label)
    kw["k"] = min(kw.get("k", ModelConfig.k), kw["n"])
    kw["k_hat"] = min(kw.get("k_hat", ModelConfig.k_hat), kw["s"])
    for flag, key in (("k", "k"), ("khat", "k_hat"), ("lam", "lam"), ("threshold", "threshold"),
                      ("dropout", "dropout"), ("dim", "dim"), ("heads", "heads"), ("hidden", "hidden")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    _apply_ablation(args, kw)
    return ModelConfig(**kw)


def _apply_ablation(args, kw: dict) -> None:
    if getattr(args, "global_only", False):
        if args.no_vision or args.no_text:
            raise UsageError("--global-only cannot be combined with --no-vision/--no-text")
        kw["global_only"] = True
    if getattr(args, "no_vision", False) and getattr(args, "no_text", False):
        raise UsageError("--no-vision and --no-text together disable both branches; use --global-only")
    if getattr(args, "no_vision", False):
        kw["use_vision"] = False
    if getattr(args, "no_text", False):
        kw["use_text"] = False


def _train_config(args, base: dict | None = None, phase: str = "main") -> TrainConfig:
    kw = dict(base if base is not None else PRESETS[args.preset][1])
    for flag, key in (("lr", "lr"), ("batch", "batch_size"), ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    if args.seed is not None:
        kw["seed"] = args.seed
    kw["phase"] = phase
    return TrainConfig.from_dict(kw)


def _checkpoint(args):
    from .trainer import Checkpoint
    return Checkpoint.load(_existing(args.checkpoint, "checkpoint"))


def _endpoint(args) -> VlmEndpointConfig:
    cfg = VlmEndpointConfig(
        base_url=args.endpoint, model=args.model, token_env=args.token_env, timeout=args.timeout,
        max_attempts=args.retries, backoff=args.backoff,
        mock_dir=Path(args.mock_dir) if args.mock_dir else None,
        cache_dir=Path(args.cache) if args.cache else Path(args.manifest).parent / "vlm_cache",
        parallelism=args.parallel)
    cfg.validate()
    return cfg


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


# subcommands ------------------------------------------------------------------

def _default_prior(classes: int) -> list[float]:
    return [0.5, 0.4, 0.3, 0.3] if classes == 4 else [0.4] * classes


def cmd_synth(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    spec = SyntheticSpec(n_train=args.n_train, n_eval=args.n_eval, num_classes=args.classes,
                         t=args.t, n=args.n, s=args.s, d_global=args.feat_dim, d_local=args.feat_dim,
                         d_text=args.feat_dim, planted=args.planted, noise=args.noise,
                         signal=args.signal, hallucination=args.hallucination,
                         multi_label=not args.single_label,
                         class_prior=args.prior or _default_prior(args.classes))
    ds = generate_synthetic(spec, args.seed or 0, args.out)
    print(f"wrote {len(ds.manifest.samples)} samples to {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_bag(args) -> int:
    manifest = _manifest(args)
    lexicon = DEFAULT_LEXICON
    if args.lexicon:
        lexicon = json.loads(_existing(args.lexicon, "lexicon").read_text())
    corpus = [d for e in manifest.split(args.split) for d in e.descriptions]
    bag = build_object_bag(corpus, lexicon, args.size)
    supers = supercategory_counts(count_categories(corpus, lexicon))
    for cat, n in bag.entries:
        print(f"{cat:<20} {n}")
    _emit({"object_bag": bag.to_json(), "supercategories": dict(sorted(supers.items()))},
          args.out or str(manifest.root / "object_bag.json"))
    return 0


def cmd_enrich(args) -> int:
    manifest = _manifest(args)
    cfg = _endpoint(args)
    backend = make_backend(cfg)
    entries = manifest.split(args.split)
    results = enrich_many([(e.id, e.image) for e in entries], backend, cfg, manifest.dims["s"])
    _emit([r.to_json() for r in results], args.out or str(cfg.cache_dir / "enrichment.json"))
    print(f"enriched {len(results)} samples, backend calls={backend.calls}")
    return 0


def cmd_pseudo(args) -> int:
    manifest = _manifest(args)
    cfg = _endpoint(args)
    backend = make_backend(cfg)
    warnings = 0
    entries = manifest.split(args.split)
    for e in entries:
        pc = derive_pseudo_cam(e.id, e.descriptions, e.label, manifest.class_names, backend, cfg,
                               manifest.dims["s"])
        write_pseudo_cam(sidecar_path(manifest, e, "pseudo"), pc.matrix, pc.mask, manifest.class_names)
        warnings += len(pc.warnings)
    print(f"pseudo CAMs for {len(entries)} samples, backend calls={backend.calls}, warnings={warnings}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train_main
    manifest = _manifest(args)
    mc = _model_config(args, manifest)
    tc = _train_config(args)
    if not args.out:
        raise UsageError("--out is required")
    train = load_split(manifest, args.split)
    evals = load_split(manifest, args.eval_split) if args.eval_split and manifest.split(args.eval_split) else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w") as fh:
        ck = train_main(train, mc, tc, evals, out, on_epoch=lambda row: fh.write(json.dumps(row) + "\n"))
    print(f"checkpoint {out / 'final.ckpt'} hash={ck.main_hash()[:16]}")
    return 0


def cmd_refine(args) -> int:
    from .trainer import train_refinement
    ck = _checkpoint(args)
    manifest = _manifest(args)
    for e in manifest.split(args.split):
        path = sidecar_path(manifest, e, args.pseudo_kind)
        if not path.is_file():
            raise UsageError(f"missing pseudo CAM file {path}; run `vlmdrive pseudo` first")
    tc = _train_config(args, ck.train_config.to_dict(), phase="refinement")
    data = load_split(manifest, args.split)
    pseudo = load_pseudo_cams(manifest, args.split, args.pseudo_kind)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("refined.ckpt")
    refined = train_refinement(ck, data, pseudo, tc, out)
    same = refined.main_hash() == ck.main_hash()
    print(f"refined checkpoint {out} main-hash-unchanged={same}")
    return 0


def _decide_split(args, ck, manifest):
    from .refinement import predict_refined
    model = ck.build_model()
    c = model.config
    if args.lam is not None:
        c.lam = args.lam
    if args.threshold is not None:
        c.threshold = args.threshold
    for key in ("k", "khat"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(c, "k_hat" if key == "khat" else "k", v)
    c.validate()
    data = load_split(manifest, args.split)
    surrogate = None if args.no_refine else ck.build_surrogate()
    outs = []
    for lo in range(0, len(data), 256):
        sub = data.subset(np.arange(lo, min(lo + 256, len(data))))
        outs.extend(predict_refined(sub, model, surrogate) if surrogate is not None
                    else _plain(sub, model))
    return model, data, outs


def _plain(batch, model):
    from .mil import DecisionOutput, decide, probabilities
    c = model.config
    res = model.forward(batch)
    z = res.logits.data
    dec = decide(z, c.multi_label, c.threshold)
    vis, txt = explain(res.cam_v, res.cam_l, dec, c.k, c.k_hat)
    probs = probabilities(z, c.multi_label)
    return [DecisionOutput(z[i], probs[i], dec[i], vis[i], txt[i]) for i in range(len(batch))]


def cmd_eval(args) -> int:
    manifest = _manifest(args)
    labels = {e.id: e.label for e in manifest.split(args.split)}
    counts = ConfusionCounts.zeros(manifest.num_classes)
    if args.predictions:
        preds = json.loads(_existing(args.predictions, "predictions").read_text())
        missing = sorted(set(labels) - set(preds))
        if missing:
            raise UsageError(f"predictions lack {len(missing)} samples, e.g. {missing[0]}")
        for sid, y in labels.items():
            counts.accumulate(preds[sid], y)
    else:
        ck = _checkpoint(args)
        _, data, outs = _decide_split(args, ck, manifest)
        for o, y in zip(outs, data.labels):
            counts.accumulate(o.decisions, y)
    rep = f1_report(counts)
    print(format_report(rep, manifest.class_names, title=f"{manifest.name}/{args.split}"))
    if args.out:
        write_report(args.out, rep, manifest.class_names)
    return 0


def cmd_explain(args) -> int:
    manifest = _manifest(args)
    ck = _checkpoint(args)
    model, data, outs = _decide_split(args, ck, manifest)
    entries = {e.id: e for e in manifest.split(args.split)}
    names = manifest.class_names
    records = []
    for sid, o in list(zip(data.ids, outs))[:args.limit]:
        descs = entries[sid].descriptions
        rec = {"id": sid, "decisions": [names[c] for c in np.flatnonzero(o.decisions)],
               "probabilities": [round(float(p), 6) for p in o.probabilities],
               "vision": {names[c]: rows for c, rows in o.vision_explanation.items()},
               "text": {names[c]: [{"index": r, "description": descs[r] if r < len(descs) else ""}
                                   for r in rows] for c, rows in o.text_explanation.items()},
               "warnings": o.warnings}
        records.append(rec)
        print(f"{sid}: decisions={','.join(rec['decisions']) or '-'}")
        for c in rec["decisions"]:
            print(f"  {c} vision={rec['vision'].get(c, [])}")
            for t in rec["text"].get(c, []):
                print(f"  {c} text[{t['index']}] {t['description']}")
    if args.planted:
        planted = load_planted(manifest, args.split)
        res = model.forward(data)
        sel = topk_indices(res.cam_v.values, res.cam_v.mask, model.config.k)
        prec = explanation_precision(sel, planted, data.labels, names)
        print(f"explanation_precision={prec:.6f}")
    if args.out:
        _emit(records, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck
    kw = dict(GRADCHECK_SHAPES[args.preset])
    _apply_ablation(args, kw)
    cfg = ModelConfig(**kw)
    rep = gradcheck(cfg, seed=args.seed or 0, num_params=args.params, h=args.h)
    for name, idx, a, n, err in rep.rows:
        log.debug("param=%s index=%s analytic=%.12e numeric=%.12e rel_err=%.3e", name, list(idx), a, n, err)
    ok = rep.max_rel_error < args.tol
    print(f"gradcheck params={rep.checked} max_rel_error={rep.max_rel_error:.3e} worst={rep.worst} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from .trainer import evaluate, train_main
    manifest = _manifest(args)
    train = load_split(manifest, args.split)
    evals = load_split(manifest, args.eval_split)
    rows = []
    for label, flags in (("global-only", dict(global_only=True)), ("no-text", dict(no_text=True)),
                         ("no-vision", dict(no_vision=True)), ("full", {})):
        ns = argparse.Namespace(**{**vars(args), "global_only": False, "no_text": False,
                                   "no_vision": False, **flags})
        ck = train_main(train, _model_config(ns, manifest), _train_config(ns))
        rep = evaluate(ck.build_model(), evals)
        rows.append({"config": label, **rep})
        print(f"{label:<12} mF1={rep['mf1']:.4f} F1_all={rep['f1_all']:.4f} "
              + " ".join(f"{n}={f:.4f}" for n, f in zip(manifest.class_names, rep["per_class_f1"])))
    if args.out:
        _emit(rows, args.out)
    return 0


# parser -----------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    p.add_argument("--k", type=int)
    p.add_argument("--khat", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--no-vision", action="store_true")
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--global-only", action="store_true")


def _add_train_flags(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)


def _add_endpoint_flags(p):
    p.add_argument("--endpoint", default="https://api.openai.com/v1", help="chat-completion base URL")
    p.add_argument("--model", default="gpt-4o")
    p.add_argument("--token-env", default=DEFAULT_TOKEN_ENV, help="environment variable holding the API token")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0)
    p.add_argument("--mock-dir", help="serve canned answers from this directory (offline)")
    p.add_argument("--cache", help="transcript cache directory (default: <manifest dir>/vlm_cache)")
    p.add_argument("--parallel", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vlmdrive", description=__doc__)
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = add("synth", cmd_synth, "generate a planted-signal synthetic dataset")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=500)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--s", type=int, default=8)
    p.add_argument("--feat-dim", type=int, default=64)
    p.add_argument("--planted", type=int, default=2)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--signal", type=float, default=4.0)
    p.add_argument("--hallucination", type=float, default=0.0)
    p.add_argument("--prior", type=float, nargs="+")
    p.add_argument("--single-label", action="store_true")

    p = add("bag", cmd_bag, "mine the object bag from manifest descriptions")
    p.add_argument("--manifest")
    p.add_argument("--lexicon", help="JSON mapping surface form -> category")
    p.add_argument("--size", type=int, default=10)
    p.add_argument("--split", default="all")

    for name, fn, help_ in (("enrich", cmd_enrich, "run the three-question VLM cascade"),
                            ("pseudo", cmd_pseudo, "derive pseudo CAMs from descriptions")):
        p = add(name, fn, help_)
        p.add_argument("--manifest")
        p.add_argument("--split", default="train")
        _add_endpoint_flags(p)

    p = add("train", cmd_train, "train the fusion model")
    p.add_argument("--manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--eval-split", default="eval")
    _add_model_flags(p)
    _add_train_flags(p)

    p = add("refine", cmd_refine, "train the text surrogate against pseudo CAMs")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="train")
    p.add_argument("--pseudo-kind", choices=["pseudo", "oracle"], default="pseudo")
    _add_train_flags(p)

    for name, fn, help_ in (("eval", cmd_eval, "metrics report on a split"),
                            ("explain", cmd_explain, "per-sample decisions with top-k evidence")):
        p = add(name, fn, help_)
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="eval")
        p.add_argument("--k", type=int)
        p.add_argument("--khat", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--threshold", type=float)
        p.add_argument("--no-refine", action="store_true")
        if name == "eval":
            p.add_argument("--predictions", help="JSON {sample_id: decisions} instead of a checkpoint")
        else:
            p.add_argument("--limit", type=int, default=20)
            p.add_argument("--planted", action="store_true", help="also score explanation precision")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check of a fresh model")
    p.add_argument("--preset", choices=sorted(GRADCHECK_SHAPES), default="bdd")
    p.add_argument("--params", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--no-vision", action="store_true")
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--global-only", action="store_true")

    p = add("ablate", cmd_ablate, "train and score global-only, no-text, no-vision and full models")
    p.add_argument("--manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--eval-split", default="eval")
    _add_model_flags(p)
    _add_train_flags(p)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except VlmDriveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
