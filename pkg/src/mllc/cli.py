"""``mllc`` command line: synth, refine, train, eval, gradcheck, bench.

Every command takes an optional JSON config (sections ``synth``, ``train``,
``refine``, ``loss``) plus flag overrides, and writes the resolved config
next to its outputs. Exit codes: 0 ok, 1 runtime failure, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .losses import LossConfig
from .metrics import pseudo_label_accuracy
from .nn import ContractError, assign_params, build_network, identity_averaging, load_checkpoint, save_checkpoint
from .refine import RefineConfig, aggregate_pseudo_labels, refine
from .synth import SynthSpec, SynthSpecError, generate, read_bundle, refine_harness, write_bundle
from .tensor_store import NpyFormatError, NpyUnsupportedError, ValidationError, load_npy, save_npy, seeded_rng
from .train import TrainConfig, evaluate, init_models, split_data, train

log = logging.getLogger("mllc")

THREADS_ENV = "MLLC_THREADS"

# the desk-scale setting the end-to-end comparisons use
STANDARD_SYNTH = SynthSpec(cluster_separation=2.0, num_val=30)
# two 12x12 images give 288 graph nodes per batch; a smaller k keeps neighborhoods local
STANDARD_REFINE = RefineConfig(alpha=0.2, k=10)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=lambda: STANDARD_SYNTH)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(refine=STANDARD_REFINE))
    out_dir: str = "mllc_out"

    @property
    def refine(self) -> RefineConfig:
        return self.train.refine

    @property
    def loss(self) -> LossConfig:
        return self.train.loss

    def to_dict(self) -> dict:
        t = asdict(self.train)
        return {"synth": asdict(self.synth), "train": {k: v for k, v in t.items() if k not in ("refine", "loss")},
                "refine": t["refine"], "loss": t["loss"], "out_dir": self.out_dir}


SECTIONS = {"synth": SynthSpec, "train": TrainConfig, "refine": RefineConfig, "loss": LossConfig}


def _known(cls) -> set:
    return {f.name for f in fields(cls)} - {"refine", "loss"}


def _build(cls, values: dict, section: str, **nested):
    unknown = set(values) - _known(cls)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values, **nested)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def resolve_config(doc: dict | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Merge a config document with ``section.key=value`` overrides (flags win)."""
    doc = json.loads(json.dumps(doc or {}))
    unknown = set(doc) - set(SECTIONS) - {"out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or (not dot and key != "out_dir"):
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key == "out_dir":
            doc["out_dir"] = value
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
        doc.setdefault(section, {})[name] = value
    synth_vals = {**asdict(STANDARD_SYNTH), **doc.get("synth", {})}
    if isinstance(synth_vals.get("class_probs"), list):
        synth_vals["class_probs"] = tuple(synth_vals["class_probs"])
    synth = _build(SynthSpec, synth_vals, "synth")
    ref = _build(RefineConfig, {**asdict(STANDARD_REFINE), **doc.get("refine", {})}, "refine")
    loss = _build(LossConfig, doc.get("loss", {}), "loss")
    tr = _build(TrainConfig, doc.get("train", {}), "train", refine=ref, loss=loss)
    return ExperimentConfig(synth, tr, str(doc.get("out_dir", "mllc_out")))


def load_config(path: str | None, overrides: list[str] | None) -> ExperimentConfig:
    doc = None
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(doc, overrides)


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(os.path.join(cfg.out_dir, "config.json"), cfg.to_dict())
    return cfg.out_dir


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = _prepare_out(cfg)
    if args.harness is not None:
        x, p, gt, flips = refine_harness(args.harness, n=args.n, noise_rate=cfg.synth.noise_rate)
        for name, arr in (("features", x), ("probs", p), ("gt", gt), ("flips", flips)):
            save_npy(arr, os.path.join(out, f"{name}.npy"))
        _emit({"harness_seed": args.harness, "n": int(x.shape[0]), "flips": int(flips.size), "out_dir": out})
        return 0
    manifest = write_bundle(generate(cfg.synth), cfg.synth, out, {"config": cfg.to_dict()})
    _emit({"images": len(manifest["files"]), "out_dir": out})
    return 0


def _graph_layers(cfg: ExperimentConfig, c: int, m: int, checkpoint: str | None):
    K = cfg.refine.K
    if checkpoint is None:
        return [(identity_averaging(c, "normalize_rows"), identity_averaging(m, "leaky_relu")) for _ in range(K)]
    params, _ = load_checkpoint(checkpoint)
    raw_dim = params["backbone.weight"].shape[1]
    net = build_network(raw_dim, params["backbone.weight"].shape[0], c, m, K, seeded_rng(0))
    assign_params(net, params)
    return net.graph_layers(K)


def cmd_refine(cfg: ExperimentConfig, args) -> int:
    x = load_npy(args.features, "features")
    p = load_npy(args.probs, "probs")
    head = load_npy(args.head, "probs") if args.head else p
    if x.shape[0] != p.shape[0] or head.shape != p.shape:
        raise ContractError(f"inconsistent inputs: features {x.shape}, probs {p.shape}, head {head.shape}")
    out = _prepare_out(cfg)
    layers = _graph_layers(cfg, p.shape[1], x.shape[1], args.checkpoint)
    t0 = time.perf_counter()
    res = refine(x, p, head, cfg.refine, layers, rng=seeded_rng(cfg.train.seed))
    elapsed = time.perf_counter() - t0
    pseudo = aggregate_pseudo_labels(res.round_probs)
    save_npy(res.round_probs[-1], os.path.join(out, "refined_probs.npy"))
    save_npy(pseudo, os.path.join(out, "pseudo_labels.npy"))
    summary = {"n": int(x.shape[0]), "classes": int(p.shape[1]), "K": cfg.refine.K,
               "changed": int((pseudo != p.argmax(axis=1)).sum()), "thresholds": res.thresholds.eta.tolist()}
    if args.gt:
        gt = load_npy(args.gt, "labels")
        flips = load_npy(args.flips) if args.flips else None
        before, _ = pseudo_label_accuracy(p.argmax(axis=1), gt)
        after, fixed = pseudo_label_accuracy(pseudo, gt, flips)
        summary.update(accuracy_before=before, accuracy_after=after)
        if fixed is not None:
            summary["corrected_flip_fraction"] = fixed
    _write_json(os.path.join(out, "summary.json"), summary)
    _emit({**summary, "wall_clock_s": elapsed})
    return 0


def _dataset(cfg: ExperimentConfig, data_dir: str | None):
    if data_dir:
        batches, manifest = read_bundle(data_dir)
        return batches, int(manifest["spec"]["classes"])
    return generate(cfg.synth), cfg.synth.classes


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _prepare_out(cfg)
    data, C = _dataset(cfg, args.data)
    models, record = train(data, cfg.train, C)
    with open(os.path.join(out, "metrics.jsonl"), "w") as fh:
        for line in record.lines():
            fh.write(line + "\n")
    _write_json(os.path.join(out, "timing.json"), {"wall_clock_s": record.wall_clock, "steps": len(record.steps)})
    save_checkpoint(os.path.join(out, "checkpoint"), models.student.params(), len(record.steps),
                    {"classes": C, "hidden": cfg.train.hidden, "embed_dim": cfg.train.embed_dim})
    save_checkpoint(os.path.join(out, "teacher"), models.teacher.params(), len(record.steps))
    final = record.evals[-1] if record.evals else {}
    _emit({"final": final, "steps": len(record.steps), "wall_clock_s": record.wall_clock})
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    params, manifest = load_checkpoint(args.checkpoint)
    data, C = _dataset(cfg, args.data)
    _, unlabeled, val = split_data(data)
    raw_dim = data[0].images.shape[1]
    if params["backbone.weight"].shape[1] != raw_dim:
        raise ContractError(f"checkpoint expects raw_dim {params['backbone.weight'].shape[1]}, data has {raw_dim}")
    tcfg = replace(cfg.train, hidden=params["backbone.weight"].shape[0], embed_dim=params["emb_head.weight"].shape[0])
    models = init_models(tcfg, raw_dim, C, 1)
    assign_params(models.student, params)
    assign_params(models.teacher, params)
    out = _prepare_out(cfg)
    rec = {"checkpoint_step": manifest.get("step"), **evaluate(models, val, C, unlabeled, tcfg)}
    _write_json(os.path.join(out, "eval.json"), rec)
    _emit(rec)
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    from .gradcheck import run_all

    results = run_all(args.configs, cfg.train.seed)
    for r in results:
        _emit(r.as_dict())
    return 0 if all(r.passed for r in results) else 1


def bench_refine(n: int, k: int, K: int, m: int, C: int, seed: int = 0, repeats: int = 1) -> dict:
    rng = seeded_rng(seed)
    x = rng.normal(size=(n, m))
    z = rng.normal(size=(n, C)) * 2.0
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    cfg = RefineConfig(K=K, k=k)
    layers = [(identity_averaging(C, "normalize_rows"), identity_averaging(m, "leaky_relu")) for _ in range(K)]
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        refine(x, p, p, cfg, layers, rng=seeded_rng(seed))
        times.append(time.perf_counter() - t0)
    best = min(times)
    return {"n": n, "k": k, "K": K, "m": m, "C": C, "repeats": repeats, "wall_clock_s": best,
            "wall_clock_all_s": times, "nodes_per_s": n / best if best > 0 else None}


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    out = _prepare_out(cfg)
    rec = bench_refine(args.n, args.k, cfg.refine.K, args.m, args.classes,
                       cfg.train.seed, args.repeats)
    _write_json(os.path.join(out, "bench.json"), rec)
    _emit(rec)
    return 0


COMMANDS = {"synth": cmd_synth, "refine": cmd_refine, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field (repeatable)")
    common.add_argument("--out", help="output directory (same as --set out_dir=...)")
    common.add_argument("--seed", type=int, help="seed for both data and training")
    common.add_argument("--threads", type=int, help=f"BLAS thread cap (default ${THREADS_ENV} or library default)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="mllc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset bundle")
    p.add_argument("--harness", type=int, metavar="SEED", help="write a noisy refinement instance instead")
    p.add_argument("--n", type=int, default=200, help="harness size")
    p = sub.add_parser("refine", parents=[common], help="refine predictions read from NPY files")
    p.add_argument("--features", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--head", help="segmentation-head probabilities for the gate (default: --probs)")
    p.add_argument("--gt")
    p.add_argument("--flips")
    p.add_argument("--checkpoint", help="use trained graph layers from this checkpoint")
    p = sub.add_parser("train", parents=[common], help="train on a synthetic dataset")
    p.add_argument("--data", help="bundle written by 'mllc synth' (default: generate from config)")
    p.add_argument("--mode", choices=["mllc", "self_training", "supervised"])
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all gradients")
    p.add_argument("--configs", type=int, default=50)
    p = sub.add_parser("bench", parents=[common], help="time one refine call")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--repeats", type=int, default=1)
    return ap


def _thread_count(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"out_dir={json.dumps(args.out)}")
        if args.seed is not None:
            overrides += [f"synth.seed={args.seed}", f"train.seed={args.seed}"]
        if getattr(args, "mode", None):
            overrides.append(f"train.mode={json.dumps(args.mode)}")
        cfg = load_config(args.config, overrides)
        threads = _thread_count(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be >= 1")
        if threads is None:
            return COMMANDS[args.command](cfg, args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, SynthSpecError, ContractError, ValidationError, NpyFormatError, NpyUnsupportedError,
            FileNotFoundError) as exc:
        print(f"mllc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"mllc {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
