"""Command line entry point: ``deblurnet {synth,train,deblur,gradcheck,eval}``.

Exit codes: 0 success, 1 threshold or gradient-check failure, 2 usage or
configuration error, 3 I/O error, 4 numeric error. Every error path prints
one line ``error code=<CODE> exit=<N> message=<text>`` to stderr.
"""

import argparse
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from .config import RunConfig
from .errors import ConfigError, DeblurError, ModelFileError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(ConfigError):
    code = "USAGE"


def _emit_error(code, exit_code, message):
    msg = " ".join(str(message).split())
    print(f"error code={code} exit={exit_code} message={msg}", file=sys.stderr)
    return exit_code


def _progress(obj):
    print(json.dumps(obj, sort_keys=True), file=sys.stderr, flush=True)


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", args.seed)
    if getattr(args, "threads", None) is not None:
        cfg.set("run", "threads", args.threads)
    return cfg


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc


def _array_digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- synth


def _synth_one(args):
    from .synth import ImageSource, SampleStream, worker_rng
    index, paths, size, synth_cfg, seed = args
    source = ImageSource(paths, (size, size), seed)
    stream = SampleStream(source, synth_cfg, worker_rng(seed, index))
    sample = next(stream)
    return index, sample, stream.rejected


def cmd_synth(args):
    from dataclasses import asdict

    from .synth import scan_corpus
    cfg = _config(args)
    cfg.set("synth", "image_size", args.image_size)
    cfg.set("synth", "noise_sigma", args.noise)
    if args.kernel is not None:
        cfg.set("model", "kernel_sizes", [args.kernel])
    if args.corpus is not None:
        cfg.set("synth", "corpus", args.corpus)
    corpus = cfg["synth"]["corpus"]
    paths = None
    if corpus:
        paths = scan_corpus(corpus)
        if not paths:
            raise ConfigError(f"corpus {corpus} contains no PNG/PGM images")
    synth_cfg = cfg.synth()
    seed = cfg["run"]["seed"]
    size = cfg["synth"]["image_size"]
    _ensure_dir(os.path.join(args.out, "samples"))
    jobs = [(i, paths, size, synth_cfg, seed) for i in range(args.n)]
    threads = cfg["run"]["threads"]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_synth_one, jobs))
    else:
        results = [_synth_one(j) for j in jobs]
    entries = []
    rejected = 0
    for index, sample, rej in results:
        rejected += rej
        name = f"sample_{index:06d}.npz"
        np.savez(os.path.join(args.out, "samples", name), blurry=sample.blurry,
                 sharp=sample.sharp, kernel=sample.kernel)
        entries.append({"id": f"{index:06d}", "file": f"samples/{name}",
                        "sha256": _array_digest(sample.blurry, sample.sharp, sample.kernel)})
    manifest = {
        "kind": "deblurnet-dataset",
        "version": 1,
        "seed": seed,
        "count": args.n,
        "kernel_size": synth_cfg.trajectory.kernel_size,
        "image_size": size,
        "noise_sigma": synth_cfg.noise_sigma,
        "trajectory": asdict(synth_cfg.trajectory),
        "corpus": [os.path.relpath(p, corpus) for p in paths] if paths else "procedural",
        "rejection": {"accepted": args.n, "rejected": rejected,
                      "rate": rejected / (args.n + rejected) if args.n + rejected else 0.0},
        "samples": entries,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    cfg.save(os.path.join(args.out, "config.toml"))
    print(f"wrote {args.n} samples to {args.out} "
          f"(flat-image rejection rate {manifest['rejection']['rate']:.3f})")
    return EXIT_OK


def load_manifest(path):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("kind") != "deblurnet-dataset":
        raise ConfigError(f"{path} is not a dataset manifest")
    return manifest


def iter_manifest(path, manifest=None):
    """Yield ``(id, blurry, kernel, sharp)`` for every sample of a manifest."""
    manifest = manifest or load_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    for e in manifest["samples"]:
        with np.load(os.path.join(root, e["file"])) as z:
            yield e["id"], z["blurry"], z["kernel"], z["sharp"]


class ManifestStream:
    """Cycle through a synthesized dataset as a training stream."""

    def __init__(self, path):
        from .synth import BlurSample
        self._cls = BlurSample
        m = load_manifest(path)
        self.samples = list(iter_manifest(path, m))
        self.noise = m["noise_sigma"]
        self.kernel_size = m["kernel_size"]
        self.pos = 0

    def __iter__(self):
        return self

    def __next__(self):
        if not self.samples:
            raise StopIteration
        sid, y, k, x = self.samples[self.pos % len(self.samples)]
        self.pos += 1
        return self._cls(x, k, y, self.noise)

    def get_state(self):
        return {"pos": self.pos}

    def set_state(self, state):
        self.pos = state["pos"]


# ---------------------------------------------------------------- train


def _train_streams(cfg, model, scale_index, dataset):
    from dataclasses import replace

    from .synth import ImageSource, SampleStream, scan_corpus, worker_rng
    net = model.scales[scale_index]
    if dataset:
        if len(model.scales) != 1:
            raise ConfigError("--dataset training supports single-scale models only")
        stream = ManifestStream(dataset)
        if stream.kernel_size != net.kernel_size:
            raise ConfigError(f"dataset kernel size {stream.kernel_size} does not match "
                              f"model kernel size {net.kernel_size}")
        return stream
    size = cfg["synth"]["image_size"]
    shp = model.scale_shapes((size, size))[scale_index]
    corpus = cfg["synth"]["corpus"]
    paths = scan_corpus(corpus) if corpus else None
    if paths is not None and not paths:
        raise ConfigError(f"corpus {corpus} contains no PNG/PGM images")
    base = cfg.synth()
    scfg = replace(base, image_size=shp[0],
                   trajectory=replace(base.trajectory, kernel_size=net.kernel_size))
    seed = cfg["run"]["seed"]
    return SampleStream(ImageSource(paths, shp, seed), scfg, worker_rng(seed, 1000 + scale_index))


def cmd_train(args):
    from .modelio import save_model
    from .pipeline import build_model
    from .training import Trainer
    if args.resume:
        if not os.path.exists(args.resume):
            raise FileNotFoundError(f"checkpoint not found: {args.resume}")
        from .modelio import load_model
        _, extra, _ = load_model(args.resume, with_extra=True)
        if "config" not in extra or "trainer" not in extra:
            raise ConfigError(f"{args.resume} is not a training checkpoint")
        cfg = RunConfig(extra["config"])
        cfg.set("schedule", "total_steps", args.steps)
    else:
        cfg = _config(args)
        cfg.set("model", "preset", args.preset)
        if args.kernel:
            cfg.set("model", "kernel_sizes", [int(k) for k in args.kernel])
        cfg.set("model", "num_stages", args.stages)
        cfg.set("schedule", "total_steps", args.steps)
        cfg.set("schedule", "steps_per_stage_add", args.stage_every)
        cfg.set("schedule", "checkpoint_every", args.checkpoint_every)
        cfg.set("optimizer", "adadelta_lr", args.lr)
        cfg.set("synth", "image_size", args.image_size)
        if args.corpus is not None:
            cfg.set("synth", "corpus", args.corpus)
    out = args.out
    _ensure_dir(out)
    cfg.save(os.path.join(out, "config.toml"))
    seed = cfg["run"]["seed"]
    schedule, opt = cfg.schedule(), cfg.optimizer()
    ckpt_path = os.path.join(out, "checkpoint.dbm")
    report_path = os.path.join(out, "report.jsonl")
    every = max(1, cfg["run"]["report_every"])

    def on_checkpoint(tr):
        tr.save_checkpoint(ckpt_path, extra={"config": cfg.data})

    report_fh = open(report_path, "a" if args.resume else "w")

    def on_record_for(scale):
        def on_record(rec):
            line = {"scale": scale, "step": rec.step, "loss": rec.loss,
                    "running_loss": rec.running_loss, "skipped": rec.skipped,
                    "stage_count": rec.stage_count}
            report_fh.write(json.dumps(line) + "\n")
            if rec.step % every == 0:
                _progress(line)
        return on_record

    try:
        if args.resume:
            tr = Trainer.from_checkpoint(args.resume, None, schedule, opt,
                                         on_checkpoint=on_checkpoint)
            model = tr.model
            tr.stream = _train_streams(cfg, model, tr.scale_index, args.dataset)
            tr.restore_stream()
            tr.on_record = on_record_for(tr.scale_index)
            start = tr.scale_index
        else:
            m = cfg["model"]
            model = build_model(tuple(m["kernel_sizes"]), preset=m["preset"],
                                rng=np.random.default_rng(seed), num_stages=1,
                                resize_policy=m["resize_policy"],
                                sharpen_sigma=cfg.sharpen_sigma(), beta_k=m["beta_k"])
            tr, start = None, 0
        for i in range(start, len(model.scales)):
            if tr is None:
                tr = Trainer(model, _train_streams(cfg, model, i, args.dataset), schedule, opt,
                             scale_index=i, rng=np.random.default_rng([seed, i]),
                             on_record=on_record_for(i), on_checkpoint=on_checkpoint)
            try:
                tr.run()
            except StopIteration:
                raise ConfigError("training data stream is empty") from None
            if schedule.checkpoint_every:
                on_checkpoint(tr)
            tr = None
    finally:
        report_fh.close()
    meta = {"preset": cfg["model"]["preset"], "seed": seed,
            "steps": cfg["schedule"]["total_steps"]}
    model.metadata.update(meta)
    save_model(model, os.path.join(out, "model.dbm"))
    print(f"wrote {os.path.join(out, 'model.dbm')} ({model.num_parameters()} parameters)")
    return EXIT_OK


# ---------------------------------------------------------------- deblur


def _deblur_inputs(path):
    from .synth import IMAGE_EXTENSIONS
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path)
                       if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            raise ConfigError(f"no PNG/PGM images in {path}")
        return files
    if not os.path.exists(path):
        raise FileNotFoundError(f"input image not found: {path}")
    return [path]


def deblur_image(img, model, spatially_varying=False, eta=1.0, patch_size=0, overlap=0.5,
                 beta_x=None, prior="intensity"):
    """Deblur a grayscale or color image; color channels share one kernel.

    Returns ``(latent, kernel_or_field, info)``.
    """
    from .imageio import to_gray
    from .pipeline import default_restore_beta, multiscale_deblur, restore_image
    gray = to_gray(img)
    info = {"prior": prior}
    t0 = time.perf_counter()
    bx = default_restore_beta(model, prior) if beta_x is None else beta_x
    if spatially_varying:
        from .spatial import eff_restore, spatially_varying_deblur
        res = spatially_varying_deblur(gray, model, patch_size or None, overlap, eta,
                                       beta_x=bx, prior=prior)
        if img.ndim == 3:
            latent = np.stack([eff_restore(img[..., c], res.field, res.grid, bx, prior=prior)
                               for c in range(img.shape[2])], axis=-1)
        else:
            latent = res.latent
        info.update(patches=len(res.grid), eta=eta,
                    degenerate_patches=int(np.count_nonzero(res.field.degenerate)))
        kernel = res
    else:
        res = multiscale_deblur(gray, model, beta_x=bx, prior=prior)
        kernel = res.kernel
        if img.ndim == 3:
            latent = np.stack([restore_image(kernel, img[..., c], bx, prior)
                               for c in range(img.shape[2])], axis=-1)
        else:
            latent = res.latent
        info.update(timings=res.timings, degenerate=res.degenerate, warnings=res.warnings)
    info["beta_x"] = bx
    info["total_ms"] = 1e3 * (time.perf_counter() - t0)
    return latent, kernel, info


def cmd_deblur(args):
    from .evaluation import psnr
    from .imageio import kernel_to_display, read_image, write_image, write_png
    from .modelio import config_hash, load_model, model_id
    from .spatial import kernel_mosaic
    if not os.path.exists(args.model):
        raise ModelFileError(f"model file not found: {args.model}")
    model = load_model(args.model)
    files = _deblur_inputs(args.input)
    _ensure_dir(args.out)
    for path in files:
        img = read_image(path)
        latent, kern, info = deblur_image(img, model, args.spatially_varying, args.eta,
                                          args.patch_size, args.overlap, args.beta_x, args.prior)
        stem = os.path.splitext(os.path.basename(path))[0]
        write_image(os.path.join(args.out, f"{stem}_latent.png"), latent, bits=args.bits
                    if latent.ndim == 2 else 8)
        if args.spatially_varying:
            write_png(os.path.join(args.out, f"{stem}_kernels.png"),
                      kernel_mosaic(kern.field, kern.grid))
        else:
            write_png(os.path.join(args.out, f"{stem}_kernel.png"), kernel_to_display(kern))
            info["kernel"] = np.round(kern, 10).tolist()
        info.update(input=path, model_id=model_id(model), config_hash=config_hash(model))
        if args.reference:
            ref = read_image(args.reference)
            b = model.scales[-1].kernel_size // 2
            info["psnr_db"] = psnr(np.clip(latent, 0, 1), ref, border=b)
            info["psnr_blurry_db"] = psnr(img, ref, border=b)
        with open(os.path.join(args.out, f"{stem}_metrics.json"), "w") as fh:
            json.dump(info, fh, indent=1, sort_keys=True, default=float)
        print(f"{path}: wrote {stem}_latent.png ({info['total_ms']:.0f} ms)")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args):
    from .gradcheck import format_table, run_gradcheck
    t0 = time.perf_counter()
    corrupt = set(args.corrupt) if args.corrupt else None
    results = run_gradcheck(args.seed if args.seed is not None else 0, args.instances,
                            args.tol, corrupt)
    sys.stdout.write(format_table(results))
    failed = [r.layer for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} layers passed "
          f"in {time.perf_counter() - t0:.1f} s")
    if failed:
        return _emit_error("GRADCHECK", EXIT_FAIL, "failed layers: " + ",".join(failed))
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _load_thresholds(path):
    import tomli
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read thresholds {path}: {exc}") from exc
    try:
        if path.endswith(".json"):
            return json.loads(raw)
        return tomli.loads(raw.decode())
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed thresholds file {path}: {exc}") from exc


def cmd_eval(args):
    import csv

    from .evaluation import (TABLE1_IMAGE_DIMS, check_thresholds, evaluate, input_size_sweep,
                             runtime_table, summarize)
    from .modelio import load_model
    if not os.path.exists(args.model):
        raise ModelFileError(f"model file not found: {args.model}")
    model = load_model(args.model)
    _ensure_dir(args.out)
    summary = {}
    if args.manifest:
        manifest = load_manifest(args.manifest)
        if manifest["kernel_size"] != model.scales[-1].kernel_size:
            raise ConfigError(f"manifest kernel size {manifest['kernel_size']} does not match "
                              f"model kernel size {model.scales[-1].kernel_size}")
        samples = list(iter_manifest(args.manifest, manifest))
        if args.limit:
            samples = samples[:args.limit]
        records = evaluate(model, samples)
        with open(os.path.join(args.out, "records.jsonl"), "w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        with open(os.path.join(args.out, "records.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "kernel_mse", "psnr_db", "kernel_ms", "restore_ms",
                        "model_id", "config_hash"])
            for r in records:
                w.writerow([r.sample_id, f"{r.kernel_mse:.8g}", f"{r.psnr_db:.6g}",
                            f"{r.wall_ms['kernel_ms']:.3f}", f"{r.wall_ms['restore_ms']:.3f}",
                            r.model_id, r.config_hash])
        summary = summarize(records)
        if args.sweep:
            pairs = [(y, k) for _, y, k, _ in samples]
            summary["input_size_sweep"] = input_size_sweep(model, pairs)
    if args.runtime:
        k = model.scales[-1].kernel_size
        dims = [int(d) for d in args.sizes.split(",")] if args.sizes else TABLE1_IMAGE_DIMS
        ks = [int(v) for v in args.runtime_kernels.split(",")] if args.runtime_kernels else [k]
        table = runtime_table(model, [(d, kk) for kk in ks for d in dims], repeats=3,
                              rng=args.seed or 0)
        with open(os.path.join(args.out, "runtime.csv"), "w") as fh:
            fh.write(table.to_csv())
        with open(os.path.join(args.out, "runtime.txt"), "w") as fh:
            fh.write(table.to_text())
        sys.stdout.write(table.to_text())
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    if summary:
        print(json.dumps({k: v for k, v in summary.items() if k != "input_size_sweep"},
                         sort_keys=True))
    if args.thresholds:
        violations = check_thresholds(summary, _load_thresholds(args.thresholds))
        if violations:
            return _emit_error("THRESHOLD", EXIT_FAIL, "; ".join(violations))
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="deblurnet", description="Trainable blind deconvolution.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic blur dataset")
    s.add_argument("--corpus", help="directory of sharp PNG/PGM images (default: procedural)")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--kernel", type=int, help="kernel size")
    s.add_argument("--image-size", type=int, help="crop size")
    s.add_argument("--noise", type=float, help="noise standard deviation")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--preset", choices=["desk", "paper-3stage"])
    t.add_argument("--kernel", type=int, nargs="+", help="kernel size per scale, coarse to fine")
    t.add_argument("--stages", type=int)
    t.add_argument("--steps", type=int, help="training steps per scale")
    t.add_argument("--stage-every", type=int, help="steps between stage additions")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--lr", type=float, help="ADADELTA step factor")
    t.add_argument("--image-size", type=int)
    t.add_argument("--corpus")
    t.add_argument("--dataset", help="manifest.json written by 'synth'")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("deblur", help="blind-deblur an image or a directory")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--reference", help="sharp image for PSNR reporting")
    d.add_argument("--bits", type=int, choices=[8, 16], default=8)
    d.add_argument("--spatially-varying", action="store_true")
    d.add_argument("--eta", type=float, default=1.0)
    d.add_argument("--patch-size", type=int, default=0)
    d.add_argument("--overlap", type=float, default=0.5)
    d.add_argument("--beta-x", type=float, help="override the restoration weight")
    d.add_argument("--prior", choices=["intensity", "gradient"], default="intensity",
                   help="restoration penalty on pixel values (network layer) or gradients")
    d.set_defaults(func=cmd_deblur)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--seed", type=int)
    g.add_argument("--instances", type=int)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="evaluate a model")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest")
    e.add_argument("--limit", type=int)
    e.add_argument("--sweep", action="store_true", help="input-size sweep of kernel MSE")
    e.add_argument("--runtime", action="store_true", help="emit the runtime table")
    e.add_argument("--sizes", help="comma-separated image sizes for the runtime table")
    e.add_argument("--runtime-kernels", help="comma-separated kernel sizes")
    e.add_argument("--thresholds", help="TOML/JSON file of acceptance thresholds")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def _format_warning(message, category, filename, lineno, line=None):
    return f"warning: {' '.join(str(message).split())}\n"


def main(argv=None):
    warnings.formatwarning = _format_warning
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "eta", 1.0) is not None and not 0 < getattr(args, "eta", 1.0) <= 1:
            raise UsageError("--eta must be in (0, 1]")
        return args.func(args)
    except DeblurError as exc:
        return _emit_error(exc.code, exc.exit_code, exc)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _emit_error("IO", EXIT_IO, exc)
    except OSError as exc:
        return _emit_error("IO", EXIT_IO, exc)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _emit_error("NUMERIC", EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _emit_error("VALUE", EXIT_USAGE, exc)
    except KeyboardInterrupt:
        return _emit_error("INTERRUPTED", EXIT_FAIL, "interrupted")


if __name__ == "__main__":
    sys.exit(main())
