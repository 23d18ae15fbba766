"""Command-line pipeline orchestration.

Subcommands: datagen, train-diffusion, invert, augment, train-translator,
stylize, evaluate, pipeline, ablate. A run directory accumulates artifacts;
every stage is skipped when its outputs already exist, so pipelines resume
at stage granularity. Exit codes: 0 ok, 1 validation error, 2 runtime
failure.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, diffusion, guidance, inversion, metrics, translator
from .config import ExperimentConfig
from .errors import ConfigError
from .imaging import contact_sheet, load_image, save_image
from .manifest import DatasetManifest, merge_manifests

# per-stage seed offsets on top of root_seed
SEED_VOCAB = 11
SEED_DENOISER = 21
SEED_DIFFUSION = 31
SEED_INVERSION = 41
SEED_EXTRACTOR = 51
SEED_TRANSLATOR = 61
SEED_SUBSET = 81
ORACLE_REF_SEED_OFFSET = 4_000_000


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _progress(tag, every=200):
    def fn(step, *losses):
        if step % every == 0:
            vals = " ".join(f"{v:.4f}" for v in losses)
            _log(f"[{tag}] step {step} {vals}")
    return fn


class Runner:
    """Lazily materializes pipeline stages inside one run directory."""

    def __init__(self, cfg, run_dir):
        self.cfg = cfg
        self.run = Path(run_dir)
        self.run.mkdir(parents=True, exist_ok=True)
        (self.run / "checkpoints").mkdir(exist_ok=True)
        (self.run / "reports").mkdir(exist_ok=True)
        (self.run / "gallery").mkdir(exist_ok=True)
        (self.run / "logs").mkdir(exist_ok=True)
        cfg_path = self.run / "config.json"
        if not cfg_path.exists():
            cfg.save(cfg_path)
        self.sched = diffusion.make_schedule(cfg.n_steps, cfg.beta_min,
                                             cfg.beta_max)
        self.base_vocab = inversion.build_vocabulary(
            cfg.cond_dim, cfg.n_style_tokens, cfg.root_seed + SEED_VOCAB)

    # -- data ------------------------------------------------------------
    def data(self):
        cfg = self.cfg
        manifest_path = self.run / "data" / "manifest.jsonl"
        if manifest_path.exists():
            m = DatasetManifest.load(manifest_path)
            if len(m) == cfg.n_source + cfg.n_style + cfg.n_test:
                return m
        _log("[datagen] building datasets")
        return datagen.build_datasets(cfg.n_source, cfg.n_style, cfg.n_test,
                                      cfg.root_seed, self.run / "data",
                                      size=cfg.resolution)

    # -- diffusion -------------------------------------------------------
    def denoiser(self):
        cfg = self.cfg
        path = self.run / "checkpoints" / "denoiser.npz"
        if path.exists():
            model, _ = diffusion.load_denoiser(path)
            return model
        data = self.data()
        corpus = data.subset(split="train")
        model = diffusion.DenoiserModel(
            image_size=cfg.resolution, base=cfg.denoiser_base,
            cond_dim=cfg.cond_dim, emb_dim=cfg.emb_dim, n_steps=cfg.n_steps,
            seed=cfg.root_seed + SEED_DENOISER)
        _log(f"[train-diffusion] {cfg.diffusion_steps} steps on "
             f"{len(corpus)} images")
        diffusion.train_denoiser(
            model, corpus, lambda p: inversion.encode_prompt(self.base_vocab, p),
            self.sched, cfg.diffusion_steps, cfg.root_seed + SEED_DIFFUSION,
            caption_fn=inversion.caption_for_entry, batch=cfg.diffusion_batch,
            lr=cfg.diffusion_lr, log_fn=_progress("train-diffusion"))
        diffusion.save_denoiser(path, model, self.sched)
        return model

    # -- inversion ---------------------------------------------------------
    def vocab(self):
        cfg = self.cfg
        path = self.run / "checkpoints" / "style_embedding.npz"
        if path.exists():
            return inversion.load_style_embedding(path, self.base_vocab)
        model = self.denoiser().freeze()
        style = self.data().subset(provenance="style")
        losses = []
        _log(f"[invert] {cfg.inversion_iters} iterations on {len(style)} images")
        learned = inversion.invert_style(
            model, self.base_vocab, style, inversion.PromptTemplateSet(),
            cfg.inversion_iters, cfg.root_seed + SEED_INVERSION, self.sched,
            lr=cfg.inversion_lr,
            log_fn=lambda i, loss: losses.append(loss))
        inversion.save_style_embedding(path, learned)
        with open(self.run / "logs" / "inversion_losses.json", "w") as fh:
            json.dump(losses, fh)
        return learned

    # -- augmentation ------------------------------------------------------
    def aug_sets(self):
        """Build (or reload) all self/cross sets; returns two manifest lists."""
        cfg = self.cfg
        model = self.denoiser().freeze()
        vocab = self.vocab()
        data = self.data()
        style = data.subset(provenance="style")
        cross_guides = DatasetManifest(
            data.root,
            data.subset(provenance="source", split="train")
                .entries[:cfg.cross_guides])
        t_start = time.perf_counter()
        n_done = 0
        selfs, crosses = [], []
        for mode, t0s, n, guides in (
                ("self", cfg.self_t0s, cfg.self_n, style),
                ("cross", cfg.cross_t0s, cfg.cross_n_per_t0, cross_guides)):
            for t0 in t0s:
                if n == 0:
                    continue
                out = self.run / "aug" / f"{mode}_{t0:g}"
                done_before = len(guidance._load_existing_records(
                    out / "manifest.jsonl")) if out.exists() else 0
                spec = guidance.GuidanceSpec(t0=t0, mode=mode, n_samples=n,
                                             guide_manifest=guides)
                _log(f"[augment] {mode} t0={t0:g} n={n}")
                records = guidance.build_aug_set(
                    model, vocab, spec, self.sched, out,
                    log_fn=_progress(f"augment {mode}@{t0:g}"))
                n_done += len(records) - done_before
                m = guidance.records_to_manifest(records, mode, out)
                (selfs if mode == "self" else crosses).append(m)
        elapsed = time.perf_counter() - t_start
        if n_done > 0:
            per_image = elapsed / n_done
            with open(self.run / "logs" / "timings.json", "w") as fh:
                json.dump({"gis_seconds_per_image": per_image,
                           "n_steps": cfg.n_steps}, fh)
        return selfs, crosses

    def aug_seeds(self):
        return set(range(1, max(self.cfg.self_n, self.cfg.cross_n_per_t0) + 1))

    # -- target sets -------------------------------------------------------
    def target_set(self, k=None, modes=("self", "cross"), cross_t0s=None):
        """Assemble the training target set, optionally subsetting the
        augmentation pool to k samples or filtering modes/factors."""
        style = self.data().subset(provenance="style")
        if k == 0:
            return style
        selfs, crosses = self.aug_sets()
        if "self" not in modes:
            selfs = []
        if "cross" not in modes:
            crosses = []
        if cross_t0s is not None:
            crosses = [m for m in crosses
                       if m.entries and m.entries[0].t0 in cross_t0s]
        if k is None:
            return guidance.assemble_target_set(style, selfs, crosses,
                                                root=self.run)
        pool = merge_manifests(self.run, selfs + crosses)
        rng = np.random.default_rng(self.cfg.root_seed + SEED_SUBSET)
        order = rng.permutation(len(pool.entries))[:k]
        subset = DatasetManifest(self.run,
                                 [pool.entries[i] for i in sorted(order)])
        return merge_manifests(self.run, [style, subset])

    # -- translator ----------------------------------------------------------
    def translator(self, variant="main", k=None, modes=("self", "cross"),
                   cross_t0s=None, seed_shift=0):
        cfg = self.cfg
        path = self.run / "checkpoints" / f"translator_{variant}.npz"
        if path.exists():
            gen, _, heads, meta = translator.load_translator(path)
            return gen, heads, meta
        k = cfg.k if k is None and variant == "main" else k
        target = self.target_set(k=k, modes=modes, cross_t0s=cross_t0s)
        source = self.data().subset(provenance="source", split="train")
        seed = cfg.root_seed + SEED_TRANSLATOR + seed_shift
        gen = translator.GeneratorModel(base=cfg.gen_base,
                                        n_res_blocks=cfg.n_res_blocks,
                                        seed=seed)
        disc = translator.DiscriminatorModel(base=cfg.gen_base, seed=seed + 1)
        tcfg = translator.TrainConfig(
            lr=cfg.translator_lr, lambda_nce=cfg.lambda_nce, tau=cfg.nce_tau,
            n_locations=cfg.nce_locations)
        _log(f"[train-translator:{variant}] {cfg.translator_iters} iters, "
             f"|target|={len(target)}")
        translator.train_translator(
            gen, disc, source, target, cfg.translator_iters,
            cfg.translator_batch, seed + 2, cfg=tcfg, out_path=path,
            log_fn=_progress(f"train-translator:{variant}"))
        gen2, _, heads, meta = translator.load_translator(path)
        return gen2, heads, meta

    # -- metrics ---------------------------------------------------------
    def extractor(self):
        cfg = self.cfg
        path = self.run / "checkpoints" / "extractor.npz"
        if path.exists():
            return metrics.load_extractor(path)
        _log("[metrics] pretraining feature extractor")
        model = metrics.train_extractor(
            cfg.resolution, cfg.root_seed, steps=cfg.extractor_steps,
            seed=cfg.root_seed + SEED_EXTRACTOR, base=cfg.extractor_base,
            feature_dim=cfg.feature_dim)
        metrics.save_extractor(path, model)
        return model

    def oracle_reference(self):
        """Feature stats of oracle-stylized held-out faces (ground truth)."""
        cfg = self.cfg
        seeds = cfg.root_seed + ORACLE_REF_SEED_OFFSET + np.arange(cfg.oracle_ref_n)
        imgs = np.stack([
            datagen.apply_style_oracle(
                datagen.gen_source_image(int(s), cfg.resolution))
            for s in seeds])
        return metrics.fit_stats(
            metrics.features_for_images(self.extractor(), imgs))

    def gis_reference(self, mode, t0):
        cfg = self.cfg
        data = self.data()
        if mode == "self":
            guides = data.subset(provenance="style")
        else:
            guides = DatasetManifest(
                data.root,
                data.subset(provenance="source", split="train")
                    .entries[:cfg.cross_guides])
        _log(f"[metrics] FID reference {mode} t0={t0:g} n={cfg.ref_n}")
        return metrics.build_fid_reference(
            self.denoiser().freeze(), self.vocab(), guides, t0, cfg.ref_n,
            cfg.ref_seed_base, self.sched, self.extractor(), mode=mode,
            cache_dir=self.run / "refs", forbidden_seeds=self.aug_seeds(),
            log_fn=_progress(f"reference {mode}@{t0:g}"))

    def evaluate(self, gen, variant="main", references=None):
        cfg = self.cfg
        refs = {"style_oracle": self.oracle_reference()}
        if references:
            refs.update(references)
        test = self.data().subset(split="test")
        report = metrics.evaluate(gen, test, refs, self.extractor())
        report.save(self.run / "reports" / f"metrics_{variant}.json")
        self._gallery(gen, variant)
        return report

    def _gallery(self, gen, variant, n=8):
        test = self.data().subset(split="test")
        rows = []
        for e in test.entries[:n]:
            img = load_image(Path(test.root) / e.image_path)
            rows.append([img, translator.stylize(gen, img),
                         datagen.apply_style_oracle(img)])
        if rows:
            save_image(contact_sheet(rows),
                       self.run / "gallery" / f"eval_{variant}.png")


# ---------------------------------------------------------------------------
# subcommands

def cmd_datagen(runner):
    m = runner.data()
    _log(f"[datagen] manifest with {len(m)} entries at {runner.run / 'data'}")
    return 0


def cmd_train_diffusion(runner):
    runner.denoiser()
    return 0


def cmd_invert(runner):
    runner.vocab()
    return 0


def cmd_augment(runner):
    selfs, crosses = runner.aug_sets()
    total = sum(len(m) for m in selfs + crosses)
    _log(f"[augment] {total} augmentation samples ready")
    return 0


def cmd_train_translator(runner, k=None):
    runner.translator(variant="main" if k is None else f"k{k}", k=k)
    return 0


def cmd_evaluate(runner, k=None):
    variant = "main" if k is None else f"k{k}"
    gen, _, _ = runner.translator(variant=variant, k=k)
    report = runner.evaluate(gen, variant)
    _log(f"[evaluate] lpips={report.mean_lpips:.4f} "
         + " ".join(f"fid[{k_}]={v:.2f}"
                    for k_, v in report.fid_by_reference.items()))
    return 0


def cmd_pipeline(runner, k=None):
    runner.data()
    runner.denoiser()
    runner.vocab()
    if (k or runner.cfg.k) != 0:
        runner.aug_sets()
    return cmd_evaluate(runner, k=k)


def _ablate_variants(runner, preset):
    cfg = runner.cfg
    if preset == "aug_size":
        pool = cfg.self_n * len(cfg.self_t0s) + cfg.cross_n_per_t0 * len(cfg.cross_t0s)
        ks = sorted({min(k, pool) for k in (0, 250, 1000, 5000)})
        return [(f"k{k}", dict(k=k)) for k in ks]
    if preset == "self_vs_cross":
        return [("self_only", dict(modes=("self",))),
                ("cross_only", dict(modes=("cross",))),
                ("combined", dict(modes=("self", "cross")))]
    if preset == "guidance_factors":
        return [("ca_low", dict(cross_t0s=(0.6, 0.7))),
                ("ca_high", dict(cross_t0s=(0.8, 0.9)))]
    raise ConfigError(f"unknown preset {preset!r}; use aug_size, "
                      "self_vs_cross or guidance_factors")


def cmd_ablate(runner, preset):
    variants = _ablate_variants(runner, preset)
    refs = {"fid_s_0.6": runner.gis_reference("self", 0.6),
            "fid_s_0.8": runner.gis_reference("self", 0.8),
            "fid_c_0.8": runner.gis_reference("cross", 0.8)}
    rows = {}
    for i, (name, kwargs) in enumerate(variants):
        gen, _, _ = runner.translator(variant=name, seed_shift=100 + i,
                                      **kwargs)
        report = runner.evaluate(gen, variant=name, references=refs)
        rows[name] = {"lpips": report.mean_lpips,
                      **report.fid_by_reference}
    out = runner.run / "reports" / f"ablation_{preset}.json"
    with open(out, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    _emit_table(rows, runner.run / "reports" / f"ablation_{preset}.txt")
    _emit_plot(preset, rows, runner.run / "reports" / f"ablation_{preset}.png")
    return 0


def _emit_table(rows, path):
    cols = ["lpips", "fid_s_0.6", "fid_s_0.8", "fid_c_0.8", "style_oracle"]
    cols = [c for c in cols if any(c in r for r in rows.values())]
    width = max(len(n) for n in rows) + 2
    lines = ["variant".ljust(width) + "  ".join(c.rjust(12) for c in cols)]
    for name, row in rows.items():
        cells = "  ".join(f"{row.get(c, float('nan')):12.4f}" for c in cols)
        lines.append(name.ljust(width) + cells)
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    print(text)


def _emit_plot(preset, rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(rows)
    keys = [k for k in next(iter(rows.values())) if k != "lpips"]
    if preset == "aug_size":
        xs = [int(n[1:]) for n in names]
        for key in keys:
            ax.plot(xs, [rows[n][key] for n in names], marker="o", label=key)
        ax.set_xlabel("augmentation size K")
        ax2 = ax.twinx()
        ax2.plot(xs, [rows[n]["lpips"] for n in names], marker="s",
                 color="k", label="lpips")
        ax2.set_ylabel("lpips")
    else:
        x = np.arange(len(names))
        for j, key in enumerate(keys + ["lpips"]):
            vals = [rows[n].get(key, np.nan) for n in names]
            ax.bar(x + 0.15 * j, vals, width=0.14, label=key)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("FID")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_stylize(ckpt_path, in_dir, out_dir, run_dir=None):
    gen, _, _, _ = translator.load_translator(ckpt_path)
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in in_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    n_ok = 0
    t0 = time.perf_counter()
    for p in files:
        try:
            save_image(translator.stylize(gen, load_image(p)), out_dir / p.name)
            n_ok += 1
        except Exception as e:  # per-file failures must not stop the batch
            _log(f"[stylize] warning: {p.name}: {e}")
    elapsed = time.perf_counter() - t0
    if n_ok:
        rate = n_ok / elapsed
        print(f"stylized {n_ok}/{len(files)} images, {rate:.1f} images/sec")
        if run_dir is not None:
            tpath = Path(run_dir) / "logs" / "timings.json"
            if tpath.exists():
                with open(tpath) as fh:
                    t = json.load(fh)
                ratio = rate * t["gis_seconds_per_image"]
                print(f"{ratio:.0f}x faster than guided diffusion "
                      f"({t['n_steps']} steps)")
    else:
        print("stylized 0 images")
    return 2 if files and n_ok == 0 else 0


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser():
    p = _Parser(prog="styleboost")
    sub = p.add_subparsers(dest="command", required=True)
    common = dict(config=("--config", "path to a config JSON file"),
                  run=("--run-dir", "run directory (default ./run)"))
    for name in ("datagen", "train-diffusion", "invert", "augment",
                 "train-translator", "evaluate", "pipeline", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument(common["config"][0], help=common["config"][1])
        sp.add_argument(common["run"][0], default="run",
                        help=common["run"][1])
        sp.add_argument("--seed", type=int, help="override root seed")
        if name in ("train-translator", "evaluate", "pipeline"):
            sp.add_argument("--k", type=int,
                            help="augmentation subset size (0 = no aug)")
        if name == "ablate":
            sp.add_argument("--preset", required=True,
                            choices=["aug_size", "self_vs_cross",
                                     "guidance_factors"])
    sp = sub.add_parser("stylize")
    sp.add_argument("checkpoint")
    sp.add_argument("in_dir")
    sp.add_argument("out_dir")
    sp.add_argument("--run-dir", help="run dir with a gis timing log")
    return p


def _load_cfg(args):
    run_cfg = Path(args.run_dir) / "config.json"
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif run_cfg.exists():
        cfg = ExperimentConfig.load(run_cfg)
    else:
        cfg = ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.root_seed = args.seed
    return cfg


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "stylize":
            return cmd_stylize(args.checkpoint, args.in_dir, args.out_dir,
                               args.run_dir)
        cfg = _load_cfg(args)
        runner = Runner(cfg, args.run_dir)
        k = getattr(args, "k", None)
        dispatch = {
            "datagen": lambda: cmd_datagen(runner),
            "train-diffusion": lambda: cmd_train_diffusion(runner),
            "invert": lambda: cmd_invert(runner),
            "augment": lambda: cmd_augment(runner),
            "train-translator": lambda: cmd_train_translator(runner, k),
            "evaluate": lambda: cmd_evaluate(runner, k),
            "pipeline": lambda: cmd_pipeline(runner, k),
            "ablate": lambda: cmd_ablate(runner, args.preset),
        }
        return dispatch[args.command]()
    except (ConfigError, FileNotFoundError) as e:
        _log(f"error: {e}")
        return 1
    except Exception as e:  # runtime failure
        _log(f"runtime failure in {args.command}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
