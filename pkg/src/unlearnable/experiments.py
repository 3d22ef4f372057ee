"""Experiment configs, shared pipeline context and the canned reproductions.

Every artifact path written into a summary is relative to the output
directory, and nothing machine-specific is echoed, so two runs with the same
master seed produce byte-identical files.
"""
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import (CLASSWISE, FORMS, SAMPLEWISE, Dataset, apply_noise, load_idx, load_mnist_subset,
                   mix_unlearnable, protect_classes, save_noise, train_test_blobs, transfer_noise)
from .errors import ParameterError, SpecError
from .models import ModelSpec
from .noise import (BiLevelConfig, PenaltyConfig, generate_error_max, generate_error_min_classwise,
                    generate_error_min_samplewise, generate_penalty_noise, generate_random, generation_log,
                    mix_noises, write_generation_log)
from .seeds import derive_seed
from .train import (AdvTrainConfig, TrainConfig, backdoor_asr, train_model, write_curve_csv,
                    write_report_json)

NOISE_TYPES = ("error_min", "error_max", "random", "penalty", "mixed")
SCENARIOS = ("full", "fraction", "protected_classes", "transfer", "patch", "backdoor")
IMAGE_EPSILON = 8 / 255
BLOB_EPSILON = 0.1


# ------------------------------------------------------------------ config

def load_config(path):
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ParameterError(f"{path}: config must be a JSON object")
    return validate_config(cfg, base=Path(path).parent)


def validate_config(cfg, base=Path(".")):
    """Fill defaults and check an experiment config dict."""
    cfg = json.loads(json.dumps(cfg))
    ds = cfg.setdefault("dataset", {"source": "mnist_subset"})
    src = ds.setdefault("source", "mnist_subset")
    if src == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in ds:
                raise ParameterError(f"idx dataset needs {key!r}")
            p = Path(ds[key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
            ds[key] = str(p)
    elif src not in ("mnist_subset", "blobs"):
        raise ParameterError(f"unknown dataset source {src!r}")
    cfg.setdefault("model", {"arch": "mlp"})
    noise = cfg.setdefault("noise", {})
    noise.setdefault("type", "error_min")
    noise.setdefault("form", CLASSWISE)
    if noise["type"] not in NOISE_TYPES:
        raise ParameterError(f"noise type must be one of {NOISE_TYPES}")
    if noise["form"] not in FORMS:
        raise ParameterError(f"noise form must be one of {FORMS}")
    scen = cfg.setdefault("scenario", {"kind": "full"})
    kinds = [k for k in SCENARIOS if k == scen.get("kind")]
    if len(kinds) != 1:
        raise ParameterError(f"scenario.kind must be exactly one of {SCENARIOS}")
    if scen["kind"] == "transfer":
        p = Path(scen.get("class_map", ""))
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise FileNotFoundError(f"class map not found: {p}")
        scen["class_map"] = str(p)
    if scen["kind"] == "fraction" and not 0 <= float(scen.get("p", -1)) <= 1:
        raise ParameterError("fraction scenario needs 0 <= p <= 1")
    if scen["kind"] == "protected_classes" and "classes" not in scen:
        raise ParameterError("protected_classes scenario needs a 'classes' list")
    if scen["kind"] == "patch" and len(scen.get("size", ())) != 2:
        raise ParameterError("patch scenario needs size [ph, pw]")
    if scen["kind"] == "backdoor" and "target" not in scen:
        raise ParameterError("backdoor scenario needs a 'target' class")
    cfg.setdefault("train", {})
    cfg.setdefault("seed", 0)
    return cfg


def load_dataset(ds):
    src = ds.get("source", "mnist_subset")
    if src == "mnist_subset":
        train, test = load_mnist_subset(ds.get("root"))
    elif src == "idx":
        k = ds.get("num_classes")
        train = load_idx(ds["train_images"], ds["train_labels"], k, "idx-train")
        test = load_idx(ds["test_images"], ds["test_labels"], train.num_classes, "idx-test")
    elif src == "blobs":
        train, test = train_test_blobs(int(ds.get("num_classes", 4)), int(ds.get("n_train_per_class", 200)),
                                       int(ds.get("n_test_per_class", 100)), int(ds.get("dims", 16)),
                                       float(ds.get("spread", 0.1)), int(ds.get("seed", 0)))
    else:
        raise ParameterError(f"unknown dataset source {src!r}")
    if ds.get("limit_train"):
        train = train.subset(np.arange(min(len(train), int(ds["limit_train"]))))
    if ds.get("limit_test"):
        test = test.subset(np.arange(min(len(test), int(ds["limit_test"]))))
    return train, test


def default_epsilon(ds):
    return BLOB_EPSILON if ds.get("source") == "blobs" else IMAGE_EPSILON


def build_spec(mcfg, dataset):
    widths = mcfg.get("widths")
    return ModelSpec(mcfg.get("arch", "mlp"), dataset.image_shape, dataset.num_classes,
                     tuple(widths) if widths else None)


def _pick(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ParameterError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return d


def make_train_config(tcfg, seed):
    tcfg = dict(tcfg)
    adv = tcfg.pop("adv_train", None)
    cfg = TrainConfig(seed=seed, **_pick(TrainConfig, tcfg))
    if adv is not None:
        cfg.adv_train = adv if isinstance(adv, AdvTrainConfig) else AdvTrainConfig(**_pick(AdvTrainConfig, adv))
    return cfg


# ----------------------------------------------------------------- context

def _eps_tag(eps):
    return f"{eps:.6f}".rstrip("0").rstrip(".")


class Context:
    """Datasets, defaults and caches shared by the runs of one experiment.

    Noise sets and the clean baseline are generated once, written under
    ``out/noise`` and ``out/runs``, and reused by every run that needs them.
    """

    def __init__(self, train, test, spec, seed, out, epsilon=IMAGE_EPSILON, train_cfg=None,
                 bilevel=None, penalty=None, error_max=None, threads=1):
        self.train, self.test, self.spec = train, test, spec
        self.seed = int(seed)
        self.out = Path(out)
        self.epsilon = epsilon
        self.train_cfg = dict(train_cfg or {})
        self.bilevel = dict(bilevel or {})
        self.penalty = dict(penalty or {})
        self.error_max = dict(error_max or {})
        self.threads = max(1, int(threads))
        self.nonconverged = []
        self.written = []
        self._cache = {}
        self._locks = {}
        self._guard = threading.Lock()

    @classmethod
    def from_config(cls, cfg, out, seed=None, threads=1):
        train, test = load_dataset(cfg["dataset"])
        spec = build_spec(cfg["model"], train)
        noise = cfg.get("noise", {})
        eps = float(noise.get("epsilon", default_epsilon(cfg["dataset"])))
        return cls(train, test, spec, cfg["seed"] if seed is None else seed, out, eps, cfg.get("train"),
                   noise.get("bilevel"), noise.get("penalty"), noise.get("error_max"), threads)

    # --- plumbing

    def _once(self, key, fn):
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._cache:
                self._cache[key] = fn()
            return self._cache[key]

    def _record(self, path):
        rel = str(Path(path).relative_to(self.out))
        with self._guard:
            self.written.append(rel)
        return rel

    def map(self, fn, items):
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def train_config(self, **overrides):
        tcfg = dict(self.train_cfg)
        tcfg.update(overrides)
        return make_train_config(tcfg, derive_seed(self.seed, "train"))

    def bilevel_config(self, form, epsilon, tag=""):
        return BiLevelConfig.defaults(form, epsilon=epsilon, seed=derive_seed(self.seed, "noise", form, tag),
                                      **_pick(BiLevelConfig, self.bilevel))

    # --- shared artifacts

    def clean(self, spec=None, name=None, **overrides):
        """Victim trained on the clean training set: ``(model, report)``."""
        spec = spec or self.spec
        if name is None:
            name = "clean" if spec == self.spec else f"clean_{spec.arch}"
        return self._once(("clean", name), lambda: self._victim(name, self.train, spec, overrides))

    def noise(self, kind, form, epsilon=None, patch=None, spec=None, tag=""):
        """Generate (or fetch) a noise set; writes ``noise/<key>.unln`` and its log."""
        eps = self.epsilon if epsilon is None else epsilon
        spec = spec or self.spec
        key = f"{kind}_{form}_e{_eps_tag(eps)}_{spec.arch}"
        if patch is not None:
            key += f"_p{patch[0]}x{patch[1]}"
        if tag:
            key += f"_{tag}"
        return self._once(("noise", key), lambda: self._make_noise(key, kind, form, eps, patch, spec, tag))

    def _make_noise(self, key, kind, form, eps, patch, spec, tag):
        seed = derive_seed(self.seed, "noise", key)
        result, cfg = None, None
        if kind == "error_min":
            cfg = self.bilevel_config(form, eps, tag)
            if form == SAMPLEWISE:
                if patch is not None:
                    raise ParameterError("patch noise is class-wise only")
                result = generate_error_min_samplewise(self.train, spec, cfg)
            else:
                result = generate_error_min_classwise(self.train, spec, cfg, patch)
        elif kind == "penalty":
            cfg = BiLevelConfig.defaults(SAMPLEWISE, epsilon=eps, seed=derive_seed(self.seed, "noise", "penalty", tag),
                                         **{"model_steps": 100, **_pick(BiLevelConfig, self.bilevel)})
            pcfg = PenaltyConfig(seed=seed, **_pick(PenaltyConfig, self.penalty))
            result = generate_penalty_noise(self.train, spec, cfg, pcfg)
        elif kind == "error_max":
            pretrained, _ = self.clean(spec)
            steps = int(self.error_max.get("steps", 20))
            alpha = float(self.error_max.get("alpha", eps / 10))
            noise = generate_error_max(self.train, pretrained, steps, alpha, eps, form, seed)
            cfg = {"steps": steps, "alpha": alpha, "epsilon": eps, "form": form}
        elif kind == "random":
            if form == SAMPLEWISE:
                noise = generate_random(len(self.train), eps, form, seed, self.train.image_shape, patch)
            else:
                noise = generate_random(self.train.num_classes, eps, form, seed, self.train.image_shape, patch)
            cfg = {"epsilon": eps, "form": form}
        else:
            raise ParameterError(f"cannot generate noise of type {kind!r} here")
        if result is not None:
            noise = result.noise
            if not result.converged:
                with self._guard:
                    self.nonconverged.append(key)
            log = generation_log(result, cfg, seed, {"key": key})
        else:
            log = {"rounds": 0, "train_error": [], "converged": True, "config": cfg, "seed": seed, "key": key}
        (self.out / "noise").mkdir(parents=True, exist_ok=True)
        save_noise(noise, self.out / "noise" / f"{key}.unln")
        write_generation_log(self.out / "noise" / f"{key}.log.json", log)
        self._record(self.out / "noise" / f"{key}.unln")
        self._record(self.out / "noise" / f"{key}.log.json")
        return noise

    def _victim(self, name, dataset, spec, overrides, extra=None):
        cfg = self.train_config(**overrides)
        model, report = train_model(dataset, self.test, spec, cfg)
        if extra:
            for k, v in extra(model).items():
                setattr(report, k, v)
        run_dir = self.out / "runs" / name
        run_dir.mkdir(parents=True, exist_ok=True)
        write_report_json(report, run_dir / "report.json")
        write_curve_csv(report, run_dir / "curve.csv")
        self._record(run_dir / "report.json")
        self._record(run_dir / "curve.csv")
        return model, report

    def victim(self, name, dataset, spec=None, extra=None, **overrides):
        """Train a fresh victim and write ``runs/<name>/{report.json,curve.csv}``."""
        return self._victim(name, dataset, spec or self.spec, overrides, extra)


def run_entry(name, report, **info):
    entry = {"run": name, "final_acc": report.final_acc, "max_acc": report.max_acc,
             "report": f"runs/{name}/report.json", "curve": f"runs/{name}/curve.csv"}
    entry.update(info)
    return entry


def mean_backdoor_asr(model, test, noise):
    """ASR averaged over every target class."""
    return float(np.mean([backdoor_asr(model, test, noise, t) for t in range(test.num_classes)]))


# ------------------------------------------------------------ experiments

def fig1_compare(ctx):
    clean_model, clean_report = ctx.clean()
    jobs = [(kind, form) for form in (SAMPLEWISE, CLASSWISE) for kind in ("random", "error_max", "error_min")]
    for kind, form in jobs:
        ctx.noise(kind, form)

    def run(job):
        kind, form = job
        name = f"{kind}_{form}"
        _, rep = ctx.victim(name, apply_noise(ctx.train, ctx.noise(kind, form), patch_seed=derive_seed(ctx.seed, "patch")))
        return run_entry(name, rep, noise=kind, form=form)

    return {"baseline": run_entry("clean", clean_report), "runs": ctx.map(run, jobs)}


PERCENTAGES = (0.2, 0.4, 0.6, 0.8)


def table_percentages(ctx, fractions=PERCENTAGES):
    _, clean_report = ctx.clean()
    jobs = []
    for form in (SAMPLEWISE, CLASSWISE):
        ctx.noise("error_min", form)
        jobs += [(form, p, part) for p in fractions for part in ("mixed", "clean_only")]
        jobs.append((form, 1.0, "mixed"))

    def run(job):
        form, p, part = job
        unl = apply_noise(ctx.train, ctx.noise("error_min", form))
        mixed, clean_only = mix_unlearnable(ctx.train, unl, p, derive_seed(ctx.seed, "mix", f"{p:g}"))
        name = f"{form}_p{int(round(p * 100))}_{part}"
        _, rep = ctx.victim(name, mixed if part == "mixed" else clean_only)
        return run_entry(name, rep, form=form, fraction=p, part=part)

    return {"baseline": run_entry("clean", clean_report), "runs": ctx.map(run, jobs)}


def _protect_runs(ctx, class_sets):
    jobs = [(form, tuple(cs)) for form in (SAMPLEWISE, CLASSWISE) for cs in class_sets]
    for form in (SAMPLEWISE, CLASSWISE):
        ctx.noise("error_min", form)

    def run(job):
        form, classes = job
        name = f"{form}_protect_{'-'.join(str(c) for c in classes)}"
        _, rep = ctx.victim(name, protect_classes(ctx.train, ctx.noise("error_min", form), classes))
        rec = rep.per_class_recall
        prot = [rec[c] for c in classes if rec[c] is not None]
        other = [r for i, r in enumerate(rec) if i not in classes and r is not None]
        return run_entry(name, rep, form=form, classes=list(classes), per_class_recall=rec,
                         protected_recall=float(np.mean(prot)) if prot else None,
                         unprotected_recall=float(np.mean(other)) if other else None)

    _, clean_report = ctx.clean()
    return {"baseline": run_entry("clean", clean_report, per_class_recall=clean_report.per_class_recall),
            "runs": ctx.map(run, jobs)}


def single_class(ctx, target=2):
    return _protect_runs(ctx, [(target,)])


def multi_class(ctx, counts=(2, 4, 8)):
    return _protect_runs(ctx, [tuple(range(k)) for k in counts if k <= ctx.train.num_classes])


def patch_sizes(ctx, fractions=(0.25, 0.5, 0.75, 1.0), augmentations=("none", "fixed_policy")):
    """Class-wise patch noise with sides scaled like 8/16/24/32 of a 32-pixel image."""
    _, h, w = ctx.train.image_shape
    sizes = sorted({(max(1, int(round(h * f))), max(1, int(round(w * f)))) for f in fractions})
    for s in sizes:
        ctx.noise("error_min", CLASSWISE, patch=None if s == (h, w) else s)
    jobs = [(s, aug) for s in sizes for aug in augmentations]

    def run(job):
        s, aug = job
        noise = ctx.noise("error_min", CLASSWISE, patch=None if s == (h, w) else s)
        name = f"patch{s[0]}x{s[1]}_{aug}"
        _, rep = ctx.victim(name, apply_noise(ctx.train, noise, patch_seed=derive_seed(ctx.seed, "patch", name)),
                            augmentation=aug)
        return run_entry(name, rep, patch=list(s), augmentation=aug)

    return {"runs": ctx.map(run, jobs)}


def mixtures(ctx, augmentations=("none", "fixed_policy")):
    c1 = ctx.noise("error_min", CLASSWISE, tag="c1")
    c2 = ctx.noise("error_min", CLASSWISE, tag="c2")
    u = ctx.noise("random", SAMPLEWISE)
    labels = ctx.train.labels
    mixes = {
        "c1_or_c2": mix_noises(c1, c2, "alternate", derive_seed(ctx.seed, "mix", "alternate"), labels),
        "c1_plus_u": mix_noises(c1, u, "add", labels=labels),
    }
    jobs = [(m, aug) for m in mixes for aug in augmentations]

    def run(job):
        m, aug = job
        name = f"{m}_{aug}"
        _, rep = ctx.victim(name, apply_noise(ctx.train, mixes[m]), augmentation=aug)
        return run_entry(name, rep, mixture=m, augmentation=aug)

    return {"runs": ctx.map(run, jobs)}


AUGMENTATION_GRID = ("none", "cutout", "mixup", "cutmix", "fixed_policy")


def augmentation_grid(ctx, augmentations=AUGMENTATION_GRID):
    for form in (SAMPLEWISE, CLASSWISE):
        ctx.noise("error_min", form)
    jobs = [(form, aug) for form in ("clean", SAMPLEWISE, CLASSWISE) for aug in augmentations]

    def run(job):
        form, aug = job
        data = ctx.train if form == "clean" else apply_noise(ctx.train, ctx.noise("error_min", form))
        name = f"{form}_{aug}"
        _, rep = ctx.victim(name, data, augmentation=aug)
        return run_entry(name, rep, form=form, augmentation=aug)

    return {"runs": ctx.map(run, jobs)}


def adv_train_sweep(ctx, noise_multipliers=(1, 2, 3), adv_epsilon=None):
    """Adversarial training (radius fixed at the base epsilon) against noise of growing size."""
    adv_eps = ctx.epsilon if adv_epsilon is None else adv_epsilon
    adv = {"epsilon": adv_eps}
    _, clean_report = ctx.clean()
    eps_list = [ctx.epsilon * m for m in noise_multipliers]
    for form in (SAMPLEWISE, CLASSWISE):
        for eps in eps_list:
            ctx.noise("error_min", form, epsilon=eps)
    jobs = [("clean", None)] + [(form, eps) for form in (SAMPLEWISE, CLASSWISE) for eps in eps_list]

    def run(job):
        form, eps = job
        if form == "clean":
            _, rep = ctx.clean(name="clean_adv", adv_train=adv)
            return run_entry("clean_adv", rep, form="clean", noise_epsilon=0.0)
        name = f"{form}_e{_eps_tag(eps)}_adv"
        _, rep = ctx.victim(name, apply_noise(ctx.train, ctx.noise("error_min", form, epsilon=eps)), adv_train=adv)
        return run_entry(name, rep, form=form, noise_epsilon=eps)

    return {"baseline": run_entry("clean", clean_report), "adv_epsilon": adv_eps, "runs": ctx.map(run, jobs)}


BACKDOOR_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def backdoor_rates(ctx, fractions=BACKDOOR_FRACTIONS):
    kinds = ("random", "error_max", "error_min")
    for kind in kinds:
        ctx.noise(kind, CLASSWISE)
    jobs = [(kind, p) for kind in kinds for p in fractions]

    def run(job):
        kind, p = job
        noise = ctx.noise(kind, CLASSWISE)
        unl = apply_noise(ctx.train, noise)
        mixed, _ = mix_unlearnable(ctx.train, unl, p, derive_seed(ctx.seed, "backdoor", f"{p:g}"))
        name = f"backdoor_{kind}_p{int(round(p * 100))}"
        _, rep = ctx.victim(name, mixed, extra=lambda m: {"backdoor_asr": mean_backdoor_asr(m, ctx.test, noise)})
        return run_entry(name, rep, noise=kind, fraction=p, backdoor_asr=rep.backdoor_asr)

    return {"runs": ctx.map(run, jobs)}


def penalty_vs_pgd(ctx):
    pgd = ctx.noise("error_min", SAMPLEWISE)
    pen = ctx.noise("penalty", SAMPLEWISE)
    jobs = [("pgd", pgd), ("penalty", pen)]

    def run(job):
        name, noise = job
        _, rep = ctx.victim(f"{name}_samplewise", apply_noise(ctx.train, noise))
        return run_entry(f"{name}_samplewise", rep, generator=name)

    return {"runs": ctx.map(run, jobs)}


def transfer(ctx, victim_arch="smallconv"):
    """Cross-dataset transfer with a class map, and cross-model transfer.

    Cross-dataset: class-wise noise generated on the first half of the training
    set (source task) is mapped onto a coarser task built from the second half,
    where destination class k merges source classes 2k and 2k + 1 and receives
    the source delta of class 2k. Cross-model: noise made with the configured
    source model is used against a victim of ``victim_arch``.
    """
    runs = []
    n = len(ctx.train)
    k = ctx.train.num_classes
    src = ctx.train.subset(np.arange(n // 2), "transfer-source")
    dst_k = max(1, k // 2)

    def coarse(d, name):
        return Dataset(d.images, np.minimum(d.labels // 2, dst_k - 1), dst_k, name)

    dst = coarse(ctx.train.subset(np.arange(n // 2, n)), "transfer-dest")
    dst_test = coarse(ctx.test, "transfer-dest-test")
    class_map = {d: 2 * d for d in range(dst_k)}
    (ctx.out / "transfer").mkdir(parents=True, exist_ok=True)
    with open(ctx.out / "transfer" / "class_map.json", "w") as fh:
        json.dump({str(d): s for d, s in class_map.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ctx._record(ctx.out / "transfer" / "class_map.json")
    sub = Context(src, ctx.test, ctx.spec, derive_seed(ctx.seed, "transfer"), ctx.out / "transfer",
                  ctx.epsilon, ctx.train_cfg, ctx.bilevel, ctx.penalty, ctx.error_max)
    src_noise = sub.noise("error_min", CLASSWISE)
    for rel in sub.written:
        ctx._record(sub.out / rel)
    ctx.nonconverged += [f"transfer/{key}" for key in sub.nonconverged]
    moved = transfer_noise(src_noise, class_map, dst_k)
    dst_spec = replace(ctx.spec, num_classes=dst_k)
    dst_ctx = Context(dst, dst_test, dst_spec, ctx.seed, ctx.out, ctx.epsilon, ctx.train_cfg)
    _, rep = dst_ctx.victim("transfer_dest_clean", dst)
    runs.append(run_entry("transfer_dest_clean", rep, setting="cross_dataset", noise="none"))
    _, rep = dst_ctx.victim("transfer_dest_unlearnable", apply_noise(dst, moved))
    runs.append(run_entry("transfer_dest_unlearnable", rep, setting="cross_dataset", noise="error_min"))
    ctx.written += dst_ctx.written
    try:
        victim_spec = replace(ctx.spec, arch=victim_arch, widths=None)
    except SpecError:
        victim_spec = None
    if victim_spec is not None and victim_spec != ctx.spec:
        noise = ctx.noise("error_min", CLASSWISE)
        _, rep = ctx.clean(victim_spec)
        runs.append(run_entry(f"clean_{victim_arch}", rep, setting="cross_model", noise="none"))
        name = f"{ctx.spec.arch}_noise_{victim_arch}_victim"
        _, rep = ctx.victim(name, apply_noise(ctx.train, noise), spec=victim_spec)
        runs.append(run_entry(name, rep, setting="cross_model", noise="error_min"))
    return {"class_map": "transfer/class_map.json", "runs": runs}


EXPERIMENTS = {
    "fig1_compare": fig1_compare,
    "table_percentages": table_percentages,
    "single_class": single_class,
    "multi_class": multi_class,
    "patch_sizes": patch_sizes,
    "mixtures": mixtures,
    "augmentation_grid": augmentation_grid,
    "adv_train_sweep": adv_train_sweep,
    "backdoor_rates": backdoor_rates,
    "penalty_vs_pgd": penalty_vs_pgd,
    "transfer": transfer,
}


def reproduce(name, ctx):
    """Run one canned experiment and write ``summary.json``; returns the summary."""
    if name not in EXPERIMENTS:
        raise ParameterError(f"unknown experiment {name!r}; valid names: {', '.join(EXPERIMENTS)}")
    ctx.out.mkdir(parents=True, exist_ok=True)
    summary = EXPERIMENTS[name](ctx)
    summary = {"experiment": name, "seed": ctx.seed, "epsilon": ctx.epsilon,
               "nonconverged": sorted(ctx.nonconverged), "files": sorted(set(ctx.written)), **summary}
    with open(ctx.out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
