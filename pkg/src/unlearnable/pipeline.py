"""Experiment stages shared by the command line: data, poison, probes, training, attacks, DFR."""

import csv
import dataclasses
import hashlib
import json
import os
import shutil

import numpy as np

from . import attacks, data, dfr, poisons, probes
from .config import derive_seed
from .errors import ConfigError
from .models import ConvNet, evaluate, save_checkpoint
from .optim import LbfgsConfig

SUMMARY = "summary.json"
FAILED = "FAILED"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Artifacts:
    """Files written into one output directory, tracked for the summary manifest."""

    def __init__(self, directory):
        self.directory = directory
        self.files = []
        os.makedirs(directory, exist_ok=True)

    def path(self, name):
        full = os.path.join(self.directory, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return full

    def manifest(self):
        return {name: sha256_file(os.path.join(self.directory, name)) for name in self.files}


# --- stages -------------------------------------------------------------------


def load_data(cfg):
    d = cfg.data
    if cfg.scale == "full" and d.source == "synthetic":
        raise ConfigError("scale 'full' needs data.source 'cifar10' or 'files'")
    if d.source == "synthetic":
        return data.generate_synthetic_clean(d.k, d.n_per_class, d.h, d.w, seed=derive_seed(cfg.seed, "data"),
                                             noise=d.noise)
    if d.source == "cifar10":
        return data.load_cifar10(d.path)
    return data.load_dataset(d.train_path), data.load_dataset(d.test_path)


def make_poison(cfg, train, surrogate=None):
    """Perturbation set for the configured variant, or ``None`` for clean runs."""
    p = cfg.poison
    seed = derive_seed(cfg.seed, "poison")
    if p.variant == "none":
        return None
    if p.variant in poisons.CLASSWISE_VARIANTS:
        return poisons.gen_classwise(p.variant, train.num_classes, train.shape, p.eps, p.patches, seed=seed)
    if p.variant == "samplewise-random":
        return poisons.gen_samplewise_random(len(train), train.shape, poisons.Constraint(p.constraint, p.eps), seed)
    if surrogate is None:
        raise ConfigError("adversarial poison needs a surrogate trained on clean data")
    return poisons.gen_adversarial_poison(surrogate, train, p.eps, p.steps, p.step_size, seed=seed)


def poison_name(cfg):
    p = cfg.poison
    return f"regions-{p.patches}" if p.variant == "regions" else p.variant


def train_victim(cfg, train, test, save_checkpoints=False):
    return attacks.standard_training(train, test, cfg.victim_sgd(), seed=derive_seed(cfg.seed, "victim-init"),
                                     save_checkpoints=save_checkpoints)


def run_probes(cfg, clean, poisoned, arts):
    pr = cfg.probes
    lbfgs = LbfgsConfig(steps=pr.steps)
    results = []
    if pr.perturbations and poisoned is not None:
        acc = probes.separability_probe("perturbations", poisoned, clean, lbfgs=lbfgs)
        results.append(probes.ProbeResult("perturbations", poison_name(cfg), acc, pr.steps))
    if pr.images:
        acc = probes.separability_probe("images", clean, lbfgs=lbfgs)
        results.append(probes.ProbeResult("images", "clean", acc, pr.steps))
        if poisoned is not None:
            acc = probes.separability_probe("images", poisoned, lbfgs=lbfgs)
            results.append(probes.ProbeResult("images", poison_name(cfg), acc, pr.steps))
    if results:
        probes.write_probe_csv(results, arts.path("probes.csv"))
    return results


def run_attack(cfg, poisoned, test, arts):
    a = cfg.attack
    seed = derive_seed(cfg.seed, "victim-init")
    victim = cfg.victim_sgd()
    if a.name == "ortho-proj":
        lin = attacks.LINEAR_SGD
        if a.linear:
            lin = dataclasses.replace(lin, **{k: tuple(v) if k == "milestones" else v for k, v in a.linear.items()})
        result = attacks.orthogonal_projection_attack(poisoned, test, lin, victim, seed=seed)
        data.save_dataset(result.recovered, arts.path("recovered.unln"))
        if cfg.probes.weights and len(poisoned.shape) == 3 and poisoned.shape[0] == 3:
            for path in probes.export_weight_visualization(result.extras["linear"].weights, poisoned.shape,
                                                           os.path.join(arts.directory, "weights")):
                arts.path(os.path.relpath(path, arts.directory))
        return result
    if a.name == "adv-train":
        sgd = dataclasses.replace(attacks.ADV_SGD, seed=victim.seed)
        if a.sgd:
            sgd = dataclasses.replace(sgd, **{k: tuple(v) if k == "milestones" else v for k, v in a.sgd.items()})
        pgd = attacks.PgdConfig(a.pgd.eps, a.pgd.steps, a.pgd.step_size)
        return attacks.adversarial_training(poisoned, test, pgd, sgd, seed=seed)
    if a.name == "class-avg-sub":
        return attacks.class_average_subtraction(poisoned, test, victim, seed=seed)
    return None


def run_dfr(cfg, clean, test, series, arts):
    subset = data.subset_random(clean, cfg.dfr.fraction, seed=derive_seed(cfg.seed, "dfr-subset"))
    baseline = ConvNet(clean.shape, clean.num_classes, seed=derive_seed(cfg.seed, "victim-init"))
    baseline.fit_input_stats(clean.images)
    b_acc, b_loss = dfr.dfr_evaluate(baseline, subset, test)
    template = ConvNet(clean.shape, clean.num_classes)
    sweep = dfr.dfr_sweep(series, template, subset, test)
    dfr.write_dfr_csv(sweep, arts.path("dfr.csv"))
    return sweep, b_acc, b_loss


# --- full pipeline --------------------------------------------------------------


def run_experiment(cfg, root, config_bytes=b""):
    """Run every configured stage into ``root/<run id>`` and return that directory.

    A directory that already holds a summary is left untouched. On error a
    ``FAILED`` marker is written and partial artifacts stay in place.
    """
    run_dir = os.path.join(root, cfg.run_id())
    if os.path.exists(os.path.join(run_dir, SUMMARY)):
        return run_dir, False
    if os.path.isdir(run_dir):
        shutil.rmtree(run_dir)
    arts = Artifacts(run_dir)
    try:
        summary = _pipeline(cfg, arts, config_bytes)
    except Exception as exc:
        with open(os.path.join(run_dir, FAILED), "w") as fh:
            fh.write(f"{type(exc).__name__}: {exc}\n")
        raise
    with open(os.path.join(run_dir, SUMMARY), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_dir, True


def _pipeline(cfg, arts, config_bytes):
    train, test = load_data(cfg)
    data.save_dataset(train, arts.path("data/train.unln"))
    data.save_dataset(test, arts.path("data/test.unln"))
    rows = []
    metrics = {}

    clean_run = train_victim(cfg, train, test, save_checkpoints=cfg.poison.variant == "none" and cfg.dfr.enabled)
    save_checkpoint(clean_run.model, arts.path("checkpoints/clean.ckpt"))
    rows += [("none", "clean", r) for r in clean_run.history]
    metrics["clean_acc"] = clean_run.test_acc

    perts = make_poison(cfg, train, surrogate=clean_run.model)
    poisoned = None
    if perts is not None:
        poisons.save_perturbations(perts, arts.path("poison/perturbations.unlp"))
        poisoned = poisons.apply_poison(train, perts)
        data.save_dataset(poisoned, arts.path("poison/poisoned.unln"))

    results = run_probes(cfg, train, poisoned, arts)
    for r in results:
        key = "probe_acc" if r.target == "perturbations" else f"probe_images_{'clean' if r.poison == 'clean' else 'poisoned'}_acc"
        metrics[key] = r.train_acc

    name = poison_name(cfg)
    if poisoned is None:
        base_run, victim_set = clean_run, train
    else:
        base_run = train_victim(cfg, poisoned, test, save_checkpoints=cfg.dfr.enabled)
        save_checkpoint(base_run.model, arts.path("checkpoints/poisoned.ckpt"))
        rows += [("none", name, r) for r in base_run.history]
        victim_set = poisoned
    metrics["no_attack_acc"] = base_run.test_acc

    if cfg.dfr.enabled:
        sweep, b_acc, b_loss = run_dfr(cfg, train, test, base_run.extras["checkpoints"], arts)
        metrics.update(max_dfr_acc=sweep.max_acc, dfr_argmax_epoch=sweep.argmax_epoch,
                       min_dfr_loss=sweep.min_loss, dfr_random_init_acc=b_acc, dfr_random_init_loss=b_loss)

    result = run_attack(cfg, victim_set, test, arts)
    if result is not None:
        rows += [(result.name, name, r) for r in result.history]
        save_checkpoint(result.model, arts.path("checkpoints/attack.ckpt"))
        metrics["attack_acc"] = result.test_acc

    attacks.write_metrics_csv(rows, arts.path("metrics.csv"))
    return {
        "run_id": cfg.run_id(),
        "scale": cfg.scale,
        "poison": name,
        "attack": cfg.attack.name,
        "config": cfg.to_dict(),
        "inputs": _input_hashes(cfg, config_bytes),
        "metrics": {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in metrics.items()},
        "artifacts": arts.manifest(),
    }


def _input_hashes(cfg, config_bytes):
    hashes = {"config": hashlib.sha256(config_bytes or cfg.canonical_json().encode()).hexdigest()}
    d = cfg.data
    if d.source == "files":
        hashes["train"] = sha256_file(d.train_path)
        hashes["test"] = sha256_file(d.test_path)
    elif d.source == "cifar10":
        for name in data.CIFAR_TRAIN_FILES + [data.CIFAR_TEST_FILE]:
            hashes[name] = sha256_file(os.path.join(d.path, name))
    return hashes


# --- report -----------------------------------------------------------------------

REPORT_COLUMNS = ("run", "scale", "poison", "attack", "final_acc", "clean_acc", "max_dfr_acc", "probe_acc")
MISSING = "—"


def report_rows(run_dirs, warn=print):
    rows = []
    for d in run_dirs:
        try:
            with open(os.path.join(d, SUMMARY)) as fh:
                s = json.load(fh)
            m = s["metrics"]
            final = m.get("attack_acc", m.get("no_attack_acc"))
            rows.append({
                "run": os.path.basename(os.path.normpath(d)),
                "scale": s["scale"], "poison": s["poison"], "attack": s["attack"],
                "final_acc": final, "clean_acc": m.get("clean_acc"),
                "max_dfr_acc": m.get("max_dfr_acc"), "probe_acc": m.get("probe_acc"),
            })
        except (OSError, ValueError, KeyError, TypeError) as exc:
            warn(f"warning: skipping {d}: malformed summary ({exc})")
    return rows


def _cell(v):
    if v is None:
        return MISSING
    return f"{100 * v:.2f}" if isinstance(v, float) else str(v)


def format_table(rows):
    cells = [list(REPORT_COLUMNS)] + [[_cell(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report_csv(rows, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(REPORT_COLUMNS)
        for r in rows:
            out.writerow([_cell(r[c]) for c in REPORT_COLUMNS])
