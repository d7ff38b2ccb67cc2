"""Desk-scale acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the same verdict. The expensive training
runs are shared through a session-scoped cache, so the whole suite trains each
desk model once. Expect about ten minutes on a single core.
"""
import json
import math
import time
import warnings
from functools import cached_property

import numpy as np
import pytest

from unlearnable import cli
from unlearnable.attacks import (
    PgdConfig, adversarial_training, class_average_subtraction, orthogonal_projection_attack, standard_training,
)
from unlearnable.config import config_from_dict
from unlearnable.data import (
    dataset_bytes, dataset_from_bytes, generate_synthetic_clean, parse_cifar_batch, subset_random,
)
from unlearnable.dfr import dfr_evaluate, dfr_sweep
from unlearnable.errors import FormatError
from unlearnable.linalg import RankDeficiencyWarning, max_abs, project_out, qr_thin
from unlearnable.models import (
    ConvNet, LinearClassifier, checkpoint_bytes, checkpoint_from_bytes, evaluate, model_state,
)
from unlearnable.optim import SgdConfig, finite_difference_check
from unlearnable.poisons import (
    apply_poison, gen_adversarial_poison, gen_classwise, perturbations_bytes, perturbations_from_bytes,
)
from unlearnable.probes import separability_probe

EPS = 8 / 255
DATA_SEED, NOISE_SEED, REGIONS_SEED, SUBSET_SEED, SHUFFLE_SEED = 0, 1, 2, 5, 0


class Timed:
    """Value plus the wall-clock seconds it took to compute."""

    def __init__(self, fn):
        start = time.perf_counter()
        self.value = fn()
        self.seconds = time.perf_counter() - start


class Desk:
    """Lazily computed desk-scale experiments shared by the acceptance tests."""

    def __init__(self):
        self.train, self.test = generate_synthetic_clean(seed=DATA_SEED)
        self.noise = apply_poison(self.train, gen_classwise("random-noise", 10, self.train.shape, seed=NOISE_SEED))
        self.regions = apply_poison(self.train, gen_classwise("regions", 10, self.train.shape, seed=REGIONS_SEED))

    @cached_property
    def clean_run(self):
        return Timed(lambda: standard_training(self.train, self.test))

    @cached_property
    def noise_run(self):
        return Timed(lambda: standard_training(self.noise, self.test, save_checkpoints=True))

    @cached_property
    def regions_run(self):
        return Timed(lambda: standard_training(self.regions, self.test))

    @property
    def a_clean(self):
        return self.clean_run.value.test_acc

    def ortho(self, dataset):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiencyWarning)
            return orthogonal_projection_attack(dataset, self.test)

    @cached_property
    def ortho_runs(self):
        return Timed(lambda: (self.ortho(self.noise), self.ortho(self.train)))

    @cached_property
    def adv_run(self):
        return Timed(lambda: adversarial_training(self.noise, self.test))

    @cached_property
    def dfr(self):
        def compute():
            subset = subset_random(self.train, 0.1, seed=SUBSET_SEED)
            baseline = ConvNet(seed=0)
            baseline.fit_input_stats(self.train.images)
            b_rand = dfr_evaluate(baseline, subset, self.test)
            sweep = dfr_sweep(self.noise_run.value.extras["checkpoints"], ConvNet(), subset, self.test)
            return b_rand, sweep
        return Timed(compute)


@pytest.fixture(scope="session")
def desk():
    return Desk()


def test_criterion_01_linear_algebra(report_criterion):
    start = time.perf_counter()
    worst = dict(orth=0.0, recon=0.0, idem=0.0, resid=0.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((200, 10))
        q, r = qr_thin(w)
        worst["orth"] = max(worst["orth"], max_abs(q.T @ q - np.eye(10)))
        worst["recon"] = max(worst["recon"], max_abs(q @ r - w) / max_abs(w))
        x = rng.standard_normal((20, 200))
        once = project_out(q, x)
        worst["idem"] = max(worst["idem"], max_abs(project_out(q, once) - once))
        worst["resid"] = max(worst["resid"], max_abs(once @ q))
    seconds = time.perf_counter() - start
    ok = (worst["orth"] <= 1e-10 and worst["recon"] <= 1e-8 and worst["idem"] <= 1e-8
          and worst["resid"] <= 1e-8 and seconds < 5)
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {seconds:.1f}s"
    assert report_criterion(1, ok, detail)


def test_criterion_02_gradients(report_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (8, 3, 16, 16))
    y = rng.integers(0, 10, 8)
    lin = LinearClassifier(768, 10, dtype=np.float64, weights=rng.standard_normal((768, 10)) * 0.05,
                           bias=rng.standard_normal(10) * 0.1)
    lin_err = finite_difference_check(lambda p: lin.loss_and_grads(x.reshape(8, -1), y), lin.params,
                                      h=1e-5, coords_per_tensor=50)
    net = ConvNet(seed=1, dtype=np.float64)
    net.fit_input_stats(x)
    net_err = finite_difference_check(lambda p: net.loss_and_grads(x, y), net.params, h=1e-5, coords_per_tensor=50)
    seconds = time.perf_counter() - start
    ok = lin_err <= 1e-4 and net_err <= 1e-3 and seconds < 30
    assert report_criterion(2, ok, f"linear {lin_err:.1e}, convnet {net_err:.1e}, {seconds:.1f}s")


def test_criterion_03_separability(desk, report_criterion):
    start = time.perf_counter()
    regions = separability_probe("perturbations", desk.regions, desk.train)
    noise = separability_probe("perturbations", desk.noise, desk.train)
    clean = separability_probe("images", desk.train)
    shuffled = np.random.default_rng(SHUFFLE_SEED).permutation(desk.train.labels)
    shuffled_noise = separability_probe("perturbations", desk.noise, desk.train, labels=shuffled)
    shuffled_clean = separability_probe("images", desk.train, labels=shuffled)
    seconds = time.perf_counter() - start
    limit = 1 / desk.train.num_classes + 0.15
    ok = (min(regions, noise) >= 0.99 and clean <= min(regions, noise) - 0.25
          and max(shuffled_noise, shuffled_clean) <= limit and seconds < 300)
    detail = (f"regions {regions:.3f}, random-noise {noise:.3f}, clean {clean:.3f}, "
              f"shuffled perturbations {shuffled_noise:.3f} / images {shuffled_clean:.3f} "
              f"(limit {limit:.2f}), {seconds:.0f}s")
    assert report_criterion(3, ok, detail)


def test_criterion_04_poisoning_effectiveness(desk, report_criterion):
    runs = (desk.clean_run, desk.noise_run, desk.regions_run)
    clean, noise, regions = (r.value.test_acc for r in runs)
    slowest = max(r.seconds for r in runs)
    ok = clean >= 0.85 and noise <= 0.20 and regions <= 0.20 and slowest < 600
    detail = f"A_clean {clean:.4f}, random-noise {noise:.4f}, regions {regions:.4f}, slowest run {slowest:.0f}s"
    assert report_criterion(4, ok, detail)


def test_criterion_05_orthogonal_projection(desk, report_criterion):
    on_noise, on_clean = desk.ortho_runs.value
    a_clean = desk.a_clean
    recovered, clean_after = on_noise.test_acc, on_clean.test_acc
    ok = recovered >= a_clean - 0.10 and a_clean - clean_after <= 0.06 and desk.ortho_runs.seconds < 900
    detail = (f"random-noise -> {recovered:.4f} (need {a_clean - 0.10:.4f}), clean {a_clean:.4f} -> "
              f"{clean_after:.4f}, {desk.ortho_runs.seconds:.0f}s")
    assert report_criterion(5, ok, detail)


def test_criterion_06_adversarial_training(desk, report_criterion):
    # Zero radius must reproduce standard training bit for bit (small run).
    small_train, small_test = generate_synthetic_clean(k=4, n_per_class=20, h=8, w=8, seed=3)
    cfg = SgdConfig(epochs=3, batch_size=16)
    zero = adversarial_training(small_train, small_test, PgdConfig(eps=0.0), cfg, seed=2)
    plain = standard_training(small_train, small_test, cfg, seed=2)
    identical = checkpoint_bytes(zero.model) == checkpoint_bytes(plain.model)
    adv = desk.adv_run
    need = desk.a_clean - 0.15
    ok = identical and adv.value.test_acc >= need and adv.seconds < 1800
    detail = (f"PGD-3 eps=8/255 -> {adv.value.test_acc:.4f} (need {need:.4f}), eps=0 identical={identical}, "
              f"{adv.seconds:.0f}s")
    assert report_criterion(6, ok, detail)


def test_criterion_07_class_average_subtraction(desk, report_criterion):
    acc = class_average_subtraction(desk.noise, desk.test).test_acc
    on_noise, _ = desk.ortho_runs.value
    ok = acc <= 0.25
    assert report_criterion(7, ok, f"class-average subtraction {acc:.4f} vs orthogonal projection "
                                   f"{on_noise.test_acc:.4f} on the same poison")


def collapse_epoch(history, num_classes):
    """First epoch where the poison is fitted (train >= 99%) while test accuracy sits near chance."""
    for rec in history:
        if rec.train_acc >= 0.99 and rec.test_acc <= 1 / num_classes + 0.15:
            return rec.epoch
    return None


def test_criterion_08_dfr(desk, report_criterion):
    (b_acc, b_loss), sweep = desk.dfr.value
    collapse = collapse_epoch(desk.noise_run.value.history, desk.train.num_classes)
    ln_k = math.log(desk.train.num_classes)
    margin_ok = sweep.max_acc >= b_acc + 0.10
    early_ok = collapse is not None and sweep.argmax_epoch < collapse
    loss_ok = max(sweep.losses) < ln_k
    seconds = desk.noise_run.seconds + desk.dfr.seconds
    ok = margin_ok and early_ok and loss_ok and seconds < 1200
    detail = (f"max DFR {sweep.max_acc:.4f} at epoch {sweep.argmax_epoch} vs B_rand {b_acc:.4f} "
              f"(margin {'ok' if margin_ok else 'short'}); collapse epoch {collapse}; "
              f"max DFR loss {max(sweep.losses):.3f} vs ln K {ln_k:.3f}; {seconds:.0f}s")
    assert report_criterion(8, ok, detail)


def test_criterion_09_adversarial_poison(desk, report_criterion):
    surrogate = desk.clean_run.value.model
    perts = gen_adversarial_poison(surrogate, desk.train, eps=EPS)
    poisoned = apply_poison(desk.train, perts)
    acc, _ = evaluate(surrogate, poisoned)
    bound = float(np.abs(perts.deltas).max())
    ok = acc < 0.20 and bound <= np.float32(EPS)
    assert report_criterion(9, ok, f"surrogate accuracy {acc:.4f}, max |delta| {bound * 255:.4f}/255")


def test_criterion_10_formats(tmp_path, report_criterion):
    train, test = generate_synthetic_clean(k=3, n_per_class=5, h=4, w=4, seed=1)
    raw = dataset_bytes(train)
    data_ok = dataset_bytes(dataset_from_bytes(raw)) == raw
    perts = gen_classwise("random-noise", 3, train.shape, seed=4)
    pert_raw = perturbations_bytes(perts)
    pert_ok = perturbations_bytes(perturbations_from_bytes(pert_raw)) == pert_raw
    model = ConvNet((3, 4, 4), 3, seed=2)
    ck_raw = checkpoint_bytes(model)
    restored = checkpoint_from_bytes(ck_raw)
    ck_ok = checkpoint_bytes(restored) == ck_raw and all(
        a.tobytes() == b.tobytes() for a, b in zip(model_state(model).values(), model_state(restored).values()))

    record = np.concatenate([[7], np.arange(3072) % 256]).astype(np.uint8).tobytes()
    images, labels = parse_cifar_batch(record, records=1)
    cifar_ok = labels.tolist() == [7] and np.array_equal(
        np.round(images[0] * 255).astype(np.uint8).tobytes(), record[1:])

    broken = []
    for name, payload in (("data", raw), ("pert", pert_raw), ("ckpt", ck_raw)):
        parse = {"data": dataset_from_bytes, "pert": perturbations_from_bytes, "ckpt": checkpoint_from_bytes}[name]
        for bad in (payload[:-5], b"XXXX" + payload[4:]):
            try:
                parse(bad)
                broken.append(name)
            except FormatError:
                pass
    good, bad = tmp_path / "test.unln", tmp_path / "train.unln"
    good.write_bytes(dataset_bytes(test))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"source": "files", "train_path": str(bad), "test_path": str(good)}}))
    codes = []
    for payload in (raw[:-7], b"NOPE" + raw[4:]):
        bad.write_bytes(payload)
        codes.append(cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]))
    ok = data_ok and pert_ok and ck_ok and cifar_ok and not broken and codes == [3, 3]
    detail = (f"round-trips data={data_ok} pert={pert_ok} ckpt={ck_ok}, cifar={cifar_ok}, "
              f"unrejected corruptions={broken or 'none'}, truncated/bad-magic exit codes {codes}")
    assert report_criterion(10, ok, detail)


def test_criterion_11_determinism(tmp_path, report_criterion):
    doc = {
        "seed": 11,
        "data": {"k": 4, "n_per_class": 15, "h": 8, "w": 8},
        "victim": {"epochs": 3, "batch_size": 16},
        "attack": {"name": "ortho-proj", "linear": {"epochs": 4, "batch_size": 16}},
        "probes": {"steps": 30},
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    run_id = config_from_dict(doc).run_id()
    codes = [cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / name)]) for name in ("a", "b")]
    csvs = sorted(p.relative_to(tmp_path / "a" / run_id) for p in (tmp_path / "a" / run_id).rglob("*.csv"))
    same = [(tmp_path / "a" / run_id / p).read_bytes() == (tmp_path / "b" / run_id / p).read_bytes() for p in csvs]
    ok = codes == [0, 0] and len(csvs) >= 3 and all(same)
    assert report_criterion(11, ok, f"exit codes {codes}, {sum(same)}/{len(csvs)} metrics CSVs byte-identical")
