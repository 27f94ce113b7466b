"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL criterion N: ...`` line with the
measured values before asserting, so ``pytest -v`` shows the numbers even
when a criterion fails.  Criteria 4 and 5 share one trained experiment.
"""

import time

import numpy as np
import pytest

from compnet import checkpoint, gradcheck, phantom
from compnet.autograd import Tensor
from compnet.cli import main
from compnet.experiment import robustness_experiment
from compnet.losses import aggregate, loss_eq1, soft_dice
from compnet.models import NetworkConfig, build_model, count_params, plain_unet_param_formula
from compnet.train import TrainConfig, cross_validate, train


@pytest.fixture
def report(capsys):
    def emit(number, ok, text):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {text}")
        return ok
    return emit


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    checks = gradcheck.run_primitive_suite(1e-4) + gradcheck.run_loss_suite(1e-4)
    spot = gradcheck.model_spot_check(gradcheck.tiny_model_config("optimal-compnet"), n_params=24)
    seconds = time.perf_counter() - start
    worst_primitive = max(c.max_error for c in checks)
    worst_model = max(e for _, _, e in spot)
    ok = (all(c.passed for c in checks) and {"loss_eq1"} <= {c.name for c in checks}
          and len(spot) >= 20 and worst_model < 1e-3 and seconds < 120)
    report(1, ok, f"{len(checks)} primitive/loss checks max rel err {worst_primitive:.2e} (<1e-4); "
                  f"{len(spot)} model params max rel err {worst_model:.2e} (<1e-3); {seconds:.1f}s (<120s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_parameter_counts(report):
    opt = count_params(build_model(NetworkConfig("optimal-compnet")))
    plain = count_params(build_model(NetworkConfig("plain-compnet")))
    toy_unet = count_params(build_model(NetworkConfig("plain-unet", width_scale=0.125, levels=2)))
    toy_plain = count_params(build_model(NetworkConfig("plain-compnet", width_scale=0.125, levels=2)))
    unet = plain_unet_param_formula([4, 8])
    ok = (abs(opt - 15.3e6) <= 1.53e6 and abs(plain - 18e6) <= 1.8e6
          and toy_unet == 1709 == unet and toy_plain == 2 * unet + (unet - (204 + 912)))
    report(2, ok, f"optimal CompNet {opt:,} ({(opt / 15.3e6 - 1):+.1%} vs 15.3M), "
                  f"plain CompNet {plain:,} ({(plain / 18e6 - 1):+.1%} vs 18M); "
                  f"toy U-Net {toy_unet} (hand 1709), toy plain CompNet {toy_plain} (hand {3 * unet - 1116})")
    assert ok


# ---------------------------------------------------------------- 3

def _scalar_dice(p, t, eps=1.0):
    return (2 * sum(a * b for a, b in zip(p, t)) + eps) / (sum(p) + sum(t) + eps)


def test_criterion_3_loss_properties(report):
    rng = np.random.default_rng(0)
    a = (rng.random((16, 16)) > 0.5).astype(float)
    self_dice = soft_dice(a, a).item()
    disjoint = [soft_dice(a, 1 - a, smooth=e).item() for e in (1.0, 1e-4, 1e-8, 1e-12)]
    y = np.zeros((1, 1, 16, 16))
    y[..., 4:12, 4:12] = 1
    x = rng.random(y.shape)
    perfect = loss_eq1(y, Tensor(y), Tensor(1 - y), x, Tensor(x)).item()
    worst = 0.0
    for _ in range(20):
        p, t = rng.random(30), rng.random(30)
        worst = max(worst, abs(soft_dice(p, t).item() - _scalar_dice(p.tolist(), t.tolist())))
        ys, s, c, xx, r = (rng.random((1, 1, 5, 6)) for _ in range(5))
        want = (-_scalar_dice(s.ravel().tolist(), ys.ravel().tolist())
                + _scalar_dice(c.ravel().tolist(), ys.ravel().tolist())
                + sum((u - v) ** 2 for u, v in zip(r.ravel(), xx.ravel())) / r.size)
        worst = max(worst, abs(loss_eq1(ys, Tensor(s), Tensor(c), xx, Tensor(r)).item() - want))
    ok = (self_dice == 1.0 and disjoint == sorted(disjoint, reverse=True) and disjoint[-1] < 1e-10
          and abs(perfect + 1) < 0.01 and worst < 1e-10)
    report(3, ok, f"dice(A,A)={self_dice}, disjoint dice at eps=1e-12 {disjoint[-1]:.1e}, "
                  f"loss_eq1 perfect {perfect:.5f}, scalar oracle max diff {worst:.1e} (<1e-10)")
    assert ok


# ---------------------------------------------------------------- 4, 5

@pytest.fixture(scope="module")
def experiment():
    return robustness_experiment()


@pytest.mark.slow
def test_criterion_4_robustness_experiment(experiment, report):
    opt, unet = experiment.runs["optimal-compnet"], experiment.runs["plain-unet"]
    gap = experiment.gap()
    minutes = experiment.seconds / 60
    ok = opt.clean_dice >= 0.95 and opt.pathological_dice >= 0.90 and gap >= 0.02 and minutes < 30
    report(4, ok, f"optimal CompNet clean Dice {opt.clean_dice:.4f} (>=0.95), pathological "
                  f"{opt.pathological_dice:.4f} (>=0.90); plain U-Net pathological {unet.pathological_dice:.4f} "
                  f"(clean {unet.clean_dice:.4f}); gap {gap:+.4f} (>=+0.02); {minutes:.1f} min (<30)")
    assert ok


@pytest.mark.slow
def test_criterion_5_three_output_contract(experiment, report):
    b = experiment.branches
    ok = b.comp_dice_vs_brain < 0.1 and b.comp_mean_on_skull > 0.5 and b.recon_mse < 0.02
    report(5, ok, f"comp soft Dice vs brain {b.comp_dice_vs_brain:.4f} (<0.1), comp mean on skull "
                  f"{b.comp_mean_on_skull:.4f} (>0.5), recon MSE {b.recon_mse:.4f} (<0.02)")
    assert ok


# ---------------------------------------------------------------- 6

def _tiny_run_config(path):
    from compnet.cli import RunConfig

    cfg = RunConfig(network=NetworkConfig("optimal-compnet", width_scale=0.125, levels=3, dense_layers=(2, 2, 2),
                                          growth_filters=3, seed=5),
                    train=TrainConfig(epochs=2, batch_size=2, seed=5), n_per_fold=3, data_seed=5)
    path.write_text(cfg.dumps())
    return path


def test_criterion_6_determinism(tmp_path, report):
    cfg = _tiny_run_config(tmp_path / "run.json")
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.cmpn"),
                     "--out", str(out)]) == 0
        blobs.append({f: (out / f).read_bytes() for f in ("checkpoint.cmpn", "loss.csv", "metrics.csv")})
    same_runs = blobs[0] == blobs[1]

    vol = np.random.default_rng(1).random((7, 8, 9))
    stack_ok = np.array_equal(phantom.stack_masks(phantom.slice_volume(vol)), vol)

    model, state, _ = checkpoint.load_checkpoint(tmp_path / "a" / "checkpoint.cmpn")
    checkpoint.save_checkpoint(tmp_path / "again.cmpn", model, state, TrainConfig(epochs=2, batch_size=2, seed=5))
    ckpt_ok = (tmp_path / "again.cmpn").read_bytes() == blobs[0]["checkpoint.cmpn"]

    ok = same_runs and stack_ok and ckpt_ok
    report(6, ok, f"two runs byte-identical (checkpoint, loss CSV, metrics CSV): {same_runs}; "
                  f"slice/stack exact: {stack_ok}; checkpoint load/save exact: {ckpt_ok}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_two_fold_protocol(report):
    samples = phantom.build_dataset(4, seed=2).samples(0) + phantom.build_dataset(4, seed=2).samples(1)
    samples = samples[:7]  # odd count: folds of 4 and 3, so weights matter
    net = NetworkConfig("plain-unet", width_scale=0.125, levels=3)
    cv = cross_validate(samples, net, TrainConfig(epochs=1, batch_size=4))
    tested = cv.tested_ids
    covered = sorted(tested) == list(range(len(samples)))
    for f in cv.folds:
        assert not set(f.split.train_ids) & set(f.split.test_ids)
    worst = 0.0
    for key in ("dice", "sensitivity", "specificity"):
        fold_means = [aggregate(f.evaluation.metrics)[key][0] for f in cv.folds]
        sizes = [len(f.evaluation.metrics) for f in cv.folds]
        weighted = sum(m * n for m, n in zip(fold_means, sizes)) / sum(sizes)
        worst = max(worst, abs(cv.pooled[key][0] - weighted))
    ok = covered and len(tested) == len(samples) and worst < 1e-12
    report(7, ok, f"{len(samples)} samples, fold sizes {[len(f.split.test_ids) for f in cv.folds]}, "
                  f"each tested once: {covered}; pooled vs weighted mean max diff {worst:.1e} (<1e-12)")
    assert ok


def test_training_is_seed_sensitive():
    # Guards criterion 6 against a trivially constant pipeline.
    ds = phantom.build_dataset(2, seed=0).samples(0)
    cfg = NetworkConfig("plain-unet", width_scale=0.125, levels=3)
    a, b = build_model(cfg), build_model(cfg)
    train(a, ds, TrainConfig(epochs=1, batch_size=1, seed=0))
    train(b, ds, TrainConfig(epochs=1, batch_size=1, seed=1))
    assert any(not np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
