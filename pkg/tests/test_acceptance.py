"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line in ``RESULTS``; the terminal summary hook in
``conftest.py`` prints them after the run.  Run just this file with
``pytest tests/test_acceptance.py -v``.
"""

import contextlib
import math
import time

import numpy as np
import pytest

from esrgan_plus import tensor as T
from esrgan_plus.data import DatasetIndex, bicubic_resize, degrade_x4, resize_weights
from esrgan_plus.losses import LossWeights, combine_generator_loss, ragan_d_loss, ragan_g_loss
from esrgan_plus.metrics import fit_pristine_model, niqe_score, perceptual_index, psnr_y
from esrgan_plus.models import BlockVariant, GeneratorSpec, build_generator, param_count, transplant
from esrgan_plus.tensor import Parameter, RngState, Tensor
from esrgan_plus.training import GAN, GAN_MILESTONES, PRETRAIN, Checkpoint, Trainer, desk_config, lr_at

from conftest import NATURAL_IMAGES, make_dataset, natural_image, numeric_grad, rel_err
from test_data import dense_matrix
from test_metrics import naive_psnr
from test_models import expected_param_count

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        RESULTS[number] = f"criterion {number:2d} FAIL  {title} ({type(exc).__name__}: {str(exc)[:120]})"
        raise
    RESULTS[number] = f"criterion {number:2d} PASS  {title} [{time.perf_counter() - start:.1f}s]"


# --------------------------------------------------------------------- 1


def _check_grad(build, arrays):
    """Analytic gradient of ``build(*tensors)`` against central differences of the same forward."""
    params = [Parameter(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    build(*params).backward()

    def value(*xs):
        with T.no_grad():
            return build(*[Tensor(x) for x in xs]).item()

    nums = numeric_grad(value, [a.copy() for a in arrays], h=1e-5)
    return max(rel_err(p.grad, n) for p, n in zip(params, nums))


def _away_from_zero(a, eps=1e-3):
    a = a.copy()
    a[np.abs(a) < eps] += 2 * eps
    return a


def test_criterion_01_autodiff():
    r = np.random.default_rng(101)
    cases = {
        "conv2d": lambda: (
            (lambda stride, wts: lambda x, w, b: T.sum(T.conv2d(x, w, b, stride=stride, padding=1) * Tensor(wts)))(
                int(r.integers(1, 3)), r.normal()
            ),
            [r.normal(size=(1, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
        ),
        "leaky_relu": lambda: (
            (lambda wts: lambda x: T.sum(T.leaky_relu(x, 0.2) * Tensor(wts)))(r.normal(size=(2, 3, 4))),
            [_away_from_zero(r.normal(size=(2, 3, 4)))],
        ),
        "upsample": lambda: (
            (lambda wts: lambda x: T.sum(T.upsample_nearest(x, 2) * Tensor(wts)))(r.normal(size=(1, 2, 6, 8))),
            [r.normal(size=(1, 2, 3, 4))],
        ),
        "concat": lambda: (
            (lambda wts: lambda a, b: T.sum(T.concat([a, b]) * Tensor(wts)))(r.normal(size=(1, 5, 3, 3))),
            [r.normal(size=(1, 2, 3, 3)), r.normal(size=(1, 3, 3, 3))],
        ),
        "add": lambda: (
            (lambda wts: lambda a, b: T.sum((a + b) * Tensor(wts)))(r.normal(size=(2, 3, 4))),
            [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))],
        ),
        "mean": lambda: (
            (lambda wts: lambda x: T.mean(x * Tensor(wts)))(r.normal(size=(2, 3, 4))),
            [r.normal(size=(2, 3, 4))],
        ),
        "l1": lambda: (
            lambda a, b: T.l1_distance(a, b),
            (lambda b: [b + _away_from_zero(r.normal(size=b.shape)), b])(r.normal(size=(2, 3, 3))),
        ),
        "composed": lambda: (
            lambda x, w1, w2: T.mean(
                T.leaky_relu(T.conv2d(T.upsample_nearest(T.leaky_relu(T.conv2d(x, w1, padding=1)), 2), w2, padding=1))
            ),
            [r.normal(size=(1, 2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(2, 3, 3, 3))],
        ),
    }
    with criterion(1, "autodiff gradients vs central differences (20 instances per op, rel err < 1e-4)"):
        start = time.perf_counter()
        worst = {}
        for name, make in cases.items():
            errs = []
            for _ in range(20):
                build, arrays = make()
                errs.append(_check_grad(build, arrays))
            worst[name] = max(errs)
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        assert not bad, f"relative errors too large: {bad}"
        assert time.perf_counter() - start < 60


# --------------------------------------------------------------------- 2


def test_criterion_02_param_counts():
    with criterion(2, "RRDRB adds no parameters over RRDB; noise adds num_blocks*3*nf"):
        r = np.random.default_rng(202)
        for _ in range(3):
            blocks, nf, gc = int(r.integers(1, 6)), int(r.integers(4, 40)), int(r.integers(2, 24))
            counts = {}
            for variant in BlockVariant:
                for noise in (False, True):
                    spec = GeneratorSpec(num_blocks=blocks, num_features=nf, growth_channels=gc,
                                         variant=variant, noise_enabled=noise)
                    counts[variant, noise] = param_count(build_generator(spec, RngState(0)))
                    assert counts[variant, noise] == expected_param_count(spec)
            assert counts[BlockVariant.DENSE, False] == counts[BlockVariant.RESIDUAL_DENSE, False]
            assert counts[BlockVariant.RESIDUAL_DENSE, True] - counts[BlockVariant.RESIDUAL_DENSE, False] == blocks * 3 * nf


# --------------------------------------------------------------------- 3


def test_criterion_03_noise_degeneracy():
    with criterion(3, "zero noise scales reproduce the noiseless generator bit for bit"):
        plain = build_generator(GeneratorSpec(num_blocks=2, num_features=16, growth_channels=8), RngState(5))
        noisy = build_generator(
            GeneratorSpec(num_blocks=2, num_features=16, growth_channels=8, noise_enabled=True), RngState(6)
        )
        transplant(plain, noisy)
        scales = [p for p in noisy.parameters() if p.name.endswith("noise_scale")]
        assert scales and all(np.all(s.data == 0) for s in scales)
        r = np.random.default_rng(303)
        with T.no_grad():
            for k in range(5):
                lr = Tensor(r.random((1, 3, int(r.integers(6, 14)), int(r.integers(6, 14)))))
                a = noisy(lr, RngState(k)).data
                b = plain(lr).data
                assert np.array_equal(a, b)


# --------------------------------------------------------------------- 4


def test_criterion_04_ragan():
    with criterion(4, "RaGAN: 2 ln 2 at equal logits, shift invariance, role symmetry"):
        r = np.random.default_rng(404)
        for c in (-50.0, -1.0, 0.0, 2.5, 80.0):
            z = np.full(8, c)
            assert abs(ragan_d_loss(z, z).item() - 2 * math.log(2)) <= 1e-9
            assert abs(ragan_g_loss(z, z).item() - 2 * math.log(2)) <= 1e-9
        for shift in (-100.0, -37.5, -1.0, 1.0, 42.0, 100.0):
            a, b = r.normal(size=8) * 3, r.normal(size=8) * 3
            for loss in (ragan_d_loss, ragan_g_loss):
                assert abs(loss(a + shift, b + shift).item() - loss(a, b).item()) <= 1e-10
        for _ in range(50):
            a, b = r.normal(size=6) * 4, r.normal(size=6) * 4
            assert abs(ragan_g_loss(a, b).item() - ragan_d_loss(b, a).item()) <= 1e-12


# --------------------------------------------------------------------- 5


def test_criterion_05_schedule():
    with criterion(5, "learning-rate halving at 50k/100k/200k/300k"):
        expected = [(0, 1e-4), (49_999, 1e-4), (50_000, 5e-5), (99_999, 5e-5), (100_000, 2.5e-5),
                    (199_999, 2.5e-5), (200_000, 1.25e-5), (299_999, 1.25e-5), (300_000, 6.25e-6), (10**9, 6.25e-6)]
        assert GAN_MILESTONES == (50_000, 100_000, 200_000, 300_000)
        for it, lr in expected:
            assert lr_at(it, 1e-4, GAN_MILESTONES) == lr


# --------------------------------------------------------------------- 6


def test_criterion_06_loss_composition():
    with criterion(6, "generator loss composition with lambda=5e-3, eta=1e-2"):
        w = LossWeights()
        assert (w.perceptual_weight, w.adversarial_weight, w.pixel_weight) == (1.0, 5e-3, 1e-2)
        adv = 2 * math.log(2)
        assert abs(combine_generator_loss(1.0, adv, 0.3, w) - (1.0 + 0.005 * adv + 0.01 * 0.3)) <= 1e-12
        r = np.random.default_rng(606)
        for _ in range(20):
            p, a, x = r.random(3) * 10
            assert abs(combine_generator_loss(p, a, x, w) - (p + 0.005 * a + 0.01 * x)) <= 1e-12


# --------------------------------------------------------------------- 7


def test_criterion_07_metrics():
    with criterion(7, "perceptual index, PSNR closed form and oracle, NIQE determinism and ordering"):
        start = time.perf_counter()
        assert perceptual_index(10, 4) == 2
        hr = np.full((3, 32, 32), 0.4)
        assert abs(psnr_y(hr + 1 / 219, hr) - 48.1308) <= 1e-3
        r = np.random.default_rng(707)
        for _ in range(5):
            a, b = r.random((3, 20, 24)), r.random((3, 20, 24))
            assert abs(psnr_y(a, b, 4) - naive_psnr(a, b, 4)) <= 1e-9

        corpus = [natural_image(n)[:, :384, :384] for n in NATURAL_IMAGES[:10]]
        model = fit_pristine_model(corpus, corpus_id="acceptance")
        assert fit_pristine_model(corpus, corpus_id="acceptance").to_bytes() == model.to_bytes()
        noise_rng = np.random.default_rng(0)
        for img in corpus:
            clean = niqe_score(img, model)
            assert clean == niqe_score(img, model)
            noisy = np.clip(img + noise_rng.normal(0.0, 0.1, img.shape), 0.0, 1.0)
            assert clean < niqe_score(noisy, model)
        assert time.perf_counter() - start < 120


# --------------------------------------------------------------------- 8


def test_criterion_08_bicubic():
    with criterion(8, "bicubic partition of unity, constant preservation, dense-matrix oracle"):
        for n_in in range(1, 40):
            for n_out in (1, 2, 3, 5, 8, 13, 32, 64):
                _, w = resize_weights(n_in, n_out, antialias=True)
                assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12
        const = np.full((3, 24, 20), 0.731)
        for out in ((6, 5), (48, 40), (7, 33)):
            assert np.max(np.abs(bicubic_resize(const, *out) - 0.731)) <= 1e-12
        ramp = np.add.outer(np.arange(8.0), 3 * np.arange(8.0)) / 31
        oracle = dense_matrix(8, 2) @ ramp @ dense_matrix(8, 2).T
        assert np.max(np.abs(bicubic_resize(ramp[None], 2, 2)[0] - oracle)) <= 1e-10
        rand = np.random.default_rng(808).random((8, 8))
        oracle = dense_matrix(8, 2) @ rand @ dense_matrix(8, 2).T
        assert np.max(np.abs(bicubic_resize(rand[None], 2, 2)[0] - oracle)) <= 1e-10


# --------------------------------------------------------------------- 9 / 10

RESUME_AT = {PRETRAIN: 190, GAN: 90}


def _run_with_resume(config, dataset, init=None):
    """Uninterrupted run plus a replay from a serialized mid-run checkpoint."""
    trainer = Trainer(config, dataset, init=init)
    trainer.run(until=RESUME_AT[config.phase])
    mid = trainer.checkpoint().to_bytes()
    final = trainer.run()
    replay = Trainer(config, dataset, init=init)
    replay.restore(Checkpoint.from_bytes(mid))
    return trainer, final, replay.run().to_bytes() == final.to_bytes()


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = make_dataset(tmp_path_factory.mktemp("smoke"), n=8, size=128)
    dataset = DatasetIndex.from_dir(root)
    start = time.perf_counter()
    pre, pre_ckpt, pre_replay = _run_with_resume(desk_config(PRETRAIN), dataset)
    gan, _, gan_replay = _run_with_resume(desk_config(GAN), dataset, init=pre_ckpt)
    return {
        "pretrain": pre, "gan": gan, "pre_replay": pre_replay, "gan_replay": gan_replay,
        "seconds": time.perf_counter() - start,
    }


@pytest.mark.slow
def test_criterion_09_smoke_training(smoke):
    with criterion(9, "desk-profile smoke: pretrain 200 + GAN 100, finite, L1 decreases, resume bit-exact"):
        pre, gan = smoke["pretrain"], smoke["gan"]
        cfg = pre.config.generator
        assert (cfg.num_blocks, cfg.num_features, cfg.growth_channels) == (4, 32, 16)
        assert (pre.config.hr_crop, pre.config.batch, len(pre.dataset)) == (64, 4, 8)
        assert pre.iteration == 200 and gan.iteration == 100
        for trainer in (pre, gan):
            assert trainer.weights_finite()
            for rec in trainer.log.records:
                assert all(v is None or math.isfinite(v) for k, v in rec.items() if k != "iter")
        smooth = pre.log.smoothed("loss_pix")
        assert smooth[200] < smooth[10], f"smoothed L1 {smooth[10]:.5f} -> {smooth[200]:.5f}"
        assert smoke["pre_replay"] and smoke["gan_replay"]
        assert smoke["seconds"] < 45 * 60
        print(f"smoke wall time {smoke['seconds']:.0f}s; smoothed L1 {smooth[10]:.5f} -> {smooth[200]:.5f}")


@pytest.mark.slow
def test_criterion_10_stochastic_variation(smoke):
    with criterion(10, "two noise seeds differ pixelwise while mean |diff| < 10% of range"):
        gen = smoke["gan"].gen
        scales = [p for p in gen.parameters() if p.name.endswith("noise_scale")]
        assert scales
        for p in scales:
            p.data = p.data + 0.05
        diffs = []
        with T.no_grad():
            for name in NATURAL_IMAGES[8:12]:
                lr = Tensor(degrade_x4(natural_image(name)[:, :128, :128])[None])
                a = np.clip(gen(lr, RngState(1, stream=3)).data, 0, 1)
                b = np.clip(gen(lr, RngState(2, stream=3)).data, 0, 1)
                diffs.append(np.abs(a - b))
        assert all(d.max() > 0 for d in diffs)
        means = [float(d.mean()) for d in diffs]
        assert all(m < 0.1 for m in means), means
        print("per-image mean |diff|: " + ", ".join(f"{m:.4f}" for m in means))
