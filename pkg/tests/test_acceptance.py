"""Acceptance criteria 1-11, one test each.

A summary line per criterion is printed at the end of the pytest run (see
conftest.py). Criteria 5-7 share one pretraining run of both variants, which
takes roughly 20 minutes on a single CPU core.
"""

import csv
import dataclasses
import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from cupid import autodiff as ad
from cupid import cli, wfdb
from cupid import evaluation as E
from cupid import model as M
from cupid import preprocessing as pp
from cupid.autodiff import Tensor
from cupid.model import ModelConfig
from cupid.spectrogram import N_FFT, SpectrogramConfig, frame_signal, stft_magnitude
from cupid.synthetic import pretraining_corpus, rhythm_corpus
from cupid.training import TrainConfig, train
from stacked_oracle import stacked_fd, stacked_loss

ARTIFACTS = Path(os.environ.get("CUPID_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))

TINY = ModelConfig(patch_size=4, d_model=16, enc_blocks=1, enc_heads=2, dec_blocks=2, dec_heads=2,
                   window_len=40, dtype="float64")


def detail(record_property, text):
    record_property("detail", text)


def random_point(config, seed, scale=0.3):
    """Parameters where every entry is O(scale); layer-norm gains stay near one."""
    rng = np.random.default_rng(seed)
    params = M.init_params(config, rng)
    for name, p in params.items():
        base = 1.0 if name.endswith(".g") else 0.0
        p.data[...] = base + scale * rng.standard_normal(p.shape)
    return params, rng


# -- 1 ----------------------------------------------------------------------------------


# attention key biases (and the spectrogram bias, which feeds only keys) add the same
# constant to every score of a query row; softmax ignores that, so their gradient is zero
def structurally_zero(name):
    return name.endswith("attn.bk") or name == "spec_proj.b"


def test_criterion_01_gradient_integrity(record_property):
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for variant in ("cupid", "mtae"):
        cfg = dataclasses.replace(TINY, variant=variant)
        params, rng = random_point(cfg, seed=11)
        x = rng.standard_normal((2, cfg.window_len))
        mask = M.random_mask(cfg.n_patches, cfg.mask_ratio, rng, batch=2)
        frames = M.spectrogram_frames(x, cfg)
        loss, _ = M.forward(params, cfg, x, mask, frames)
        loss.backward()
        arrays = {k: v.data for k, v in params.items()}
        # the oracle is an independent forward; it must agree before its differences mean anything
        assert abs(stacked_loss(arrays, (), cfg, x, mask.masked, frames)[0] - loss.item()) < 1e-12
        for name, p in params.items():
            if p.grad is None:
                assert variant == "mtae" and name.startswith("spec_proj"), name
                continue
            num = stacked_fd(arrays, name, cfg, x, mask.masked, frames, h=1e-5)
            checked += p.data.size
            if structurally_zero(name):
                assert np.abs(p.grad).max() < 1e-15 and np.abs(num).max() < 1e-9, name
                continue
            err = ad.relative_error(p.grad, num)
            worst = max(worst, err)
            assert err < 1e-5, (variant, name, err)
    elapsed = time.perf_counter() - start
    detail(record_property, f"{checked} entries, worst rel err {worst:.1e}, {elapsed:.0f} s")
    assert elapsed < 120


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_02_delayed_injection(record_property):
    cfg = ModelConfig(dec_blocks=1)
    params, rng = random_point(cfg, seed=2, scale=0.1)
    mtae = M.with_variant(cfg, "mtae")
    for _ in range(100):
        x = rng.standard_normal((1, cfg.window_len))
        mask = M.random_mask(cfg.n_patches, cfg.mask_ratio, rng, batch=1)
        with ad.no_grad():
            a = M.forward(params, cfg, x, mask)[1].data
            b = M.forward(params, mtae, x, mask)[1].data
        assert a.tobytes() == b.tobytes()
    detail(record_property, "100/100 bit-identical")


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_03_loss_locality(record_property):
    rng = np.random.default_rng(3)
    trials = 0
    while trials < 1000:
        B, P = (int(v) for v in rng.integers(1, 6, 2))
        N = int(rng.integers(2, 60))
        mask = M.random_mask(N, float(rng.uniform(0.1, 0.9)), rng, batch=B)
        if mask.count in (0, N):
            continue
        target = rng.standard_normal((B, N, P))
        recon = Tensor(rng.standard_normal((B, N, P)))
        base = M.masked_l1(target, recon, mask).item()
        target[~mask.masked] = rng.standard_normal(target[~mask.masked].shape) * 1e3
        assert M.masked_l1(target, recon, mask).item() - base == 0.0
        trials += 1
    detail(record_property, "1000 trials, change exactly 0")


# -- 4 ----------------------------------------------------------------------------------


def test_criterion_04_attention_oracle(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(50):
        heads = int(rng.choice([1, 2, 4, 8]))
        d = heads * int(rng.integers(1, 7))
        B, N = int(rng.integers(1, 5)), int(rng.integers(1, 16))
        p = {f"a.w{n}": Tensor(rng.standard_normal((d, d))) for n in "qkvo"}
        p.update({f"a.b{n}": Tensor(rng.standard_normal(d)) for n in "qkvo"})
        q = Tensor(rng.standard_normal((B, N, d)))
        k = Tensor(rng.standard_normal((B, N, d))) if trial % 2 else q  # odd trials: cross case
        fused = M.multi_head_attention(q, k, q, p, "a", heads).data
        naive = M.naive_attention(q, k, q, p, "a", heads).data
        worst = max(worst, float(np.abs(fused - naive).max()))
    detail(record_property, f"50 shapes (25 cross), max abs diff {worst:.1e}")
    assert worst < 1e-10


# -- 5, 6, 7 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained():
    windows = pretraining_corpus(2000, sdnn_levels=(0.0, 60.0, 120.0), seed=0)
    out = {}
    start = time.perf_counter()
    for variant in ("mtae", "cupid"):
        cfg = ModelConfig(d_model=64, enc_blocks=2, dec_blocks=2, variant=variant)
        tc = TrainConfig(iterations=3000, batch_size=64, seed=0, checkpoint_every=3000, progress_every=500)
        run = ARTIFACTS / f"pretrain_{variant}"
        out[variant] = (cfg, train(windows, cfg, tc, run_dir=run))
    out["elapsed"] = time.perf_counter() - start
    return out


def test_criterion_05_directional_loss(pretrained, record_property):
    final = {v: float(np.mean(pretrained[v][1].losses[-200:])) for v in ("mtae", "cupid")}
    gain = 1 - final["cupid"] / final["mtae"]
    detail(record_property, f"final-200 mean mtae {final['mtae']:.4f} cupid {final['cupid']:.4f} "
                            f"({gain:.1%} lower), {pretrained['elapsed'] / 60:.1f} min")
    assert gain >= 0.05
    assert pretrained["elapsed"] < 30 * 60


def test_criterion_06_sdnn_stratification(pretrained, record_property):
    held_out = pretraining_corpus(600, sdnn_levels=(0.0, 60.0, 120.0), seed=1)
    models = {v: (pretrained[v][0], pretrained[v][1].params) for v in ("mtae", "cupid")}
    rows = E.sdnn_stratified_error(models, held_out, seed=0)
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    E.write_csv(ARTIFACTS / "sdnn_report.csv", rows, E.SDNN_COLUMNS)
    assert (ARTIFACTS / "sdnn_report.csv").exists()
    populated = [r for r in rows if r["count"] >= 50]
    gaps = [r["cupid_loss"] - r["mtae_loss"] for r in populated]
    detail(record_property, "gaps " + ", ".join(
        f"[{r['bin_lo']:g},{r['bin_hi']:g}) n={r['count']} {g:+.4f}" for r, g in zip(populated, gaps)))
    assert populated and all(g <= 0 for g in gaps)


def test_criterion_07_probe_direction(pretrained, record_property):
    ws = rhythm_corpus(400, seed=1, windows_per_patient=4)
    x = np.stack([w.samples for w in ws])
    y = [w.label for w in ws]
    pids = [w.patient_id for w in ws]
    folds = E.make_folds(pids, n_folds=5, seed=0)
    acc = {}
    for v in ("mtae", "cupid"):
        cfg, res = pretrained[v]
        acc[v] = E.linear_probe(M.represent(res.params, cfg, x), y, pids, folds).mean("accuracy")
    detail(record_property, f"probe accuracy mtae {acc['mtae']:.3f} cupid {acc['cupid']:.3f}")
    assert acc["cupid"] >= acc["mtae"] - 0.02
    assert acc["cupid"] >= 0.80


# -- 8 ----------------------------------------------------------------------------------


def test_criterion_08_preprocessing(record_property):
    fs = 100
    dc = pp.highpass(np.full(4000, 3.0))
    dc_gain = np.abs(dc[1000:-1000]).max() / 3.0
    assert dc_gain < 1e-3

    t = np.arange(8000) / fs
    y = pp.highpass(np.sin(2 * np.pi * 10 * t))[2000:-2000]
    tt = t[2000:-2000]
    basis = np.stack([np.sin(2 * np.pi * 10 * tt), np.cos(2 * np.pi * 10 * tt)], axis=1)
    amp = float(np.hypot(*np.linalg.lstsq(basis, y, rcond=None)[0]))
    analytic = 1.0 / (1.0 + (0.5 / 10.0) ** (2 * 5))  # |H|^2 of the order-5 design, applied twice
    assert abs(amp - analytic) < 0.01 * analytic

    x = np.random.default_rng(8).standard_normal(1000)
    mag2 = stft_magnitude(x, SpectrogramConfig()) ** 2
    one_sided = mag2[:, 0] + 2 * mag2[:, 1:-1].sum(axis=1) + mag2[:, -1]
    n = np.arange(40)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / 40)
    energy = N_FFT * ((frame_signal(x, 20, 40) * hann) ** 2).sum(axis=1)
    parseval = float(np.max(np.abs(one_sided - energy) / energy))
    assert parseval < 1e-10

    for n_in, rate in itertools.product([1, 7, 999, 1000, 2501, 65_537], [100, 128, 200, 250, 360, 500, 1000]):
        assert len(pp.resample(np.zeros(n_in), rate)) == (n_in * 100) // rate
    detail(record_property, f"DC gain {dc_gain:.1e}, 10 Hz amp {amp:.5f} vs {analytic:.5f}, "
                            f"Parseval {parseval:.1e}, 42 resampler lengths exact")


# -- 9 ----------------------------------------------------------------------------------


def pack_212_reference(a, b):
    """Vectorised bit-level packing of sample pairs (a, b) into 3 bytes."""
    ua, ub = a & 0xFFF, b & 0xFFF
    return np.stack([ua & 0xFF, (ua >> 8) | ((ub >> 8) << 4), ub & 0xFF], axis=-1).astype(np.uint8)


def test_criterion_09_wfdb_round_trip(record_property):
    rng = np.random.default_rng(9)
    adu = rng.integers(-32768, 32768, size=(3, 2000))
    specs = [wfdb.SignalSpec("r.dat", 16, 200.0, int(b)) for b in (0, 17, -5)]
    rec = wfdb.RawRecord(wfdb.WfdbHeader("r", 3, 360.0, 2000, specs),
                         [(a - s.baseline) / 200.0 for a, s in zip(adu, specs)])
    back = wfdb.read_record(*wfdb.write_record(rec, 16))
    for a, b in zip(rec.signals, back.signals):
        assert a.tobytes() == b.tobytes()

    values = np.arange(-2048, 2048)
    for a in np.array_split(values, 16):
        first = np.repeat(a, 4096)
        second = np.tile(values, len(a))
        raw = pack_212_reference(first, second).tobytes()
        decoded = wfdb.decode_212(raw, 2 * len(first))
        assert np.array_equal(decoded[0::2], first) and np.array_equal(decoded[1::2], second)
    detail(record_property, "format 16 exact on 3x2000 samples; all 4096^2 format-212 pairs decoded")


# -- 10 ---------------------------------------------------------------------------------


def pairwise_auc(positive, scores):
    pos, neg = scores[positive], scores[~positive]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_criterion_10_protocol(record_property):
    rng = np.random.default_rng(10)
    for trial in range(1000):
        n = int(rng.integers(5, 200))
        ids = [f"s{i}" for i in rng.choice(100_000, n, replace=False)]
        folds = E.make_folds(ids, 5, seed=trial)
        E.verify_folds(folds)
        for f in folds:
            assert not (f.train & f.val or f.train & f.test or f.val & f.test)
            assert f.train | f.val | f.test == set(ids)
            for part, share in ((f.train, 0.6), (f.val, 0.2), (f.test, 0.2)):
                assert abs(len(part) - share * n) <= 2

    stopper = E.EarlyStopping(5)
    stops = [stopper.step(v) for v in [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]]
    assert stops == [False] * 6 + [True] and stopper.epoch == 7 and stopper.best_epoch == 2

    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(2, 300))
        positive = rng.random(n) < rng.uniform(0.1, 0.9)
        positive[0], positive[-1] = True, False
        scores = rng.integers(0, 6, n).astype(float) if trial % 2 else rng.random(n)
        worst = max(worst, abs(E.rank_auc(positive, scores) - pairwise_auc(positive, scores)))
    assert worst <= 1e-12
    detail(record_property, f"1000 fold sets disjoint 60/20/20, patience trace exact, AUC max diff {worst:.0e}")


# -- 11 ---------------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path, record_property):
    def loss_columns(path):
        return [(r["iteration"], r["loss"]) for r in csv.DictReader(open(path))]

    small = ["--d-model", "16", "--enc-blocks", "1", "--enc-heads", "2", "--dec-heads", "2",
             "--batch-size", "4", "--progress-every", "0"]
    runs = {
        "synth": ["--n-windows", "30", "--af-fraction", "0.5", "--seed", "5"],
        "pretrain": ["--data", str(tmp_path / "synth" / "windows.cpw1"), "--iterations", "6",
                     "--checkpoint-every", "3", *small],
        "probe": ["--data", str(tmp_path / "synth" / "windows.cpw1"),
                  "--checkpoint", str(tmp_path / "pretrain" / "ckpt_000006.cpck")],
    }
    compared = 0
    for cmd, args in runs.items():
        first = tmp_path / cmd
        assert cli.main([cmd, "--out", str(first), *args]) == 0
        again = tmp_path / f"{cmd}_replay"
        assert cli.main(["replay", str(first), "--out", str(again)]) == 0
        for f in sorted(first.iterdir()):
            if f.name in ("manifest.json", "run.log"):
                continue
            if f.name == "loss.csv":
                assert loss_columns(f) == loss_columns(again / f.name)
            else:
                assert f.read_bytes() == (again / f.name).read_bytes(), f.name
            compared += 1
    detail(record_property, f"{compared} output files identical on replay (synth, pretrain, probe)")
