import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gestalt.errors import ArchitectureMismatch, CorruptFile, EmptyCorpus, VersionMismatch
from gestalt.imagecore import write_image
from gestalt.inpaint import ConvVaeGan, LossWeights
from gestalt.train import (
    MAGIC,
    Corpus,
    CurvePoint,
    TrainConfig,
    builtin_corpus,
    checkpoint_bytes,
    export_curves,
    load_checkpoint,
    load_corpus,
    read_checkpoint,
    read_curves,
    resolve_corpus,
    sample_mask,
    save_checkpoint,
    train,
)


def tiny_model(seed=0, **kw):
    return ConvVaeGan(z_dim=16, image_size=16, enc_channels=(4, 4), disc_channels=(4,), seed=seed, **kw)


# -- masks --------------------------------------------------------------------

def test_mask_area_example(rng):
    for _ in range(200):
        m = sample_mask(rng, 64, 64, (0.24, 0.26))
        assert 983 <= (~m).sum() <= 1065


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.5), st.floats(0.02, 0.3))
def test_mask_is_one_rectangle_in_range(seed, lo, width):
    hi = min(lo + width, 0.9)
    m = sample_mask(np.random.default_rng(seed), 32, 40, (lo, hi))
    rows, cols = np.nonzero(~m)
    assert rows.size > 0
    box = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
    assert box == rows.size
    assert lo * 32 * 40 - 1e-9 <= rows.size <= hi * 32 * 40 + 1e-9


def test_mask_mean_area_monte_carlo():
    rng = np.random.default_rng(0)
    fr = [(~sample_mask(rng, 64, 64, (0.15, 0.35))).mean() for _ in range(10_000)]
    assert abs(np.mean(fr) - 0.25) <= 0.02


def test_mask_placement_covers_the_image():
    rng = np.random.default_rng(1)
    hits = np.zeros((64, 64))
    for _ in range(2000):
        hits += ~sample_mask(rng, 64, 64, (0.15, 0.35))
    assert hits.min() > 0


def test_mask_bad_range(rng):
    with pytest.raises(ValueError):
        sample_mask(rng, 8, 8, (0.5, 0.2))


# -- corpora ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["structured", "textures", "noise"])
def test_builtin_corpora_deterministic(name):
    a = builtin_corpus(name, 6, 32, seed=4)
    b = builtin_corpus(name, 6, 32, seed=4)
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == (6, 32, 32)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, builtin_corpus(name, 6, 32, seed=5).images)


def test_corpus_errors(tmp_path):
    with pytest.raises(EmptyCorpus):
        Corpus(np.zeros((0, 8, 8)))
    with pytest.raises(EmptyCorpus):
        load_corpus(tmp_path)
    with pytest.raises(KeyError):
        builtin_corpus("faces", 4)


def test_load_corpus_directory(tmp_path, rng):
    for i in range(3):
        write_image(tmp_path / f"im{i}.png", rng.random((40, 50)))
    c = resolve_corpus(str(tmp_path), size=16)
    assert c.images.shape == (3, 16, 16)
    assert resolve_corpus("builtin:noise", count=2, size=16).images.shape == (2, 16, 16)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = tiny_model(seed=3)
    m.iteration = 1234
    p = save_checkpoint(m, tmp_path / "m.gmi", rng_state={"k": 1})
    m2 = load_checkpoint(p)
    assert m2.iteration == 1234 and m2.rng_state == {"k": 1}
    for a, b in zip((q for n in m.networks for q in n.parameters), (q for n in m2.networks for q in n.parameters)):
        assert a.tobytes() == b.tobytes()
    assert checkpoint_bytes(m2, {"k": 1}) == p.read_bytes()


def test_checkpoint_layout(tmp_path):
    m = tiny_model()
    data = checkpoint_bytes(m)
    assert data[:4] == MAGIC
    (n,) = struct.unpack("<I", data[4:8])
    n_params = sum(p.size for net in m.networks for p in net.parameters)
    assert len(data) == 8 + n + 4 * n_params + 8


def test_truncated_checkpoint(tmp_path):
    data = checkpoint_bytes(tiny_model())
    for cut in (3, 10, len(data) - 1):
        with pytest.raises(CorruptFile):
            read_checkpoint(data[:cut])


def test_version_and_magic_errors():
    data = checkpoint_bytes(tiny_model())
    with pytest.raises(VersionMismatch):
        read_checkpoint(b"GMI2" + data[4:])
    with pytest.raises(CorruptFile):
        read_checkpoint(b"XXXX" + data[4:])


def test_architecture_mismatch(tmp_path):
    p = save_checkpoint(tiny_model(), tmp_path / "m.gmi")
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(p, expect=ConvVaeGan(z_dim=32, image_size=16, enc_channels=(4, 4), disc_channels=(4,)))
    assert load_checkpoint(p, expect=tiny_model(seed=9)).z_dim == 16
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(p, expect=tiny_model(latent="dense"))


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "nope.gmi")


# -- curves -------------------------------------------------------------------

def test_curve_csv_lines_and_roundtrip(tmp_path):
    pts = [CurvePoint(0, 0.123456789123, 1.5, 0.0, 0.7, None), CurvePoint(10, 0.1, 1e-7, 0.3, 0.6, 4.0),
           CurvePoint(20, 0.05, 2.0, 0.2, 0.5, 5.0)]
    p = export_curves(pts, tmp_path / "c.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 4 and lines[0] == "iteration,recon,kl,adv_g,adv_d,score"
    back = read_curves(p)
    for a, b in zip(pts, back):
        assert a.iteration == b.iteration and a.score == b.score
        for f in ("recon", "kl", "adv_g", "adv_d"):
            assert float(f"{getattr(a, f):.9g}") == getattr(b, f)


def test_curve_export_empty(tmp_path):
    with pytest.raises(ValueError):
        export_curves([], tmp_path / "c.csv")


# -- loop ---------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(mask_area_range=(0.0, 0.3))
    assert TrainConfig.paper_batch().batch_size == 36


def test_training_is_deterministic(tmp_path):
    corpus = builtin_corpus("textures", 20, 16, seed=1)
    cfg = TrainConfig(batch_size=4, iterations=12, eval_every=4, weights=LossWeights(1, 1e-3, 0.01), adv_warmup=6)
    r1 = train(tiny_model(), corpus, cfg, checkpoint_dir=tmp_path / "a")
    r2 = train(tiny_model(), corpus, cfg, checkpoint_dir=tmp_path / "b")
    assert np.array_equal(r1.history, r2.history)
    assert [p.iteration for p in r1.curve] == [0, 4, 8, 12]
    assert [c.read_bytes() for c in r1.checkpoints] == [c.read_bytes() for c in r2.checkpoints]
    e1 = export_curves(r1.curve, tmp_path / "a.csv").read_bytes()
    assert e1 == export_curves(r2.curve, tmp_path / "b.csv").read_bytes()


def test_probe_called_at_eval_points():
    calls = []
    corpus = builtin_corpus("noise", 8, 16)
    cfg = TrainConfig(batch_size=2, iterations=6, eval_every=3, weights=LossWeights(1, 1e-3, 0))
    res = train(tiny_model(), corpus, cfg, probe=lambda m: calls.append(m.iteration) or float(len(calls)))
    assert calls == [0, 3, 6]
    assert [p.score for p in res.curve] == [1.0, 2.0, 3.0]


def test_train_rejects_wrong_image_size():
    with pytest.raises(ValueError):
        train(tiny_model(), builtin_corpus("noise", 2, 32), TrainConfig(iterations=1))


def test_constant_image_is_memorized():
    corpus = Corpus(np.full((1, 64, 64), 0.3))
    cfg = TrainConfig(batch_size=8, iterations=500, eval_every=100, weights=LossWeights(1, 1e-3, 0), learning_rate=2e-3)
    res = train(ConvVaeGan(seed=0), corpus, cfg)
    assert res.history[-20:, 0].mean() < 0.01
