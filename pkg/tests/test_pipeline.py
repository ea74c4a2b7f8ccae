import math

import numpy as np
import pytest

from markgan.corpus import (CLASSES, NULL, CorpusError, dir_digest, ingest_external,
                            load_samples, make_corpus)
from markgan.losses import LN10, NonFiniteLossError
from markgan.pipeline import (LOG_COLUMNS, MetricLog, TrainConfig, TrainState, balanced_codes,
                              load_checkpoint, load_config, parse_config_text,
                              produce_augmented_set, save_checkpoint, should_stop,
                              train_augmenter, train_main)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Ten samples: five LEFT and five NULL."""
    return make_corpus({"LEFT": 5, "NULL": 5}, seed=0,
                       out_dir=tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    index = make_corpus({c: 3 for c in CLASSES}, seed=1,
                        out_dir=tmp_path_factory.mktemp("small"))
    return load_samples(index)


def test_should_stop():
    cfg = TrainConfig(rho=1e-3)
    assert should_stop(5e-4, cfg)
    assert not should_stop(1e-3, cfg)
    assert should_stop(0.0, cfg)
    with pytest.raises(ValueError):
        should_stop(-1.0, cfg)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.g_steps_per_d_step, cfg.g_lr_multiplier, cfg.batch_size) == (2, 2.0, 32)
    assert cfg.loss_weights.lambda_mse == 0.05
    for bad in ({"epochs": 0}, {"rho": 0.0}, {"batch_size": -1}, {"g_lr_multiplier": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_text_roundtrip():
    cfg = TrainConfig(epochs=3, seed=9, use_clc_loss=False).replace(lambda_mi=0.0)
    assert TrainConfig.from_flat(parse_config_text(cfg.to_text())) == cfg


def test_parse_config_comments_and_errors():
    d = parse_config_text("# header\n\nepochs = 4  # trailing\n seed=2\n")
    assert d == {"epochs": "4", "seed": "2"}
    with pytest.raises(ValueError, match="line 2"):
        parse_config_text("epochs = 1\nnonsense\n")


def test_load_config_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = 4\nseed = 1\nlambda_mse = 0.1\nuse_generator = no\n")
    cfg = load_config(p, seed=5)
    assert cfg.epochs == 4 and cfg.seed == 5 and cfg.loss_weights.lambda_mse == 0.1
    assert cfg.use_generator is False
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_flat({"epochz": "1"})
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig.from_flat({"epochs": "many"})


def test_lr_schedule_in_config():
    cfg = TrainConfig()
    assert cfg.lr_d(9) == 1e-4 and cfg.lr_d(10) == 1e-5
    assert cfg.lr_g(0) == 2e-4


def test_one_epoch_smoke_writes_loadable_checkpoint(tiny, tmp_path):
    state, mlog = train_main(tiny, TrainConfig(epochs=1, seed=0))
    assert state.epoch == 1 and len(mlog.rows) >= 1
    p = tmp_path / "s.amk"
    save_checkpoint(state, p)
    back = load_checkpoint(p)
    assert back.epoch == 1
    g = state.models.generator.params.state_arrays()
    for k, v in back.models.generator.params.state_arrays().items():
        assert np.array_equal(v, g[k])


def test_metric_log_tsv_columns(tiny):
    _, mlog = train_main(tiny, TrainConfig(epochs=1))
    lines = mlog.to_tsv().splitlines()
    assert lines[0].split("\t") == list(LOG_COLUMNS)
    for line in lines[1:]:
        vals = line.split("\t")
        assert len(vals) == len(LOG_COLUMNS)
        assert all(math.isfinite(float(v)) for v in vals)


def test_g_steps_twice_d_steps(small):
    _, mlog = train_main(small, TrainConfig(epochs=2, batch_size=8))
    for e in mlog.epochs:
        assert e.d_steps >= 1
        assert abs(e.g_steps - 2 * e.d_steps) <= 1


def test_g_steps_ratio_configurable(small):
    _, mlog = train_main(small, TrainConfig(epochs=1, batch_size=8, g_steps_per_d_step=3))
    e = mlog.epochs[0]
    assert abs(e.g_steps - 3 * e.d_steps) <= 1


def test_training_is_deterministic(small, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4)
    runs = []
    for tag in "ab":
        state, mlog = train_main(small, cfg)
        save_checkpoint(state, tmp_path / f"{tag}.amk")
        runs.append(mlog.to_tsv())
    assert runs[0] == runs[1]
    assert (tmp_path / "a.amk").read_bytes() == (tmp_path / "b.amk").read_bytes()


def test_resume_matches_uninterrupted(small, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, seed=6)
    full_state, full_log = train_main(small, cfg)

    half_state, half_log = train_main(small, cfg.replace(epochs=1))
    save_checkpoint(half_state, tmp_path / "half.amk")
    resumed = load_checkpoint(tmp_path / "half.amk")
    resumed = TrainState(resumed.models, resumed.optim, cfg, resumed.epoch, resumed.aug_epoch)
    state, log2 = train_main(small, cfg, state=resumed, metric_log=half_log)

    assert log2.to_tsv() == full_log.to_tsv()
    save_checkpoint(full_state, tmp_path / "full.amk")
    save_checkpoint(state, tmp_path / "resumed.amk")
    assert (tmp_path / "full.amk").read_bytes() == (tmp_path / "resumed.amk").read_bytes()


def test_seed_changes_trajectory(small):
    a = train_main(small, TrainConfig(epochs=1, batch_size=8, seed=0))[1].to_tsv()
    b = train_main(small, TrainConfig(epochs=1, batch_size=8, seed=1))[1].to_tsv()
    assert a != b


def test_early_stop_fires(small):
    _, mlog = train_main(small, TrainConfig(epochs=5, batch_size=8, rho=10.0))
    assert len(mlog.epochs) == 1 and mlog.epochs[0].stopped


def test_empty_corpus_rejected(small):
    with pytest.raises(CorpusError):
        train_main(small.subset([]), TrainConfig(epochs=1))


def test_needs_positive_and_null(small):
    only_null = small.subset(np.flatnonzero(small.labels == NULL))
    with pytest.raises(CorpusError):
        train_main(only_null, TrainConfig(epochs=1))


def test_non_finite_aborts_with_context(small):
    state = TrainState.fresh(TrainConfig())
    state.models.generator.params["dec0.weight"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="epoch 0, step 0"):
        train_main(small, TrainConfig(epochs=1, batch_size=8), state=state)


def test_rejects_unknown_corpus_type():
    with pytest.raises(TypeError):
        train_main([1, 2, 3], TrainConfig(epochs=1))


def test_ablation_switches_run(small):
    for cfg in (TrainConfig(epochs=1, batch_size=8, use_generator=False),
                TrainConfig(epochs=1, batch_size=8, use_clc_loss=False)):
        _, mlog = train_main(small, cfg)
        assert all(math.isfinite(v) for r in mlog.rows for v in r)
    _, mlog = train_main(small, TrainConfig(epochs=1, batch_size=8, use_generator=False))
    assert mlog.epochs[0].g_steps == 0


@pytest.mark.parametrize("n", [10, 32, 37, 100])
def test_balanced_codes(n):
    c = balanced_codes(n, np.random.default_rng(n))
    counts = np.bincount(c, minlength=10)
    assert counts.max() - counts.min() <= 1 and len(c) == n


def test_augmenter_code_entropy_and_log(small):
    _, mlog = train_augmenter(small, TrainConfig(epochs=2, batch_size=32))
    for e in mlog.epochs:
        assert abs(e.code_entropy - LN10) < 0.05
        assert math.isfinite(e.loss_mi) and e.loss_mi <= LN10 + 1e-9
        assert abs(e.g_steps - 2 * e.d_steps) <= 1


def test_augmenter_vanilla_has_no_mi_in_d(small):
    state, mlog = train_augmenter(small, TrainConfig(epochs=1, batch_size=8).replace(lambda_mi=0.0))
    assert state.aug_epoch == 1 and all(math.isfinite(r[-1]) for r in mlog.rows)


def test_augmenter_q_on_fakes_changes_d_update(small):
    cfg = TrainConfig(epochs=1, batch_size=8, seed=4)
    a, _ = train_augmenter(small, cfg)
    b, _ = train_augmenter(small, cfg.replace(q_on_fakes=True))
    pa = a.models.aug_discriminator.params
    pb = b.models.aug_discriminator.params
    assert any(not np.allclose(pa[k].data, pb[k].data) for k in pa.names())
    assert TrainConfig.from_flat(cfg.replace(q_on_fakes=True).flat()).q_on_fakes


def test_augmenter_resume(small, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    _, full = train_augmenter(small, cfg)
    half, hlog = train_augmenter(small, cfg.replace(epochs=1))
    save_checkpoint(half, tmp_path / "h.amk")
    back = load_checkpoint(tmp_path / "h.amk")
    back = TrainState(back.models, back.optim, cfg, back.epoch, back.aug_epoch)
    _, log2 = train_augmenter(small, cfg, state=back, metric_log=hlog)
    assert log2.to_tsv() == full.to_tsv()


def test_produce_augmented_set(tmp_path):
    state = TrainState.fresh(TrainConfig(seed=1))
    counts = {c: 2 for c in CLASSES} | {"NULL": 5}
    idx = produce_augmented_set(state, counts, tmp_path / "a", seed=3)
    assert idx.counts() == counts
    back = ingest_external(tmp_path / "a")
    assert back.counts() == counts and len(load_samples(back)) == 23
    produce_augmented_set(state, counts, tmp_path / "b", seed=3)
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_produce_augmented_default_total(tmp_path):
    idx = produce_augmented_set(TrainState.fresh(TrainConfig()), out_dir=tmp_path / "d")
    assert len(idx) == 4700
    assert idx.counts()["NULL"] == 2000 and idx.counts()["RAIL"] == 300


def test_produce_augmented_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(CorpusError):
        produce_augmented_set(TrainState.fresh(TrainConfig()), {"LEFT": 1}, blocker / "sub")


def test_metric_log_write(tmp_path):
    m = MetricLog()
    m.add(0, 0, 0.5, 0.1, 0.2, 0.3, 1e-4, 1e-4, 1.0)
    m.write(tmp_path / "log.tsv")
    assert (tmp_path / "log.tsv").read_text().splitlines()[1].startswith("0\t0\t0.5")


def test_generate_augmented_restores_stats():
    from markgan.pipeline import generate_augmented
    state = TrainState.fresh(TrainConfig(seed=2))
    before = {k: (s.mean.copy(), s.var.copy()) for k, s in state.models.augmenter.params.stats.items()}
    imgs, labels = generate_augmented(state, {"PED": 2, "NULL": 1}, seed=0)
    assert imgs.shape == (3, 1, 32, 32) and list(labels) == [4, 4, 9]
    for k, s in state.models.augmenter.params.stats.items():
        assert np.array_equal(s.mean, before[k][0]) and np.array_equal(s.var, before[k][1])
