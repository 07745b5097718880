import dataclasses
import math

import numpy as np
import pytest
import torch

from cmcseg import losses
from cmcseg.config import ABLATION_ROWS, TrainConfig
from cmcseg.io import make_split
from cmcseg.model import ModelConfig
from cmcseg.synthgen import DataConfig, PhantomSpec
from cmcseg.trainer import (
    ABLATION_COLUMNS, NonFiniteLossError, TrainState, build_split, evaluate_split, format_ablation,
    make_batch, run_ablation, train, train_step, unlabeled_batch, write_ablation,
)
from cmcseg.model import build_model


def tiny_cfg(**kw) -> TrainConfig:
    model = ModelConfig(patch_size=4, embed_dim=16, num_blocks=1, num_heads=2, adapter_dim=4,
                        input_shape=(16, 16, 16), decoder_channels=(16, 8))
    data = DataConfig(phantom=PhantomSpec(grid_shape=(16, 16, 16), size_range=(2.0, 4.0)),
                      n_samples=10, n_val=2, n_test=2)
    base = dict(model=model, data=data, epochs=3, labeled_fraction=0.34, eval_every=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def split():
    return build_split(tiny_cfg())


def _state(cfg, lr=None):
    model = build_model(cfg.effective_model_config(), seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate if lr is None else lr)
    return TrainState(model, opt)


def test_split_sizes(split):
    assert len(split.labeled) == 2 and len(split.unlabeled) == 4
    assert len(split.val) == len(split.test) == 2


def test_baseline_breakdown_has_no_unsupervised_terms(split):
    cfg = tiny_cfg().with_ablation("baseline")
    st = _state(cfg)
    bd = train_step(st, make_batch(split.labeled), unlabeled_batch(split.unlabeled[:2]), cfg, 0, 3)
    assert bd.csc == 0.0 and bd.cac == 0.0 and bd.total == bd.sup
    assert st.global_step == 1


def test_full_breakdown_matches_weighted_sum(split):
    cfg = tiny_cfg()
    bd = train_step(_state(cfg), make_batch(split.labeled), unlabeled_batch(split.unlabeled[:2]), cfg, 1, 3)
    alpha, beta = losses.ramp_weights(1, 3)
    assert (bd.alpha, bd.beta) == (alpha, beta)
    assert bd.csc > 0 and bd.cac > 0
    assert bd.total == pytest.approx(bd.sup + alpha * bd.csc + beta * bd.cac, rel=1e-12)


def test_single_unlabeled_sample_gives_zero_cac(split):
    cfg = tiny_cfg()
    bd = train_step(_state(cfg), make_batch(split.labeled), unlabeled_batch(split.unlabeled[:1]), cfg, 0, 3)
    assert bd.cac == 0.0


def test_zero_lr_keeps_parameters(split):
    cfg = tiny_cfg(learning_rate=0.0)
    st = _state(cfg)
    before = {k: v.clone() for k, v in st.model.state_dict().items()}
    for _ in range(2):
        train_step(st, make_batch(split.labeled), unlabeled_batch(split.unlabeled[:2]), cfg, 0, 3)
    after = st.model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_zero_lr_validation_constant(split):
    result = train(tiny_cfg(learning_rate=0.0), split)
    dices = [d for _, d in result.val_history]
    assert len(dices) == 3 and len(set(dices)) == 1


def test_errors_leave_state_untouched(split):
    cfg = tiny_cfg()
    st = _state(cfg)
    before = {k: v.clone() for k, v in st.model.state_dict().items()}
    bad = make_batch(split.labeled)
    bad.y_a = bad.y_a.clone()
    bad.y_a[0, 0, 0, 0] = 7
    with pytest.raises(ValueError, match="exceeds"):
        train_step(st, bad, None, cfg, 0, 3)
    with pytest.raises(ValueError, match="missing masks"):
        train_step(st, unlabeled_batch(split.labeled), None, cfg, 0, 3)
    wrong = make_batch(split.labeled)
    wrong.x_a = wrong.x_a[..., :8]
    with pytest.raises(ValueError, match="shape"):
        train_step(st, wrong, None, cfg, 0, 3)
    assert st.global_step == 0
    assert all(torch.equal(before[k], v) for k, v in st.model.state_dict().items())


def test_nonfinite_loss_reports_batch(split, tmp_path):
    cfg = tiny_cfg()
    st = _state(cfg)
    batch = make_batch(split.labeled)
    batch.x_a = torch.full_like(batch.x_a, float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(st, batch, None, cfg, 0, 3)
    assert info.value.sample_ids == [s.sample_id for s in split.labeled]
    assert st.global_step == 0


def test_unlabeled_masks_never_reach_the_loss(split, monkeypatch):
    seen = []
    orig = losses.supervised_loss

    def spy(la, ma, lb, mb, mode="symmetric"):
        seen.append((la.shape[0], ma.shape[0]))
        return orig(la, ma, lb, mb, mode)

    monkeypatch.setattr(losses, "supervised_loss", spy)
    # unlabeled_batch strips masks even from labeled-looking samples
    ub = unlabeled_batch(split.labeled)
    assert ub.y_a is None and ub.y_b is None
    cfg = tiny_cfg()
    train_step(_state(cfg), make_batch(split.labeled[:1]), unlabeled_batch(split.unlabeled[:2]), cfg, 0, 3)
    assert seen == [(1, 1)]


def test_training_log_and_ramp(split, tmp_path):
    cfg = tiny_cfg(epochs=4)
    result = train(cfg, split, out_dir=tmp_path)
    rows = (tmp_path / "train_log.csv").read_text().strip().splitlines()
    assert rows[0] == ",".join(losses.LOG_COLUMNS)
    assert len(rows) - 1 == len(result.history) == 4  # 2 labeled, batch 2 -> 1 step/epoch
    for line in rows[1:]:
        rec = dict(zip(losses.LOG_COLUMNS, line.split(",")))
        t = int(rec["epoch"])
        assert float(rec["alpha"]) == pytest.approx(0.1 * math.exp(-5 * (4 - t) / 4), abs=1e-9)
        assert float(rec["beta"]) == pytest.approx(0.1 * math.exp(-5 * t / 4), abs=1e-9)
    for name in ("best.pt", "last.pt"):
        assert (tmp_path / name).exists()


def test_determinism(split):
    cfg = tiny_cfg()
    h1 = train(cfg, split).history
    h2 = train(cfg, split).history
    assert h1 == h2
    h3 = train(dataclasses.replace(cfg, seed=1), split).history
    assert h3 != h1


def test_resume_reproduces_history(split, tmp_path):
    cfg = tiny_cfg(epochs=4, checkpoint_every=2)
    full = train(cfg, split, out_dir=tmp_path / "full")
    resumed = train(cfg, split, out_dir=tmp_path / "resumed",
                    resume_from=tmp_path / "full" / "epoch_0002.pt")
    assert resumed.history == full.history
    assert resumed.val_history == full.val_history
    a = (tmp_path / "full" / "train_log.csv").read_text().splitlines()
    b = (tmp_path / "resumed" / "train_log.csv").read_text().splitlines()
    assert b == [a[0]] + a[3:]  # resumed log holds only the steps it ran


def test_evaluate_split_structure(split):
    model = build_model(tiny_cfg().model, seed=0)
    records, summary = evaluate_split(model, split.test)
    assert len(records) == 2 * len(split.test)
    assert {r.modality.value for r in records} == {"a", "b"}
    assert set(summary["per_modality"]) == {"a", "b"}
    assert 0 <= summary["mean_dice"] <= 1
    with pytest.raises(ValueError):
        evaluate_split(model, [])


def test_split_seed_controls_labeled_choice():
    a, b = build_split(tiny_cfg(seed=0)), build_split(tiny_cfg(seed=5))
    # same generated volumes, different split
    ids = lambda s: sorted(x.sample_id for x in s.all_samples())
    assert ids(a) == ids(b)
    assert [s.sample_id for s in a.labeled] != [s.sample_id for s in b.labeled] or \
        [s.sample_id for s in a.val] != [s.sample_id for s in b.val]


def test_ablation_table(split, tmp_path):
    cfg = tiny_cfg(epochs=1)
    table = run_ablation(cfg, seeds=(0, 1), split_for_seed=lambda s: split)
    assert [r["row"] for r in table] == list(ABLATION_ROWS)
    for r in table:
        flags = ABLATION_ROWS[r["row"]]
        assert (r["encoder"], r["cmc"], r["ccl"]) == (
            flags.modality_specific_encoder, flags.cmc_strategy, flags.ccl_module)
        assert len(r["per_seed"]) == 2
        assert r["dice_a"] == pytest.approx(np.mean([p["dice_a"] for p in r["per_seed"]]))
    text = write_ablation(table, tmp_path / "a.csv", tmp_path / "a.txt")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(ABLATION_COLUMNS)
    assert text == format_ablation(table) and "full" in text
