import dataclasses

import numpy as np
import orjson
import pytest
from helpers import toy_model_config, toy_run_config

from polyadapt.checkpoint import read_checkpoint
from polyadapt.config import AblationVariant, TrainSchedule
from polyadapt.data.batching import collate
from polyadapt.data.manifest import ManifestRecord
from polyadapt.data.vocab import Vocabulary, detokenize
from polyadapt.decode import decode
from polyadapt.errors import DataError, NumericalAbort, UsageError
from polyadapt.model import SpeechRecognizer
from polyadapt.tensor import Parameter
from polyadapt.train import (
    Adam,
    MetricsLog,
    accumulate,
    apply_update,
    cap_per_language,
    clip_grad_norm,
    dev_loss,
    fit,
    lr_at_step,
    train_step,
)

F64 = np.float64


def _frames(seed, n=2, length=8):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(length, 4)) for _ in range(n)]


def _model(seed=0):
    return SpeechRecognizer(toy_model_config(), AblationVariant.TF, seed=seed, dtype=F64)


def test_lr_schedule():
    schedule = TrainSchedule(peak_lr=1e-3, warmup_steps=5)
    assert lr_at_step(5, schedule) == pytest.approx(1e-3)
    assert lr_at_step(1, schedule) == pytest.approx(2e-4)
    assert lr_at_step(20, schedule) == pytest.approx(5e-4)
    warm = [lr_at_step(s, schedule) for s in range(1, 6)]
    decay = [lr_at_step(s, schedule) for s in range(5, 50)]
    assert warm == sorted(warm)
    assert decay == sorted(decay, reverse=True)
    with pytest.raises(UsageError):
        lr_at_step(0, schedule)
    assert lr_at_step(500, TrainSchedule()) == 0.001


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, 2.0]), dtype=F64)
    idle = Parameter(np.array([5.0]), dtype=F64)
    opt = Adam([("p", p), ("idle", idle)])
    p.grad = np.array([0.5, -3.0])
    idle.grad = np.zeros(1)
    opt.step(0.1, {p})
    np.testing.assert_allclose(p.data, [0.9, 2.1], atol=1e-6)
    # not touched by the loss: value and moment counters stay put
    assert idle.data[0] == 5.0 and opt.steps["idle"] == 0 and opt.steps["p"] == 1


def test_adam_skips_frozen_parameters():
    frozen = Parameter(np.ones(2), requires_grad=False)
    opt = Adam([("frozen", frozen)])
    assert opt.params == []


def test_clip_grad_norm():
    a = Parameter(np.zeros(2), dtype=F64)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([("a", a)], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0, rel=1e-5)
    assert clip_grad_norm([("a", a)], 10.0) == pytest.approx(1.0, rel=1e-5)


def test_accumulate_groups_and_drops_tail():
    assert list(accumulate(range(7), 3)) == [[0, 1, 2], [3, 4, 5]]
    with pytest.raises(UsageError):
        list(accumulate(range(3), 0))


def _captured_grads(model, micro_batches):
    schedule = TrainSchedule(clip_norm=1e6)
    opt = Adam.for_model(model, schedule)
    captured = {}
    opt.step = lambda lr, touched: captured.update({n: p.grad.copy() for n, p in opt.params if p in touched})
    result = apply_update(model, micro_batches, opt, schedule)
    return captured, result


def test_accumulated_update_equals_one_large_batch():
    vocab = Vocabulary(2)
    frames = _frames(0, n=4)
    texts = ["ab", "ba", "aa", "bb"]
    parts = [collate(frames[:2], texts[:2], 0, vocab, F64), collate(frames[2:], texts[2:], 0, vocab, F64)]
    whole = collate(frames, texts, 0, vocab, F64)
    accumulated, r1 = _captured_grads(_model(), parts)
    single, r2 = _captured_grads(_model(), [whole])
    assert r1.tokens == r2.tokens == whole.n_tokens
    assert r1.loss == pytest.approx(r2.loss, rel=1e-10)
    assert accumulated.keys() == single.keys()
    for name in single:
        np.testing.assert_allclose(accumulated[name], single[name], rtol=1e-8, atol=1e-12)


def test_update_without_tokens_fails():
    batch = collate(_frames(1, n=1), ["ab"], 0, Vocabulary(2), F64)
    empty = dataclasses.replace(batch, target_mask=np.zeros_like(batch.target_mask))
    model = _model()
    with pytest.raises(DataError):
        train_step(model, empty, Adam.for_model(model, TrainSchedule()), TrainSchedule())


def test_non_finite_loss_aborts():
    model = _model()
    dict(model.named_parameters())["decoder.output.bias"].data[:] = np.nan
    batch = collate(_frames(2, n=1), ["ab"], 0, Vocabulary(2), F64)
    with pytest.raises(NumericalAbort) as info:
        train_step(model, batch, Adam.for_model(model, TrainSchedule()), TrainSchedule())
    assert info.value.step == 1


def test_overfits_a_single_utterance():
    cfg = toy_model_config(d_model=16, ffn_dim=32)
    model = SpeechRecognizer(cfg, AblationVariant.TF, seed=1, dtype=F64)
    vocab = Vocabulary(2)
    frames = _frames(3, n=1, length=10)
    batch = collate(frames, ["ab ba"], 1, vocab, F64)
    schedule = TrainSchedule(peak_lr=2e-2, warmup_steps=10)
    opt = Adam.for_model(model, schedule)
    start = dev_loss(model, [batch])
    for _ in range(200):
        train_step(model, batch, opt, schedule, smoothing=0.0)
    assert dev_loss(model, [batch]) < 0.1 < start
    hyp = decode(model, frames[0], 1, "greedy", max_len=10)[0]
    assert hyp.finished and detokenize(hyp.tokens, vocab) == "ab ba"


def test_cap_per_language():
    records = [ManifestRecord(f"p{i}", "a", f"l{i % 2}", 4) for i in range(6)]
    capped = cap_per_language(records, 2)
    assert [r.path for r in capped] == ["p0", "p1", "p2", "p3"]
    assert cap_per_language(records, 0) == records


def test_metrics_log_writes_json_lines(tmp_path):
    log = MetricsLog(tmp_path / "m" / "metrics.jsonl")
    log.write({"update": 1, "loss": np.float64(2.5)})
    log.write({"update": 2, "loss": 1.5})
    lines = (tmp_path / "m" / "metrics.jsonl").read_bytes().splitlines()
    assert [orjson.loads(line)["update"] for line in lines] == [1, 2]
    assert len(log.records) == 2


def test_fit_saves_best_checkpoint(toy_corpus, tmp_path):
    cfg = toy_run_config()
    model = SpeechRecognizer(cfg.model, AblationVariant.TF, seed=0)
    result = fit(model, toy_corpus, cfg, tmp_path)
    assert result.checkpoint == tmp_path / "best.ckpt"
    assert [m["update"] for m in result.metrics] == [2, 4]
    assert result.best_update in (2, 4)
    assert result.best_dev_loss_update in (2, 4)
    meta = read_checkpoint(result.checkpoint).metadata
    assert meta["best_update"] == result.best_update
    assert meta["dev_max_utterances"] == 2
    assert (tmp_path / "metrics.jsonl").read_text().count("\n") == 2
