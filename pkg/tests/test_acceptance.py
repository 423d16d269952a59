"""One test (or small group of tests) per primary acceptance criterion.

Each test carries ``@pytest.mark.criterion(name)``; the terminal summary in
``conftest.py`` prints a single PASS/FAIL/SKIP line per criterion together
with any figures recorded through ``record_property("detail", ...)``.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import check_grads, tiny_model
from recam import tensor as T
from recam.attention import MultiHeadParams, attention_weights, multi_head_attention
from recam.data import (OFFICIAL_SPLIT_SIZES, DatasetSplit, RecamInstance, dumps_split,
                        load_recam_jsonl, make_synthetic_dataset, save_recam_jsonl)
from recam.encoder import EncoderConfig, build_vocab
from recam.heads import bi_attention, make_head
from recam.model import MultipleChoiceModel
from recam.prompting import (FewShotConfig, MockSpec, PromptStyle, adversarial_mock,
                             complete_echo_select, mock_scorer, oracle_mock, run_prompt_eval)
from recam.tensor import RandomSource, Tensor
from recam.trainer import (TrainConfig, evaluate_accuracy, load_checkpoint, save_checkpoint,
                           train)

from test_attention import loop_attention

FIXTURES = Path(__file__).parent / "fixtures"
KINDS = ("softmax", "uni-attn", "bi-attn")


def copy_split(n, seed, name="train", article_len=40, question_len=6):
    return make_synthetic_dataset("copy", n, seed, name=name, article_len=article_len,
                                  question_len=question_len)


def model_for(train_split, kind, seed, d=32, max_len=64, frozen=True, init_std=0.02, **kw):
    vocab = build_vocab([" ".join([i.article, i.question, *i.options]) for i in train_split], 10_000)
    cfg = EncoderConfig(vocab_size=len(vocab), d_hidden=d, num_heads=2, d_ff=2 * d,
                        max_seq_len=max_len, freeze_encoder=frozen)
    return MultipleChoiceModel(vocab, cfg, kind, seed=seed, head_init_std=init_std, **kw)


# -- gradient fidelity --------------------------------------------------------------------

@pytest.mark.criterion("gradient fidelity")
def test_full_bi_attn_model_gradients(record_property):
    data = copy_split(2, seed=3, article_len=8, question_len=3)
    model = tiny_model(data, "bi-attn", d=8, max_len=16, frozen=False, init_std=0.5)
    assert model.encoder.cfg.num_layers == 1 and model.head.num_heads == 2
    params = model.trainable_parameters()
    assert len(params) == len(model.named_parameters())
    seqs = model.batch(list(data))
    labels = data.labels
    start = time.perf_counter()
    worst = check_grads(lambda: T.cross_entropy(model.forward(seqs).logits, labels), params,
                        tol=1e-4)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(params)} tensors, worst relative error {worst:.2e}, "
                              f"{elapsed:.1f} s")
    assert elapsed < 60.0


# -- attention oracle --------------------------------------------------------------------

@pytest.mark.criterion("attention oracle")
def test_multi_head_attention_oracle(record_property):
    rng = np.random.default_rng(0)
    p = MultiHeadParams.init(4, 2, RandomSource(1), std=0.7)
    q, kv = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 7, 4))
    mask = np.ones((2, 7), dtype=bool)
    mask[1, 4:] = False
    out, weights = multi_head_attention(p, Tensor(q), Tensor(kv), Tensor(kv), mask,
                                        return_weights=True)
    worst = 0.0
    for b in range(2):
        valid = mask[b]
        parts = []
        for i in range(2):
            cols = p.head_slice(i)
            parts.append(loop_attention(q[b] @ p.w_q.data[:, cols],
                                        kv[b][valid] @ p.w_k.data[:, cols],
                                        kv[b][valid] @ p.w_v.data[:, cols]))
        expected = np.concatenate(parts, axis=1) @ p.w_o.data
        worst = max(worst, float(np.abs(out.data[b] - expected).max()))
    row_sums = weights.data.sum(axis=-1)
    masked = weights.data[1][..., ~mask[1]]
    record_property("detail", f"max deviation {worst:.1e}, row-sum error "
                              f"{np.abs(row_sums - 1).max():.1e}, masked weight {masked.max():.1e}")
    assert worst <= 1e-12
    assert np.all(np.abs(row_sums - 1.0) <= 1e-6)
    assert masked.max() < 1e-12
    plain = attention_weights(Tensor(q), Tensor(kv), mask).data
    assert np.all(plain[1][..., ~mask[1]] < 1e-12)


# -- dimensional consistency -------------------------------------------------------------

@pytest.mark.criterion("dimensional consistency")
def test_bi_attention_shapes_for_random_lengths(record_property):
    rng = np.random.default_rng(5)
    d = 8
    head = make_head("bi-attn", d, 2, RandomSource(0), init_std=0.3)
    pairs = [(int(a), int(b)) for a, b in rng.integers(1, 40, size=(20, 2))]
    for l_p, l_qo in pairs:
        e_p, e_qo = Tensor(rng.standard_normal((l_p, d))), Tensor(rng.standard_normal((l_qo, d)))
        mha1, mha2, fusion = bi_attention(e_p, e_qo, head.attn_p, head.attn_qo)
        assert mha1.shape == (l_p, d), (l_p, l_qo)
        assert mha2.shape == (l_qo, d), (l_p, l_qo)
        assert fusion.shape == (2 * d,)
    assert head.pooled_width == 2 * d
    record_property("detail", f"{len(pairs)} (L_p, L_qo) pairs, fusion width {2 * d}")


# -- option-permutation equivariance -----------------------------------------------------

def permute(inst: RecamInstance, perm) -> RecamInstance:
    options = tuple(inst.options[j] for j in perm)
    return RecamInstance(inst.article, inst.question, options, list(perm).index(inst.label),
                         inst.id)


@pytest.mark.criterion("permutation equivariance")
@pytest.mark.parametrize("kind", KINDS)
def test_option_permutation_equivariance_full_model(kind, record_property):
    data = copy_split(50, seed=21, article_len=10, question_len=4)
    model = tiny_model(data, kind, d=8, max_len=32, init_std=0.5)
    rng = np.random.default_rng(22)
    perms = [rng.permutation(5) for _ in data]
    base = model.logits(list(data))
    permuted = model.logits([permute(inst, perm) for inst, perm in zip(data, perms)])
    mismatches = sum(not np.array_equal(permuted[i], base[i][perms[i]]) for i in range(len(data)))
    record_property("detail", f"{kind}: {mismatches}/50 instances differ")
    assert mismatches == 0


# -- overfit -----------------------------------------------------------------------------

# A tiny model memorising 32 instances: learning rate 1e-4, micro-batch 2 and the
# remaining defaults, with the accumulation window scaled to the set size so one
# optimizer step sees every instance once.  The head starts from a wider init
# and the encoder is trainable, otherwise 300 steps at this learning rate are too few.
OVERFIT = dict(learning_rate=1e-4, train_batch_size=2, grad_accumulation_steps=16,
               freeze_encoder=False, epochs=1000.0, max_steps=300, seed=0)


@pytest.mark.criterion("overfit")
def test_overfit_copy_set(record_property):
    data = copy_split(32, seed=0)
    model = model_for(data, "bi-attn", seed=0, frozen=False, init_std=0.35)
    start = time.perf_counter()
    res = train(model, data, None, TrainConfig(head_kind="bi-attn", **OVERFIT))
    elapsed = time.perf_counter() - start
    acc = evaluate_accuracy(model, data).accuracy
    record_property("detail", f"train accuracy {acc:.4f} after {res.steps} steps, "
                              f"{elapsed:.0f} s")
    assert res.steps <= 300
    assert acc == 1.0
    assert elapsed < 300.0


# -- directional head ordering ------------------------------------------------------------

# One configuration shared by every head: frozen encoder, default dropout and
# micro-batch, no accumulation, 15 epochs at lr 3e-3.  Final dev accuracy is used.
ORDERING = dict(learning_rate=3e-3, train_batch_size=2, grad_accumulation_steps=1,
                freeze_encoder=True, epochs=15.0)
ORDERING_SEEDS = range(5)


@pytest.fixture(scope="module")
def ordering_results():
    acc = {kind: [] for kind in KINDS}
    for seed in ORDERING_SEEDS:
        tr = copy_split(500, 1000 + seed)
        dv = copy_split(200, 2000 + seed, name="dev")
        for kind in KINDS:
            model = model_for(tr, kind, seed=seed)
            train(model, tr, None, TrainConfig(head_kind=kind, seed=seed, **ORDERING))
            acc[kind].append(evaluate_accuracy(model, dv).accuracy)
    return {kind: (float(np.mean(v)), v) for kind, v in acc.items()}


@pytest.mark.criterion("directional head ordering")
def test_head_ordering(ordering_results, record_property):
    mean = {kind: m for kind, (m, _) in ordering_results.items()}
    per_seed = "; ".join(f"{k} {[round(a, 3) for a in v]}" for k, (_, v) in ordering_results.items())
    record_property("detail", f"mean dev bi {mean['bi-attn']:.4f}, uni {mean['uni-attn']:.4f}, "
                              f"softmax {mean['softmax']:.4f}; margins bi-uni "
                              f"{mean['bi-attn'] - mean['uni-attn']:+.4f}, uni-softmax "
                              f"{mean['uni-attn'] - mean['softmax']:+.4f} ({per_seed})")
    assert mean["bi-attn"] >= mean["uni-attn"] >= mean["softmax"]


# -- accumulation equivalence -----------------------------------------------------------

@pytest.mark.criterion("accumulation equivalence")
def test_accumulated_window_equals_full_batch(record_property):
    data = copy_split(64, seed=1, article_len=12, question_len=4)
    common = dict(dropout_rate=0.0, epochs=1.0, freeze_encoder=False, learning_rate=1e-3, seed=5)
    big = tiny_model(data, frozen=False, seed=3)
    small = tiny_model(data, frozen=False, seed=3)
    r_big = train(big, data, None, TrainConfig(train_batch_size=64, grad_accumulation_steps=1,
                                               **common))
    r_small = train(small, data, None, TrainConfig(train_batch_size=2, grad_accumulation_steps=32,
                                                   **common))
    assert r_big.steps == r_small.steps == 1
    a, b = big.named_parameters(), small.named_parameters()
    worst = max(float(np.abs(a[n].data - b[n].data).max() / max(np.abs(a[n].data).max(), 1e-300))
                for n in a)
    record_property("detail", f"worst relative parameter difference {worst:.1e}")
    assert worst <= 1e-9


# -- cross-entropy anchor ---------------------------------------------------------------

@pytest.mark.criterion("cross-entropy anchor")
def test_uniform_logits_give_log_five(record_property):
    for value in (0.0, 3.7, -120.0):
        loss = T.cross_entropy(Tensor(np.full((4, 5), value)), np.array([0, 1, 2, 4])).item()
        assert abs(loss - math.log(5)) <= 1e-9
    record_property("detail", f"loss {loss!r} vs ln 5 {math.log(5)!r}")


# -- prompting oracle ---------------------------------------------------------------------

@pytest.mark.criterion("prompting oracle")
@pytest.mark.parametrize("style", list(PromptStyle))
def test_prompting_oracle_and_adversarial(style, record_property):
    split = copy_split(200, 31, name="dev", article_len=15, question_len=5)
    pool = copy_split(4, 32, name="trial", article_len=15, question_len=5)
    fewshot = FewShotConfig(pool=pool)
    good = run_prompt_eval(split, style, oracle_mock(split), fewshot, shots=[0, 1, 2])
    bad = run_prompt_eval(split, style, adversarial_mock(split), fewshot, shots=[0, 1, 2])
    record_property("detail", f"{style.value}: oracle {good.accuracy}, adversarial {bad.accuracy}")
    assert good.accuracy == {0: 1.0, 1: 1.0, 2: 1.0}
    assert bad.accuracy == {0: 0.0, 1: 0.0, 2: 0.0}


@pytest.mark.criterion("prompting oracle")
def test_complete_echo_normalisation(record_property):
    inst = RecamInstance("Some text here.", "It was the @placeholder one.",
                         ("fast fast", "fast", "slow", "slow slow slow", "odd"), 0)
    res = complete_echo_select(inst, mock_scorer(MockSpec(token_logprobs={"fast": -0.7,
                                                                          "slow": -2.0})))
    record_property("detail", f"complete-echo scores {res.scores}")
    assert res.scores[0] == res.scores[1] == -0.7
    assert res.scores[2] == res.scores[3] == -2.0
    assert res.chosen == 0


# -- data fidelity ------------------------------------------------------------------------

@pytest.mark.criterion("data fidelity")
def test_sample_instance_round_trip(tmp_path, record_property):
    split = load_recam_jsonl(FIXTURES / "sample_instance.jsonl", name="trial")
    path = tmp_path / "again.jsonl"
    save_recam_jsonl(split, path)
    again = load_recam_jsonl(path, name="trial")
    assert list(again) == list(split)
    assert dumps_split(again) == dumps_split(split)
    record_property("detail", f"label {split[0].label}, answer {split[0].answer!r}")


def official_file(task: int, split: str):
    root = os.environ.get("RECAM_DATA_DIR")
    if not root:
        return None
    hits = sorted(Path(root).rglob(f"Task_{task}_{split}.jsonl"))
    return hits[0] if hits else None


@pytest.mark.criterion("data fidelity")
@pytest.mark.parametrize("task", sorted(OFFICIAL_SPLIT_SIZES))
def test_official_split_counts(task, record_property):
    sizes = OFFICIAL_SPLIT_SIZES[task]
    files = {name: official_file(task, name) for name in sizes}
    if not all(files.values()):
        record_property("detail", f"task {task} official counts skipped, files absent")
        pytest.skip("official files not found (set RECAM_DATA_DIR)")
    counts = {name: len(load_recam_jsonl(path, name=name)) for name, path in files.items()}
    assert counts == sizes


# -- determinism --------------------------------------------------------------------------

@pytest.mark.criterion("determinism")
def test_identical_runs_and_checkpoint_logits(tmp_path, record_property):
    data = copy_split(8, seed=0, article_len=12, question_len=4)
    dev = copy_split(4, seed=9, name="dev", article_len=12, question_len=4)
    cfg = TrainConfig(grad_accumulation_steps=2, epochs=2.0, learning_rate=1e-2, seed=4,
                      freeze_encoder=False)
    first = train(tiny_model(data), data, dev, cfg, metrics_path=tmp_path / "a.jsonl")
    model = tiny_model(data)
    train(model, data, dev, cfg, metrics_path=tmp_path / "b.jsonl")
    blob = (tmp_path / "a.jsonl").read_bytes()
    assert blob and blob == (tmp_path / "b.jsonl").read_bytes()
    save_checkpoint(first.checkpoint, tmp_path / "last.ckpt")
    rebuilt = load_checkpoint(tmp_path / "last.ckpt").build_model()
    assert np.array_equal(model.logits(list(dev)), rebuilt.logits(list(dev)))
    record_property("detail", f"{len(blob.splitlines())} identical metric records, "
                              "logits bitwise equal after reload")
