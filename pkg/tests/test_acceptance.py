"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

The mechanism and WER-bucket criteria share one set of five-seed runs on the
synthetic keyword task; they dominate the runtime of this module.
"""
import itertools
import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, SENTENCES
from phonemlm.batcher import IGNORE, apply_masking, assemble_sequence
from phonemlm.checkpoint import load_checkpoint
from phonemlm.engine import (
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    gradient_check,
    layer_norm,
    matmul,
    mean,
    mul,
    precision,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    take_rows,
    transpose,
    tsum,
)
from phonemlm.evaluation import wer_bucket_report
from phonemlm.forge import (
    KeywordTask,
    NoiseConfig,
    build_corpus,
    compute_wer,
    edit_distance,
    g2p,
    load_lexicon,
    random_sentences,
)
from phonemlm.model import ModelConfig, cast_params, init_params, joint_pretrain_loss
from phonemlm.tokenizer import PHONEME, PHONEME_VOCAB_LIMIT, TYPE_PHONEME, TYPE_WORD, WORD, build_joint_vocab, train_bpe
from phonemlm.trainer import (
    FINETUNE_JOINT,
    FINETUNE_WORD_ONLY,
    LOSS_TERMS,
    PRETRAIN_JOINT,
    PRETRAIN_JOINT_NO_JOINT_LOSS,
    PRETRAIN_WORD_ONLY,
    RunConfig,
    build_sequences,
    finetune,
    params_from_checkpoint,
    predict,
    pretrain,
)


def verdict(name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- shared corpora


TASK_RECORDS, TRAIN_RECORDS, PRETRAIN_RECORDS = 5000, 4000, 10_000


@lru_cache(maxsize=None)
def task_data(seed: int):
    """Labelled task corpus, disjoint unlabelled pretraining corpus, joint vocabulary."""
    lexicon = load_lexicon()
    task = KeywordTask.from_lexicon(lexicon, seed=seed)
    records, stats = build_corpus(task.sample(18_000, seed=seed), NoiseConfig(seed=seed), lexicon)
    assert len(records) >= TASK_RECORDS, len(records)
    records = records[:TASK_RECORDS]
    other = seed + 7919
    unlabelled, _ = build_corpus(task.sample(36_000, seed=other), NoiseConfig(seed=other), lexicon)
    assert len(unlabelled) >= PRETRAIN_RECORDS, len(unlabelled)
    unlabelled = unlabelled[:PRETRAIN_RECORDS]
    for r in unlabelled:
        r.label = None
    word_model = train_bpe([r.asr_text for r in unlabelled], 400, WORD)
    phoneme_model = train_bpe([r.phoneme_seq for r in unlabelled], None, PHONEME)
    return records, unlabelled, build_joint_vocab(word_model, phoneme_model), stats


# ---------------------------------------------------------------- 1. gradients


def _primitive_cases(rng):
    def leaf(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def const(*shape):
        return Tensor(rng.normal(size=shape))

    a, b, c = leaf(3, 4), leaf(4), leaf(3, 1)
    yield "add/mul", lambda: tsum(mul(add(a, b), c) * (a - c)), [a, b, c]
    x, w, y = leaf(2, 3, 4), leaf(4, 5), leaf(2, 5, 3)
    yield "matmul", lambda: tsum(matmul(matmul(x, w), y)), [x, w, y]
    r, rw = leaf(2, 3, 4), const(4, 3, 2)
    yield "reshape/transpose", lambda: tsum(mul(transpose(reshape(r, (2, 12)).reshape(2, 3, 4), (2, 1, 0)), rw)), [r]
    m = leaf(3, 5)
    yield "mean/sum", lambda: tsum(mul(mean(m, axis=1, keepdims=True), m)), [m]
    s, sw = leaf(4, 7), const(4, 7)
    yield "softmax", lambda: tsum(mul(softmax(s), sw)), [s]
    ln_x, g, beta, lw = leaf(3, 6), leaf(6), leaf(6), const(3, 6)
    yield "layer_norm", lambda: tsum(mul(layer_norm(ln_x, g, beta), lw)), [ln_x, g, beta]
    ge = leaf(40)
    yield "gelu", lambda: tsum(mul(gelu(ge), ge)), [ge]
    re_ = Tensor(rng.normal(size=40) + np.sign(rng.normal(size=40)) * 0.1, requires_grad=True)
    yield "relu", lambda: tsum(mul(relu(re_), re_)), [re_]
    table, ew = leaf(6, 3), const(2, 3, 3)
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    yield "embedding", lambda: tsum(mul(embedding(table, ids), ew)), [table]
    rows, tw = leaf(5, 3), const(3, 3)
    yield "take_rows", lambda: tsum(mul(take_rows(rows, [4, 4, 0]), tw)), [rows]
    logits, t = leaf(6, 9), rng.integers(0, 9, size=6)
    yield "cross_entropy", lambda: softmax_cross_entropy(logits, t, reduction="sum"), [logits]
    d = leaf(30)
    yield "dropout", lambda: tsum(mul(dropout(d, 0.3, np.random.default_rng(1)), d)), [d]


def test_gradient_suite(vocab, phoneme_lines):
    start = time.perf_counter()
    errors = {}
    with precision(np.float64):
        for name, f, params in _primitive_cases(np.random.default_rng(0)):
            errors[name] = gradient_check(f, params, coords_per_tensor=64, seed=0)
        cfg = ModelConfig(vocab_size=vocab.total_size, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16,
                          max_positions=64, dropout_rate=0.0, seed=0)
        params = cast_params(init_params(cfg), np.float64)
        rows = []
        for i, (s, p) in enumerate(zip(SENTENCES[:2], phoneme_lines[:2])):
            seq = assemble_sequence(vocab.encode(s), vocab.encode(p, PHONEME), vocab, 64)
            rows.append(apply_masking(seq, vocab, 0.2, seed=i))
        errors["joint loss"] = gradient_check(lambda: joint_pretrain_loss(rows, params, cfg, vocab).total_tensor,
                                              list(params.values()), coords_per_tensor=64, seed=1)
    seconds = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    verdict("gradient suite", errors[worst] < 1e-4 and seconds < 120,
            f"{len(errors)} checks, max rel err {errors[worst]:.2e} ({worst}), {seconds:.0f}s")


# ---------------------------------------------------------------- 2. masking


def test_masking_statistics(vocab, lexicon):
    rng = np.random.default_rng(0)
    lines = random_sentences(2500, lexicon, seed=5)
    selected = maskable = 0
    actions = np.zeros(3, dtype=np.int64)
    random_ok = random_total = 0
    i = 0
    while maskable < 100_000:
        text = lines[i % len(lines)]
        i += 1
        seq = assemble_sequence(vocab.encode(text), vocab.encode(" ".join(g2p(text, lexicon)), PHONEME), vocab, 256)
        row = apply_masking(seq, vocab, 0.15, rng=rng)
        types = vocab.type_array[row.token_ids]
        maskable += int(np.isin(types, (TYPE_WORD, TYPE_PHONEME)).sum())
        sel = row.targets != IGNORE
        selected += int(sel.sum())
        actions += np.bincount(row.action[sel], minlength=3)
        rand = row.action == 2
        random_total += int(rand.sum())
        random_ok += int((vocab.type_array[row.masked_ids[rand]] == types[rand]).sum())
        assert np.all((row.masked_ids == vocab.mask_id) == (row.action == 0))
    rate = selected / maskable
    split = actions / actions.sum()
    ok = abs(rate - 0.15) <= 0.005 and np.all(np.abs(split - [0.8, 0.1, 0.1]) <= 0.01) and random_ok == random_total
    verdict("masking statistics", ok,
            f"{maskable} tokens, selected {rate:.4f}, mask/keep/random {split[0]:.4f}/{split[1]:.4f}/{split[2]:.4f}, "
            f"type-matched {random_ok}/{random_total}")


# ---------------------------------------------------------------- 3. layout


def test_layout_exactness(vocab):
    words = vocab.encode("the cat sat")
    phonemes = vocab.encode("DH AH | K AE T | S AE T", PHONEME)
    seq = assemble_sequence(words, phonemes, vocab, 64)
    nw, np_ = len(words), len(phonemes)
    expect_tokens = [vocab.bos_id, *words, vocab.sep_id, *phonemes, vocab.sep_id]
    expect_pos = list(range(nw + 2)) + list(range(np_ + 1))
    expect_types = [0] * (nw + 2) + [1] * (np_ + 1)
    ok = (
        seq.token_ids.tolist() == expect_tokens
        and seq.position_ids.tolist() == expect_pos
        and seq.type_ids.tolist() == expect_types
        and seq.position_ids[nw + 2] == 0
        and all(vocab.type_array[t] == TYPE_WORD for t in seq.token_ids[seq.type_ids == 0][1:-1])
        and all(vocab.type_array[t] == TYPE_PHONEME for t in seq.token_ids[seq.type_ids == 1][:-1])
    )
    short = assemble_sequence(words, phonemes, vocab, 8)
    ok &= short.position_ids[short.phoneme_span[0]] == 0 and len(short.token_ids) == 8
    verdict("layout exactness", bool(ok),
            f"{nw} word + {np_} phoneme tokens, phoneme positions restart at 0, types 0^{nw + 2} 1^{np_ + 1}")


# ---------------------------------------------------------------- 4. loss structure


def test_loss_structure(vocab, phoneme_lines):
    cfg = ModelConfig(vocab_size=vocab.total_size, hidden_dim=16, num_layers=1, num_heads=2, ffn_dim=32,
                      max_positions=64, dropout_rate=0.0, seed=0)
    params = init_params(cfg)
    rows = [apply_masking(assemble_sequence(vocab.encode(s), vocab.encode(p, PHONEME), vocab, 64), vocab, 0.3, seed=i)
            for i, (s, p) in enumerate(zip(SENTENCES, phoneme_lines))]
    full = joint_pretrain_loss(rows, params, cfg, vocab, LOSS_TERMS[PRETRAIN_JOINT])
    summed = np.float32(full.word_mlm_loss) + np.float32(full.phoneme_mlm_loss) + np.float32(full.joint_mlm_loss)
    a3 = joint_pretrain_loss(rows, params, cfg, vocab, LOSS_TERMS[PRETRAIN_JOINT_NO_JOINT_LOSS])
    b2 = joint_pretrain_loss(rows, params, cfg, vocab, LOSS_TERMS[PRETRAIN_WORD_ONLY])
    ok = (
        full.total == float(summed)
        and min(full.word_mlm_loss, full.phoneme_mlm_loss, full.joint_mlm_loss) > 0
        and a3.joint_mlm_loss == 0.0 and a3.word_mlm_loss == full.word_mlm_loss
        and b2.phoneme_mlm_loss == 0.0 and b2.joint_mlm_loss == 0.0 and b2.total == full.word_mlm_loss
    )
    verdict("loss structure", ok,
            f"total {full.total:.4f} = {full.word_mlm_loss:.4f} + {full.phoneme_mlm_loss:.4f} + {full.joint_mlm_loss:.4f}; "
            f"A3 joint {a3.joint_mlm_loss}, B2 phoneme/joint {b2.phoneme_mlm_loss}/{b2.joint_mlm_loss}")


# ---------------------------------------------------------------- 5. WER oracle


def recursive_distance(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))

    return go(0, 0)


def test_wer_oracle(lexicon):
    alphabet = ("x", "y", "z")
    seqs = [s for n in range(7) for s in itertools.product(alphabet, repeat=n)]
    rng = np.random.default_rng(0)
    pairs = rng.integers(0, len(seqs), size=(100_000, 2))
    mismatches = 0
    for i, j in pairs:
        a, b = seqs[i], seqs[j]
        if edit_distance(a, b) != recursive_distance(a, b):
            mismatches += 1
        elif a and compute_wer(" ".join(a), " ".join(b)) != recursive_distance(a, b) / len(a):
            mismatches += 1
    records, stats = build_corpus(random_sentences(1000, lexicon, seed=21), NoiseConfig(seed=21), lexicon)
    in_band = all(0.05 <= r.wer <= 0.40 for r in records)
    mean_wer = float(np.mean([r.wer for r in records]))
    verdict("WER oracle", mismatches == 0 and in_band and 0.28 <= mean_wer <= 0.33,
            f"{len(pairs)} sampled pairs of {len(seqs)}^2, {mismatches} mismatches; {len(records)} records "
            f"all in [0.05, 0.40]: {in_band}; mean WER {mean_wer:.4f}")


# ---------------------------------------------------------------- 6. BPE


def test_bpe():
    _, unlabelled, vocab, _ = task_data(0)
    bad = 0
    for r in unlabelled:
        bad += vocab.decode(vocab.encode(r.asr_text)) != r.asr_text
        bad += vocab.decode(vocab.encode(r.phoneme_seq, PHONEME)) != r.phoneme_seq
    units = len(vocab.phoneme_model)
    verdict("BPE", units <= PHONEME_VOCAB_LIMIT and bad == 0 and len(unlabelled) == 10_000,
            f"{units} phoneme units, {len(unlabelled)} lines x (word, phoneme), {bad} round-trip mismatches")


# ---------------------------------------------------------------- 7/8. mechanism and WER buckets


@dataclass(frozen=True)
class MechanismConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    dropout_rate: float = 0.1
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 5
    finetune_lr: float = 5e-4
    batch_size: int = 32


MECH = MechanismConfig()
BUDGET_SECONDS = 15 * 60


@lru_cache(maxsize=None)
def mechanism_run(seed: int) -> dict:
    records, unlabelled, vocab, stats = task_data(seed)
    train, test = records[:TRAIN_RECORDS], records[TRAIN_RECORDS:]
    model_cfg = ModelConfig(vocab_size=vocab.total_size, hidden_dim=MECH.hidden_dim, num_layers=MECH.num_layers,
                            num_heads=MECH.num_heads, ffn_dim=MECH.ffn_dim, max_positions=128,
                            dropout_rate=MECH.dropout_rate, seed=seed)
    out = {"mean_wer": stats.mean_wer, "seconds": {}}

    def pre(mode):
        t = time.perf_counter()
        ck = pretrain(unlabelled, RunConfig(mode, epochs=MECH.pretrain_epochs, batch_size=MECH.batch_size,
                                            lr=MECH.pretrain_lr, seed=seed), vocab, model_cfg)
        return ck, time.perf_counter() - t

    def fine(ck, mode):
        t = time.perf_counter()
        res = finetune(ck, train, RunConfig(mode, epochs=MECH.finetune_epochs, batch_size=MECH.batch_size,
                                            lr=MECH.finetune_lr, seed=seed), vocab, test_records=test)
        report = wer_bucket_report([r.wer for r in test], res.test_predictions, [r.label for r in test], 4)
        return report, time.perf_counter() - t

    word_ck, word_pre = pre(PRETRAIN_WORD_ONLY)
    joint_ck, joint_pre = pre(PRETRAIN_JOINT)
    for name, ck, mode, pre_s in (("B2", word_ck, FINETUNE_WORD_ONLY, word_pre),
                                  ("PhonemeBERT", joint_ck, FINETUNE_JOINT, joint_pre),
                                  ("A1", joint_ck, FINETUNE_WORD_ONLY, joint_pre)):
        out[name], fine_s = fine(ck, mode)
        out["seconds"][name] = pre_s + fine_s
    return out


def test_mechanism_check():
    rows, wins = [], 0
    for seed in MECH.seeds:
        r = mechanism_run(seed)
        b2, joint, a1 = r["B2"].accuracy, r["PhonemeBERT"].accuracy, r["A1"].accuracy
        within = max(r["seconds"].values()) <= BUDGET_SECONDS
        ok = joint >= b2 + 0.03 and a1 >= b2 and within
        wins += ok
        rows.append(f"seed {seed}: joint {joint:.3f} B2 {b2:.3f} A1 {a1:.3f} "
                    f"(max {max(r['seconds'].values()):.0f}s) {'ok' if ok else 'miss'}")
    verdict("mechanism check", wins >= 4, f"{wins}/5 seeds; " + "; ".join(rows))


def test_wer_bucket_trend():
    rows, wins = [], 0
    for seed in MECH.seeds:
        r = mechanism_run(seed)
        adv = [r["PhonemeBERT"].bucket_accuracy(b) - r["B2"].bucket_accuracy(b) for b in ("10-20", "20-30", "30+")]
        ok = adv[0] <= adv[1] <= adv[2]
        wins += ok
        rows.append(f"seed {seed}: " + "/".join(f"{100 * a:+.1f}" for a in adv) + (" ok" if ok else " miss"))
    verdict("WER-bucket trend", wins >= 4, f"{wins}/5 seeds; advantage 10-20/20-30/30+ in points: " + "; ".join(rows))


# ---------------------------------------------------------------- 9. reproducibility


def test_reproducibility_and_resume(tmp_path):
    records, unlabelled, vocab, _ = task_data(0)
    cfg = ModelConfig(vocab_size=vocab.total_size, hidden_dim=16, num_layers=1, num_heads=2, ffn_dim=32,
                      max_positions=128, dropout_rate=0.1, seed=0)
    run = RunConfig(PRETRAIN_JOINT, epochs=2, batch_size=16, lr=1e-3, seed=7, checkpoint_dir=str(tmp_path),
                    checkpoint_every=5)
    corpus = unlabelled[:80]
    full = pretrain(corpus, run, vocab, cfg)
    again = pretrain(corpus, run, vocab, cfg)
    resumed = pretrain(corpus, run, vocab, resume=load_checkpoint(tmp_path / "pretrain_joint-step5.pbrt"))
    same = lambda a, b: all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params) and a.history == b.history
    fine = RunConfig(FINETUNE_JOINT, epochs=2, batch_size=16, lr=1e-3, seed=7)
    m1 = finetune(full, records[:120], fine, vocab, test_records=records[120:160]).test_metrics
    m2 = finetune(again, records[:120], fine, vocab, test_records=records[120:160]).test_metrics
    ok = same(full, again) and same(full, resumed) and m1 == m2
    verdict("reproducibility and resume", ok,
            f"{full.step} steps, rerun bitwise {same(full, again)}, resume from step 5 bitwise {same(full, resumed)}, "
            f"fine-tune metrics {m1} vs {m2}")


# ---------------------------------------------------------------- 10. overfit


def test_finetune_overfit():
    records, _, vocab, _ = task_data(0)
    toy = records[:64]
    cfg = ModelConfig(vocab_size=vocab.total_size, hidden_dim=32, num_layers=2, num_heads=2, ffn_dim=64,
                      max_positions=128, dropout_rate=0.0, seed=0)
    run = RunConfig(FINETUNE_WORD_ONLY, epochs=50, batch_size=16, lr=3e-3, seed=0)
    res = finetune(None, toy, run, vocab, model_cfg=cfg, val_records=toy, max_steps=200)
    seqs = build_sequences(toy, run, vocab)
    preds = predict(params_from_checkpoint(res.checkpoint), cfg, seqs, num_classes=res.checkpoint.num_classes)
    acc = float(np.mean(preds == np.array([r.label for r in toy])))
    first = next((e for e, (a, _) in enumerate(res.val_history) if a == 1.0), None)
    steps = None if first is None else (first + 1) * math.ceil(len(toy) / run.batch_size)
    verdict("fine-tune overfit", acc == 1.0 and len(res.train_losses) <= 200,
            f"train accuracy {acc:.3f} after {len(res.train_losses)} steps; first 100% at step {steps}")
