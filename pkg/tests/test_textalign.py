import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semask.autodiff import Tensor
from semask.errors import (CheckpointError, DegenerateEmbedding, EmptyText,
                           InputError, ShapeError, VocabError)
from semask.model import ParamStore
from semask.textalign import (AlignMode, CmtConfig, EmbeddingArchive,
                              EmbeddingTable, TokenSequence, UtteranceText,
                              build_text_queries, cma_loss, cmt_forward,
                              init_cmt_params, read_archive, shift_pairs,
                              write_archive)
from semask.model import sinusoidal_encoding

RNG = np.random.default_rng(21)
D = 12
CMT = CmtConfig(layers=2, d_model=D, heads=2, ffn_dim=8, dropout=0.0)


def make_table(vocab=10, d=D, seed=0):
    vals = np.random.default_rng(seed).normal(size=(vocab, d))
    return EmbeddingTable(vals)


def make_store(seed=0):
    return init_cmt_params(ParamStore(), CMT, seed, dtype=np.float64)


# -- build_text_queries -------------------------------------------------------

def test_bos_eos_framing_adds_two_rows():
    e_t = build_text_queries(TokenSequence([3, 4, 5, 6, 7], 0, 1), make_table())
    assert e_t.shape == (7, D)


def test_zero_table_gives_positional_encoding_exactly():
    table = EmbeddingTable(np.zeros((10, D)))
    e_t = build_text_queries(TokenSequence([2, 3], 0, 1), table)
    assert np.allclose(e_t.data, sinusoidal_encoding(4, D, dtype=e_t.dtype))


def test_repeated_token_rows_differ_only_by_pe():
    table = make_table()
    e_t = build_text_queries(TokenSequence([5, 3, 5], 0, 1), table)
    pe = sinusoidal_encoding(5, D, dtype=e_t.dtype)
    assert np.allclose(e_t.data[1] - e_t.data[3], pe[1] - pe[3], atol=1e-12)


def test_unknown_token_rejected():
    with pytest.raises(VocabError):
        build_text_queries(TokenSequence([99], 0, 1), make_table())


# -- cmt_forward --------------------------------------------------------------

def test_attention_rows_sum_to_one():
    store = make_store()
    e_t = Tensor(RNG.normal(size=(6, D)))
    e_a = Tensor(RNG.normal(size=(15, D)))
    z, w = cmt_forward(e_t, e_a, store, CMT)
    assert z.shape == (6, D)
    assert w.shape == (CMT.layers, CMT.heads, 6, 15)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_single_speech_frame_gives_unit_attention():
    store = make_store()
    e_t = Tensor(RNG.normal(size=(4, D)))
    e_a = Tensor(RNG.normal(size=(1, D)))
    _, w = cmt_forward(e_t, e_a, store, CMT)
    assert np.allclose(w, 1.0)


def test_empty_speech_rejected():
    store = make_store()
    with pytest.raises(InputError):
        cmt_forward(Tensor(RNG.normal(size=(3, D))),
                    Tensor(np.zeros((0, D))), store, CMT)


def test_width_mismatch_rejected():
    store = make_store()
    with pytest.raises(ShapeError):
        cmt_forward(Tensor(RNG.normal(size=(3, D + 1))),
                    Tensor(RNG.normal(size=(4, D + 1))), store, CMT)


# -- shift_pairs --------------------------------------------------------------

def test_n1_pairings():
    z = Tensor(RNG.normal(size=(3, D)))  # BOS, tok1, EOS
    z_hat = RNG.normal(size=(1, D))
    sel_a, _ = shift_pairs(z, z_hat, AlignMode.ALIGNED)
    sel_r, _ = shift_pairs(z, z_hat, AlignMode.RIGHT_SHIFT)
    sel_l, _ = shift_pairs(z, z_hat, AlignMode.LEFT_SHIFT)
    assert np.array_equal(sel_a.data, z.data[1:2])
    assert np.array_equal(sel_r.data, z.data[0:1])
    assert np.array_equal(sel_l.data, z.data[2:3])


@pytest.mark.parametrize("mode", list(AlignMode))
def test_all_modes_yield_n_pairs(mode):
    n = 5
    z = Tensor(RNG.normal(size=(n + 2, D)))
    sel, tgt = shift_pairs(z, RNG.normal(size=(n, D)), mode)
    assert sel.shape == (n, D)
    assert tgt.shape == (n, D)


def test_right_shift_composition_recovers_alignment():
    n = 6
    z = Tensor(RNG.normal(size=(n + 2, D)))
    z_hat = RNG.normal(size=(n, D))
    sel_r, tgt_r = shift_pairs(z, z_hat, AlignMode.RIGHT_SHIFT)
    sel_a, tgt_a = shift_pairs(z, z_hat, AlignMode.ALIGNED)
    # re-pairing each right-shifted query with the previous target restores
    # the aligned pairing on the overlap: (sel_r[i], tgt_r[i-1]) == (sel_a[i-1], tgt_a[i-1])
    assert np.array_equal(sel_r.data[1:], sel_a.data[:-1])
    assert np.array_equal(tgt_r[:-1], tgt_a[:-1])


def test_empty_text_raises():
    z = Tensor(RNG.normal(size=(2, D)))
    with pytest.raises(EmptyText):
        shift_pairs(z, np.zeros((0, D)), AlignMode.ALIGNED)


def test_shift_law():
    n = 5
    z_data = RNG.normal(size=(n + 2, D))
    z = Tensor(z_data)
    cases = {AlignMode.ALIGNED: z_data[1:n + 1],
             AlignMode.RIGHT_SHIFT: z_data[0:n],
             AlignMode.LEFT_SHIFT: z_data[2:n + 2]}
    for true_mode, z_hat in cases.items():
        for mode in AlignMode:
            sel, tgt = shift_pairs(z, z_hat.copy(), mode)
            loss = float(cma_loss(sel, tgt).data)
            if mode is true_mode:
                assert loss < 1e-9
            else:
                assert loss > 0.1


# -- cma_loss -----------------------------------------------------------------

def test_identical_rows_give_zero_loss():
    z = RNG.normal(size=(4, D))
    assert float(cma_loss(Tensor(z.copy()), z).data) < 1e-12


def test_orthogonal_rows_give_n():
    z = np.zeros((4, D))
    z_hat = np.zeros((4, D))
    z[:, 0] = 1.0
    z_hat[:, 1] = 1.0
    assert abs(float(cma_loss(Tensor(z), z_hat).data) - 4.0) < 1e-12


def test_antiparallel_rows_give_2n():
    z = RNG.normal(size=(3, D))
    assert abs(float(cma_loss(Tensor(z.copy()), -z).data) - 6.0) < 1e-10


def test_zero_row_rejected():
    z = RNG.normal(size=(3, D))
    z_hat = z.copy()
    z_hat[1] = 0.0
    with pytest.raises(DegenerateEmbedding):
        cma_loss(Tensor(z), z_hat)


@given(st.floats(min_value=0.01, max_value=100.0))
@settings(max_examples=25, deadline=None)
def test_scale_invariance(c):
    rng = np.random.default_rng(33)
    z = rng.normal(size=(4, D))
    z_hat = rng.normal(size=(4, D))
    base = float(cma_loss(Tensor(z.copy()), z_hat).data)
    scaled = float(cma_loss(Tensor(c * z), z_hat).data)
    assert abs(base - scaled) < 1e-8


def test_mode_gradient_sparsity_parity():
    """All three modes touch the same parameters on one step."""
    n = 4
    e_a_data = RNG.normal(size=(9, D))
    e_t = build_text_queries(TokenSequence(RNG.integers(2, 10, n), 0, 1), make_table())
    z_hat = RNG.normal(size=(n, D))
    patterns = {}
    for mode in AlignMode:
        store = make_store(seed=5)
        z, _ = cmt_forward(e_t, Tensor(e_a_data), store, CMT)
        sel, tgt = shift_pairs(z, z_hat, mode)
        cma_loss(sel, tgt).backward()
        patterns[mode] = {name for name, t in store.items()
                          if t.grad is not None and np.any(t.grad != 0)}
    assert patterns[AlignMode.ALIGNED] == patterns[AlignMode.LEFT_SHIFT]
    assert patterns[AlignMode.ALIGNED] == patterns[AlignMode.RIGHT_SHIFT]


# -- archive codec ------------------------------------------------------------

def make_archive(seed=0, with_table=True):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(8, D)).astype(np.float32) if with_table else None
    archive = EmbeddingArchive(d_t=D, bos_id=0, eos_id=1, target_layer=-1,
                               table=table)
    archive.utterances["utt0"] = UtteranceText(
        "utt0", np.array([2, 3, 4]), rng.normal(size=(3, D)).astype(np.float32))
    archive.utterances["utt1"] = UtteranceText("utt1", np.array([], dtype=np.int64), None)
    return archive


def test_archive_round_trip(tmp_path):
    archive = make_archive()
    path = tmp_path / "a.cmke"
    write_archive(path, archive)
    loaded = read_archive(path)
    assert loaded.d_t == D and loaded.bos_id == 0 and loaded.eos_id == 1
    assert loaded.target_layer == -1
    assert np.array_equal(loaded.table, archive.table)
    assert np.array_equal(loaded.utterances["utt0"].ids, [2, 3, 4])
    assert np.array_equal(loaded.utterances["utt0"].target,
                          archive.utterances["utt0"].target)
    assert not loaded.utterances["utt1"].has_target


def test_archive_without_table(tmp_path):
    path = tmp_path / "b.cmke"
    write_archive(path, make_archive(with_table=False))
    loaded = read_archive(path)
    assert loaded.table is None
    with pytest.raises(InputError):
        loaded.embedding_table()


def test_archive_rejects_bad_magic_and_version(tmp_path):
    good = tmp_path / "good.cmke"
    write_archive(good, make_archive())
    raw = bytearray(good.read_bytes())
    bad_magic = tmp_path / "bad1.cmke"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError):
        read_archive(bad_magic)
    raw[4] = 99  # version field
    bad_version = tmp_path / "bad2.cmke"
    bad_version.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        read_archive(bad_version)


def test_call_counting_instrumentation():
    from semask import textalign
    textalign.reset_call_counts()
    build_text_queries(TokenSequence([2], 0, 1), make_table())
    assert textalign.CALL_COUNTS["build_text_queries"] == 1
    textalign.reset_call_counts()
    assert textalign.CALL_COUNTS == {}
