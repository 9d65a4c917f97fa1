import numpy as np
import pytest
from scipy import sparse

from riskforge.lib.errors import ConvergenceFailure, EmptyCorpus
from riskforge.text_features import (TextBlock, TextConfig, apply_text_block, build_text_features, fit_reduced_basis,
                                     fit_tfidf, load_basis, normalize_text, project, reconstruct, save_basis,
                                     select_notes, text_columns, transform_tfidf)
from conftest import frame_of


def _cohort():
    return frame_of({"hadm_id": [1, 2, 3]})


def test_select_notes_keeps_earliest_per_admission():
    notes = frame_of({"hadm_id": [2, 1, 1, 9], "charttime": [5.0, 8.0, 3.0, 1.0],
                      "text": ["b", "late", "early", "other"]})
    selection = select_notes(notes, _cohort(), "discharge")
    assert selection.hadm_ids == [1, 2]
    assert [r.text for r in selection.records] == ["early", "b"]
    assert selection.coverage_text() == "discharge 2 (66.7%)"
    with pytest.raises(ValueError):
        select_notes(notes, _cohort(), "nursing")


def test_normalize_text_drops_deid_digits_and_stopwords_but_keeps_negation():
    tokens = normalize_text("Patient ___ was NOT stable, 3 days.")
    assert tokens == ["patient", "not", "stable", "days"]
    assert normalize_text(None) == []


def test_vocabulary_ranked_by_document_frequency_then_term():
    docs = [["a", "b"], ["b", "c"], ["b", "a"], ["d"]]
    model = fit_tfidf(docs, "discharge", vocab_size=3)
    assert model.vocabulary == ("b", "a", "c")
    np.testing.assert_allclose(model.idf, np.log(5.0 / (1.0 + np.array([3.0, 2.0, 1.0]))) + 1.0)
    # out-of-vocabulary tokens carry no weight
    np.testing.assert_allclose(transform_tfidf(model, ["b", "zzz"]), [1.0, 0.0, 0.0])


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        fit_tfidf([[], []], "radiology")


@pytest.mark.parametrize("kind, target", [("svd", 0.8), ("pca", 0.9), ("svd", 0.5)])
def test_retained_components_are_the_smallest_prefix_reaching_target(rng, kind, target):
    X = rng.normal(size=(30, 12)) @ np.diag(np.linspace(3.0, 0.2, 12))
    basis = fit_reduced_basis(X, kind, target)
    Z = X - X.mean(axis=0) if kind == "pca" else X
    s = np.linalg.svd(Z, compute_uv=False)
    cumulative = np.cumsum(s ** 2) / np.sum(Z * Z)
    k = basis.retained
    assert cumulative[k - 1] >= target
    if k > 1:
        assert cumulative[k - 2] < target
    assert basis.cumulative == pytest.approx(cumulative[k - 1])
    assert project(basis, X).shape == (30, k)


def test_full_basis_reconstructs_input(rng):
    X = rng.normal(size=(10, 4))
    basis = fit_reduced_basis(X, "pca", 1.0)
    np.testing.assert_allclose(reconstruct(basis, project(basis, X)), X, atol=1e-10)


def test_sparse_vocabulary_wide_input(rng):
    dense = rng.random((40, 500)) * (rng.random((40, 500)) < 0.05)
    basis = fit_reduced_basis(sparse.csr_matrix(dense), "svd", 0.8)
    V = basis.components
    np.testing.assert_allclose(V @ V.T, np.eye(basis.retained), atol=1e-10)
    s = np.linalg.svd(dense, compute_uv=False)
    np.testing.assert_allclose(basis.explained_ratio, s[:basis.retained] ** 2 / np.sum(dense ** 2), rtol=1e-10)


def test_zero_matrix_has_nothing_to_explain():
    with pytest.raises(ConvergenceFailure):
        fit_reduced_basis(np.zeros((4, 3)), "svd", 0.8)
    with pytest.raises(ValueError):
        fit_reduced_basis(np.ones((4, 3)), "svd", 1.5)


def test_apply_text_block_zero_fills_and_flags_presence():
    block = TextBlock("discharge", "disch_tfidf_svd_", (3, 1), np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = apply_text_block(_cohort(), [block])
    assert out.values("disch_tfidf_svd_0").tolist() == [3.0, 0.0, 1.0]
    assert out.values("disch_tfidf_svd_1").tolist() == [4.0, 0.0, 2.0]
    assert out.values("has_discharge_note").tolist() == [1.0, 0.0, 1.0]
    assert out.masked_count("disch_tfidf_svd_0") == 0
    assert "has_radiology_note" not in out


def test_build_text_features_end_to_end():
    notes = {"discharge": frame_of({"hadm_id": [1, 3], "charttime": [1.0, 2.0],
                                    "text": ["cardiac arrest not responsive", "stable discharge home"]})}
    result = build_text_features(_cohort(), notes, {}, TextConfig(svd_target=0.99))
    frame = result.frame
    assert frame.values("hadm_id").tolist() == [1, 2, 3]
    assert frame.values("has_discharge_note").tolist() == [1.0, 0.0, 1.0]
    columns = text_columns(frame)
    assert "hadm_id" not in columns and columns[-1] == "has_discharge_note"
    assert frame.values(columns[0])[1] == 0.0
    assert set(result.bases) == {"discharge_tfidf"}
    assert [c for c in columns if "radio" in c] == []
    assert result.coverage == ("discharge 2 (66.7%)", "missing at least one note kind 1")


def test_embeddings_get_a_pca_block(rng):
    ids = [1, 2, 3]
    values = rng.normal(size=(3, 6))
    result = build_text_features(_cohort(), {}, {"radiology": (ids, values)}, TextConfig(pca_target=0.5))
    assert "radiology_embedding" in result.bases
    assert "radiology_bert_pca_0" in result.frame
    assert result.frame.values("has_radiology_note").tolist() == [1.0, 1.0, 1.0]


def test_basis_file_round_trip(tmp_path, rng):
    basis = fit_reduced_basis(rng.normal(size=(8, 5)), "pca", 0.9)
    save_basis(basis, tmp_path / "b.basis.csv")
    back = load_basis(tmp_path / "b.basis.csv")
    assert back.kind == "pca"
    np.testing.assert_allclose(back.components, basis.components, rtol=1e-14)
    np.testing.assert_allclose(back.center, basis.center, rtol=1e-14)
    np.testing.assert_allclose(back.explained_ratio, basis.explained_ratio, rtol=1e-14)
