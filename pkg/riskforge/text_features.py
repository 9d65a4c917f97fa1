"""
Note text and note embeddings to reduced numeric features.

Discharge and radiology notes are filtered to one note per admission,
vectorized with a capped TF-IDF vocabulary and compressed with a truncated
SVD; precomputed embeddings are compressed with PCA. Admissions without a
note get zeros in the reduced space plus a presence indicator.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from sklearn.feature_extraction.text import CountVectorizer, TfidfVectorizer
from sklearn.utils.extmath import svd_flip

from riskforge.lib.artifacts import read_table, write_table
from riskforge.lib.errors import ConvergenceFailure, EmptyCorpus, IoFailure, MissingColumn
from riskforge.lib.logger import log_debug, log_info, log_warning
from riskforge.lib.tabular import PatientFrame

MODULE = "text_features"

NOTE_KINDS = ("discharge", "radiology")
NOTES_SCHEMA = {"hadm_id": "int", "charttime": "time", "text": "str"}
EMBEDDING_DIM = 768

VOCAB_SIZE = 500
SVD_TARGET = 0.80
PCA_TARGET = 0.90
RESIDUAL_TOL = 1e-8

# reduced-feature column prefixes and presence indicators
TFIDF_PREFIX = {"discharge": "disch_tfidf_svd_", "radiology": "radio_tfidf_svd_"}
EMBEDDING_PREFIX = {"discharge": "discharge_bert_pca_", "radiology": "radiology_bert_pca_"}
INDICATOR = {"discharge": "has_discharge_note", "radiology": "has_radiology_note"}

DEID_MARKER = "___"
_NON_LETTERS = re.compile(r"[^a-z\s]+")

# English stopwords; the negators no / not / nor are kept as tokens
STOPWORDS = frozenset("""
i me my myself we our ours ourselves you you're you've you'll you'd your yours yourself yourselves
he him his himself she she's her hers herself it it's its itself they them their theirs themselves
what which who whom this that that'll these those am is are was were be been being have has had
having do does did doing a an the and but if or because as until while of at by for with about
against between into through during before after above below to from up down in out on off over
under again further then once here there when where why how all any both each few more most other
some such only own same so than too very s t can will just don don't should should've now d ll m o
re ve y ain aren aren't couldn couldn't didn didn't doesn doesn't hadn hadn't hasn hasn't haven
haven't isn isn't ma mightn mightn't mustn mustn't needn needn't shan shan't shouldn shouldn't wasn
wasn't weren weren't won won't wouldn wouldn't
""".split())


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = VOCAB_SIZE
    svd_target: float = SVD_TARGET
    pca_target: float = PCA_TARGET

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        for name in ("svd_target", "pca_target"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")


@dataclass(frozen=True)
class NoteRecord:
    hadm_id: int
    kind: str
    charttime: float
    text: str


@dataclass(frozen=True)
class NoteSelection:
    kind: str
    records: tuple[NoteRecord, ...]
    n_admissions: int

    @property
    def covered(self) -> int:
        return len(self.records)

    @property
    def hadm_ids(self) -> list[int]:
        return [r.hadm_id for r in self.records]

    def coverage_text(self) -> str:
        pct = 100.0 * self.covered / self.n_admissions if self.n_admissions else 0.0
        return f"{self.kind} {self.covered} ({pct:.1f}%)"


@dataclass(frozen=True)
class TfidfModel:
    kind: str
    vocabulary: tuple[str, ...]
    idf: np.ndarray
    df: np.ndarray
    n_docs: int
    vectorizer: TfidfVectorizer


@dataclass(frozen=True)
class ReducedBasis:
    kind: str
    components: np.ndarray
    explained_ratio: np.ndarray
    center: np.ndarray | None = None

    @property
    def retained(self) -> int:
        return self.components.shape[0]

    @property
    def cumulative(self) -> float:
        return float(self.explained_ratio.sum())


@dataclass(frozen=True)
class TextBlock:
    """Reduced vectors for the admissions that have a note of `kind`."""
    kind: str
    prefix: str
    hadm_ids: tuple[int, ...]
    values: np.ndarray


# === Note filtering ===
def select_notes(notes: PatientFrame, cohort: PatientFrame, kind: str) -> NoteSelection:
    """Earliest note per cohort admission; ties on charttime keep file order."""
    if kind not in NOTE_KINDS:
        raise ValueError(f"unknown note kind {kind!r}")
    for name in NOTES_SCHEMA:
        if name not in notes:
            raise MissingColumn(name, f"{kind} notes")
    cohort_ids = {int(h) for h in cohort.values("hadm_id") if not np.isnan(h)}
    df = notes.to_dataframe()
    df = df[df["hadm_id"].isin(cohort_ids)]
    df = df.sort_values(["hadm_id", "charttime"], kind="mergesort", na_position="last")
    first = df.drop_duplicates("hadm_id", keep="first")
    dropped = len(df) - len(first)
    records = tuple(NoteRecord(int(row.hadm_id), kind, float(row.charttime),
                               "" if pd.isna(row.text) else str(row.text))
                    for row in first.itertuples(index=False))
    selection = NoteSelection(kind, records, len(cohort_ids))
    log_info(MODULE, f"notes: {selection.coverage_text()}, {dropped} later notes dropped")
    return selection


def coverage_report(selections: Sequence[NoteSelection], cohort: PatientFrame) -> list[str]:
    """One line per note kind plus the admissions missing at least one kind."""
    lines = [s.coverage_text() for s in selections]
    cohort_ids = {int(h) for h in cohort.values("hadm_id") if not np.isnan(h)}
    complete = set(cohort_ids)
    for s in selections:
        complete &= set(s.hadm_ids)
    lines.append(f"missing at least one note kind {len(cohort_ids) - len(complete)}")
    return lines


# === TF-IDF ===
def normalize_text(text) -> list[str]:
    if text is None or (isinstance(text, float) and np.isnan(text)):
        return []
    text = str(text).lower().replace(DEID_MARKER, " ")
    text = _NON_LETTERS.sub(" ", text)
    return [tok for tok in text.split() if tok not in STOPWORDS]


def _pretokenized(doc):
    return doc


def _rank_vocabulary(docs: Sequence[list[str]], size: int) -> tuple[list[str], np.ndarray]:
    counter = CountVectorizer(analyzer=_pretokenized, binary=True)
    counts = counter.fit_transform(docs)
    terms = counter.get_feature_names_out()
    df = np.asarray(counts.sum(axis=0)).ravel()
    order = sorted(range(len(terms)), key=lambda i: (-df[i], terms[i]))[:size]
    return [str(terms[i]) for i in order], df[order]


def fit_tfidf(docs: Sequence[list[str]], kind: str, vocab_size: int = VOCAB_SIZE) -> TfidfModel:
    """
    Vocabulary is the `vocab_size` terms with the highest document frequency,
    ties broken lexicographically. idf(t) = ln((1 + N) / (1 + df(t))) + 1.
    """
    docs = [list(d) for d in docs]
    if not any(docs):
        raise EmptyCorpus(kind, "no non-empty documents")
    vocabulary, df = _rank_vocabulary(docs, vocab_size)
    vectorizer = TfidfVectorizer(analyzer=_pretokenized, vocabulary=vocabulary, smooth_idf=True,
                                 sublinear_tf=False, norm="l2")
    vectorizer.fit(docs)
    log_info(MODULE, f"{kind} TF-IDF: {len(vocabulary)} terms from {len(docs)} documents")
    return TfidfModel(kind, tuple(vocabulary), vectorizer.idf_.copy(), df, len(docs), vectorizer)


def transform_tfidf(model: TfidfModel, doc: list[str]) -> np.ndarray:
    """Dense L2-normalized weights; out-of-vocabulary tokens are ignored."""
    return np.asarray(model.vectorizer.transform([list(doc)]).todense()).ravel()


def tfidf_matrix(model: TfidfModel, docs: Sequence[list[str]]) -> sparse.csr_matrix:
    return model.vectorizer.transform([list(d) for d in docs]).tocsr()


# === Reduced bases ===
def fit_reduced_basis(matrix, kind: str, target: float) -> ReducedBasis:
    """
    svd: components of the raw matrix. pca: components after column-mean
    centering. Explained ratios are squared singular values over the squared
    Frobenius norm of the (centered) matrix; the smallest prefix reaching
    `target` is retained.

    The decomposition is a full dense LAPACK SVD, not an iterative solver;
    inputs are at most vocabulary-wide. The reconstruction residual
    ||X V - U S|| / ||X|| must stay under RESIDUAL_TOL or ConvergenceFailure
    is raised.
    """
    if kind not in ("svd", "pca"):
        raise ValueError(f"unknown basis kind {kind!r}")
    if not 0.0 < target <= 1.0:
        raise ValueError("target must be in (0, 1]")
    X = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a 2-D matrix with at least two rows")
    center = X.mean(axis=0) if kind == "pca" else None
    if center is not None:
        X = X - center
    total = float(np.sum(X * X))
    if total == 0.0:
        raise ConvergenceFailure(kind, "matrix has no variance to explain")
    try:
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise ConvergenceFailure(kind, str(e)) from e
    U, Vt = svd_flip(U, Vt)
    residual = np.linalg.norm(X @ Vt.T - U * s) / np.sqrt(total)
    if not residual < RESIDUAL_TOL:
        raise ConvergenceFailure(kind, f"decomposition residual {residual:.3g}")

    ratio = s ** 2 / total
    cumulative = np.cumsum(ratio)
    k = int(np.searchsorted(cumulative, target - 1e-12) + 1)
    k = min(k, len(s))
    log_info(MODULE, f"{kind}: {k} of {len(s)} components explain {cumulative[k - 1]:.3f} (target {target})")
    return ReducedBasis(kind, Vt[:k].copy(), ratio[:k].copy(), center)


def project(basis: ReducedBasis, matrix) -> np.ndarray:
    X = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)
    if X.shape[1] != basis.components.shape[1]:
        raise ValueError(f"basis has {basis.components.shape[1]} input columns, matrix has {X.shape[1]}")
    if basis.center is not None:
        X = X - basis.center
    return X @ basis.components.T


def reconstruct(basis: ReducedBasis, scores: np.ndarray) -> np.ndarray:
    out = np.asarray(scores) @ basis.components
    return out + basis.center if basis.center is not None else out


# === Embeddings ===
def read_embeddings(path, cohort: PatientFrame | None = None) -> tuple[list[int], np.ndarray]:
    """hadm_id plus numeric columns; the first row per admission wins."""
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError as e:
        raise IoFailure(str(path), "file not found") from e
    except (OSError, pd.errors.ParserError) as e:
        raise IoFailure(str(path), str(e)) from e
    if "hadm_id" not in df.columns:
        raise MissingColumn("hadm_id", f"not in header of {path}")
    df = df.drop_duplicates("hadm_id", keep="first")
    if cohort is not None:
        df = df[df["hadm_id"].isin(set(cohort.values("hadm_id").astype(int)))]
    value_columns = [c for c in df.columns if c != "hadm_id"]
    values = df[value_columns].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = int(np.isnan(values).any(axis=1).sum())
    if bad:
        log_warning(MODULE, f"{path}: {bad} embedding rows with non-numeric cells dropped")
        keep = ~np.isnan(values).any(axis=1)
        df, values = df[keep], values[keep]
    if values.shape[1] != EMBEDDING_DIM:
        log_debug(MODULE, f"{path}: embedding width {values.shape[1]}")
    return df["hadm_id"].astype(int).tolist(), values


# === Assembly ===
def apply_text_block(cohort: PatientFrame, blocks: Sequence[TextBlock]) -> PatientFrame:
    """
    Append one column per reduced component (`<prefix><i>`, 0-based) and one
    presence indicator per note kind. Admissions without a vector get 0; a kind
    with no block at all gets no columns, indicator included.
    """
    hadm = cohort.values("hadm_id")
    row_of = {int(h): i for i, h in enumerate(hadm) if not np.isnan(h)}
    out = cohort
    present = {}
    n = len(cohort)
    for block in blocks:
        values = np.asarray(block.values, dtype=float).reshape(len(block.hadm_ids), -1)
        filled = np.zeros((n, values.shape[1]))
        hit = np.zeros(n, dtype=bool)
        for h, vec in zip(block.hadm_ids, values):
            row = row_of.get(int(h))
            if row is not None:
                filled[row] = vec
                hit[row] = True
        present[block.kind] = present.get(block.kind, np.zeros(n, dtype=bool)) | hit
        for i in range(values.shape[1]):
            out = out.with_column(f"{block.prefix}{i}", filled[:, i], mask=np.zeros(n, dtype=bool))
    for kind in NOTE_KINDS:
        if kind in present:
            out = out.with_column(INDICATOR[kind], present[kind].astype(float), mask=np.zeros(n, dtype=bool))
    added = len(out.columns) - len(cohort.columns)
    log_info(MODULE, f"text block: {added} columns appended to {n} admissions")
    return out


@dataclass(frozen=True)
class TextArtifacts:
    frame: PatientFrame
    tfidf: Mapping[str, TfidfModel]
    bases: Mapping[str, ReducedBasis]
    coverage: tuple[str, ...]


def build_text_features(cohort: PatientFrame, notes: Mapping[str, PatientFrame],
                        embeddings: Mapping[str, tuple[list[int], np.ndarray]],
                        cfg: TextConfig = TextConfig()) -> TextArtifacts:
    """
    `notes` and `embeddings` are keyed by note kind; either may omit a kind.
    Bases are keyed "<kind>_tfidf" / "<kind>_embedding".
    """
    blocks, tfidf, bases, selections = [], {}, {}, []
    for kind in NOTE_KINDS:
        if kind in notes:
            selection = select_notes(notes[kind], cohort, kind)
            selections.append(selection)
            docs = [normalize_text(r.text) for r in selection.records]
            try:
                model = fit_tfidf(docs, kind, cfg.vocab_size)
            except EmptyCorpus as e:
                log_warning(MODULE, f"EmptyCorpus for {kind} notes ({e.reason}); no TF-IDF block")
            else:
                basis = fit_reduced_basis(tfidf_matrix(model, docs), "svd", cfg.svd_target)
                scores = project(basis, tfidf_matrix(model, docs))
                tfidf[kind] = model
                bases[f"{kind}_tfidf"] = basis
                blocks.append(TextBlock(kind, TFIDF_PREFIX[kind], tuple(selection.hadm_ids), scores))
        if kind in embeddings:
            ids, values = embeddings[kind]
            if len(ids) < 2:
                log_warning(MODULE, f"{kind} embeddings: {len(ids)} rows, no PCA block")
                continue
            basis = fit_reduced_basis(values, "pca", cfg.pca_target)
            bases[f"{kind}_embedding"] = basis
            blocks.append(TextBlock(kind, EMBEDDING_PREFIX[kind], tuple(ids), project(basis, values)))
    frame = apply_text_block(cohort.select(["hadm_id"]), blocks)
    return TextArtifacts(frame, tfidf, bases, tuple(coverage_report(selections, cohort)))


def text_columns(frame: PatientFrame) -> list[str]:
    prefixes = tuple(TFIDF_PREFIX.values()) + tuple(EMBEDDING_PREFIX.values())
    return [c for c in frame.columns if c.startswith(prefixes) or c in INDICATOR.values()]


# === Basis files ===
def save_basis(basis: ReducedBasis, path) -> None:
    """One row per component: kind, explained ratio, weights; a `center` row for pca."""
    width = basis.components.shape[1]
    df = pd.DataFrame(basis.components, columns=[f"w{i}" for i in range(width)])
    df.insert(0, "explained_ratio", basis.explained_ratio)
    df.insert(0, "row", [f"component_{i}" for i in range(basis.retained)])
    if basis.center is not None:
        center = pd.DataFrame([basis.center], columns=df.columns[2:])
        center.insert(0, "explained_ratio", np.nan)
        center.insert(0, "row", "center")
        df = pd.concat([df, center], ignore_index=True)
    df.insert(0, "kind", basis.kind)
    write_table(df, path, float_format="%.17g")


def load_basis(path, stage: str = "text") -> ReducedBasis:
    df = read_table(path, stage)
    try:
        kind = str(df["kind"].iloc[0])
        weights = df.drop(columns=["kind", "row", "explained_ratio"])
        is_center = (df["row"] == "center").to_numpy()
        components = weights[~is_center].to_numpy(dtype=float)
        ratio = df.loc[~is_center, "explained_ratio"].to_numpy(dtype=float)
        center = weights[is_center].to_numpy(dtype=float)[0] if is_center.any() else None
    except (KeyError, IndexError, ValueError) as e:
        raise IoFailure(str(path), f"malformed basis file: {e}") from e
    return ReducedBasis(kind, components, ratio, center)
