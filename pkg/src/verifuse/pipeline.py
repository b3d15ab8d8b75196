"""Pipeline stages behind the ``verifuse`` subcommands.

Every stage reads its inputs from ``cfg.output_dir``, writes its artifacts
there and finishes with a ``<stage>.json`` stamp recording the config hash and
the sha256 of each artifact it produced.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from .config import RunConfig
from .encoders import (
    EncoderSpec,
    EncoderUnavailable,
    FeatureCacheError,
    ImageEncoder,
    TextEncoder,
    cache_features,
    encode_image_batch,
    encode_text_batch,
    load_features,
)
from .fusion import LateFusionModel, build_model, load_arch, load_model, predict_label, save_model
from .ingest import (
    ManifestError,
    SplitManifest,
    cached_image_path,
    clean_dataset,
    fetch_all,
    load_manifest,
    read_corpus,
    split_dataset,
    write_corpus,
)
from .metrics import evaluate_probabilities, sweep_csv, weight_sweep
from .plots import plot_history, plot_roc
from .preprocess import ScalerState, apply_scaler, fit_scaler, prepare_image
from .tokenization import MAX_LEN, TOKENIZER_MODE, Vocabulary, tokenize_text
from .training import FeatureSet, train

logger = logging.getLogger(__name__)

EXIT_PREREQUISITE = 2
EXIT_CONFIG = 3
ENCODE_CHUNK = 32


class StageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _missing(path: Path, stage: str) -> StageError:
    return StageError(EXIT_PREREQUISITE, f"{path} not found; run `verifuse {stage}` first")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise _missing(path, stage)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def _write_json(path: Path, obj) -> Path:
    path.write_text(_dump(obj), encoding="utf-8")
    return path


def _stamp(cfg: RunConfig, stage: str, artifacts: list[Path], extra: dict | None = None) -> dict:
    files = {}
    for p in artifacts:
        for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
            if f.is_file():
                files[f.relative_to(cfg.out).as_posix()] = _sha256(f)
    stamp = {"stage": stage, "config_hash": cfg.hash, "artifacts": files, **(extra or {})}
    _write_json(cfg.out / f"{stage}.json", stamp)
    return stamp


# --- paths ---------------------------------------------------------------------------


def corpus_path(cfg):
    return cfg.out / "corpus.jsonl"


def splits_path(cfg):
    return cfg.out / "splits.json"


def vocab_path(cfg):
    return cfg.out / "vocab.txt"


def feature_path(cfg, modality):
    return cfg.out / "features" / f"{modality}.bin"


def scaler_path(cfg, modality):
    return cfg.out / f"scaler_{modality}.json"


def model_dir(cfg):
    return cfg.out / "model"


def history_path(cfg):
    return cfg.out / "history.json"


# --- encoders -------------------------------------------------------------------------


def text_spec(cfg: RunConfig, vocab_size: int = 0) -> EncoderSpec:
    return EncoderSpec(
        "text", cfg.text_encoder, out_dim=cfg.text_dim, seed=cfg.seed,
        vocab_size=vocab_size if cfg.text_encoder == "stub_text" else 0,
        checkpoint=cfg.text_checkpoint,
    )


def image_spec(cfg: RunConfig) -> EncoderSpec:
    return EncoderSpec("image", cfg.image_encoder, out_dim=cfg.image_dim, seed=cfg.seed,
                       checkpoint=cfg.image_checkpoint)


def _specs(cfg: RunConfig, vocab_size: int) -> tuple[EncoderSpec, EncoderSpec]:
    try:
        return text_spec(cfg, vocab_size), image_spec(cfg)
    except ValueError as exc:
        raise StageError(EXIT_CONFIG, str(exc)) from None


def _load_vocab(cfg: RunConfig) -> Vocabulary | None:
    if cfg.text_encoder != "stub_text":
        return None
    return Vocabulary.from_file(_require(vocab_path(cfg), "extract"))


def _text_encoder(spec: EncoderSpec) -> TextEncoder:
    try:
        return TextEncoder(spec)
    except EncoderUnavailable as exc:
        raise StageError(EXIT_PREREQUISITE, str(exc)) from None


def _image_encoder(spec: EncoderSpec) -> ImageEncoder:
    try:
        return ImageEncoder(spec)
    except EncoderUnavailable as exc:
        raise StageError(EXIT_PREREQUISITE, str(exc)) from None


def _max_len(cfg: RunConfig) -> int:
    return cfg.max_len or MAX_LEN[cfg.dataset]


# --- ingest ----------------------------------------------------------------------------


def run_ingest(cfg: RunConfig) -> dict:
    if not cfg.manifest:
        raise StageError(EXIT_CONFIG, "no manifest given; pass --manifest <csv>")
    manifest = Path(cfg.manifest)
    if not manifest.is_file():
        raise StageError(EXIT_CONFIG, f"manifest {manifest} does not exist")
    try:
        raw = load_manifest(manifest, cfg.dataset)
    except ManifestError as exc:
        raise StageError(EXIT_CONFIG, str(exc)) from None
    cfg.out.mkdir(parents=True, exist_ok=True)
    failed = fetch_all(
        raw, cfg.cache, base_dir=manifest.parent, workers=cfg.fetch_workers,
        timeout_s=cfg.fetch_timeout, retries=cfg.fetch_retries,
    )
    records = clean_dataset(raw, failed)
    try:
        splits = split_dataset(records, cfg.seed)
    except ValueError as exc:
        raise StageError(EXIT_CONFIG, f"cannot split {manifest}: {exc}") from None
    write_corpus(records, corpus_path(cfg))
    splits_path(cfg).write_text(splits.to_json() + "\n", encoding="utf-8")
    counts = {
        "rows": len(raw),
        "defective": sum(1 for r in raw if r.defects),
        "fetch_failed": len(failed),
        "kept": len(records),
        "train": len(splits.train_ids),
        "val": len(splits.val_ids),
        "test": len(splits.test_ids),
    }
    logger.info("ingest: %s", counts)
    return _stamp(cfg, "ingest", [corpus_path(cfg), splits_path(cfg)], {"counts": counts})


def _load_corpus(cfg: RunConfig):
    records = read_corpus(_require(corpus_path(cfg), "ingest"))
    splits = SplitManifest.from_json(_require(splits_path(cfg), "ingest").read_text(encoding="utf-8"))
    return records, splits


# --- extract ---------------------------------------------------------------------------


def _load_image(cfg: RunConfig, record_id: str, spec: EncoderSpec) -> np.ndarray:
    path = cached_image_path(cfg.cache, record_id)
    if path is None:
        raise StageError(EXIT_PREREQUISITE, f"cached image for {record_id!r} is missing; run `verifuse ingest` first")
    return prepare_image(path.read_bytes(), value_range=spec.input_norm)


def run_extract(cfg: RunConfig) -> dict:
    records, splits = _load_corpus(cfg)
    by_id = {r.id: r for r in records}
    mode = TOKENIZER_MODE[cfg.dataset]
    vocab = None
    if cfg.text_encoder == "stub_text":
        vocab = Vocabulary.build([by_id[i].text for i in splits.train_ids], mode)
        vocab.save(vocab_path(cfg))
    t_spec, i_spec = _specs(cfg, len(vocab) if vocab else 0)
    t_enc, i_enc = _text_encoder(t_spec), _image_encoder(i_spec)
    tok_vocab = vocab if vocab is not None else t_enc.vocab
    ids = [r.id for r in records]
    max_len = _max_len(cfg)

    text_feats, image_feats = [], []
    for start in range(0, len(ids), ENCODE_CHUNK):
        chunk = ids[start : start + ENCODE_CHUNK]
        toks = [tokenize_text(by_id[i].text, max_len, mode, tok_vocab) for i in chunk]
        text_feats += encode_text_batch(t_enc, toks, chunk)
        image_feats += encode_image_batch(i_enc, [_load_image(cfg, i, i_spec) for i in chunk], chunk)
    (cfg.out / "features").mkdir(parents=True, exist_ok=True)
    cache_features(text_feats, feature_path(cfg, "text"))
    cache_features(image_feats, feature_path(cfg, "image"))

    train_rows = set(splits.train_ids)
    for modality, feats in (("text", text_feats), ("image", image_feats)):
        fit_scaler(np.stack([f.values for f in feats if f.record_id in train_rows])).save(scaler_path(cfg, modality))
    artifacts = [feature_path(cfg, "text"), feature_path(cfg, "image"), scaler_path(cfg, "text"),
                 scaler_path(cfg, "image")]
    if vocab is not None:
        artifacts.insert(0, vocab_path(cfg))
    logger.info("extract: %d records, text dim %d, image dim %d", len(ids), t_spec.out_dim, i_spec.out_dim)
    return _stamp(cfg, "extract", artifacts, {
        "fingerprints": {"text": t_spec.fingerprint, "image": i_spec.fingerprint},
        "max_len": max_len,
    })


# --- feature loading ---------------------------------------------------------------------


def _scaled_features(cfg: RunConfig) -> tuple[dict, dict, dict]:
    """``(text, image, labels)`` dicts keyed by record id, scaled with the train-fit scalers."""
    records, splits = _load_corpus(cfg)
    vocab = _load_vocab(cfg)
    t_spec, i_spec = _specs(cfg, len(vocab) if vocab else 0)
    out = []
    for modality, spec in (("text", t_spec), ("image", i_spec)):
        path = _require(feature_path(cfg, modality), "extract")
        try:
            feats = load_features(path, fingerprint=spec.fingerprint, dim=spec.out_dim)
        except FeatureCacheError as exc:
            raise StageError(EXIT_PREREQUISITE, f"{exc}; run `verifuse extract` first") from None
        state = ScalerState.load(_require(scaler_path(cfg, modality), "extract"))
        scaled = apply_scaler(state, np.stack([f.values for f in feats]))
        out.append({f.record_id: row for f, row in zip(feats, scaled)})
    labels = {r.id: r.y for r in records}
    missing = [i for i in labels if i not in out[0] or i not in out[1]]
    if missing:
        raise StageError(EXIT_PREREQUISITE, f"features missing for {len(missing)} records; run `verifuse extract` first")
    return out[0], out[1], {"labels": labels, "splits": splits}


def _feature_set(text: dict, image: dict, labels: dict, ids) -> FeatureSet:
    ids = list(ids)
    return FeatureSet(
        np.stack([text[i] for i in ids]),
        np.stack([image[i] for i in ids]),
        np.array([labels[i] for i in ids], dtype=np.int64),
        ids,
    )


def _split_sets(cfg: RunConfig) -> dict[str, FeatureSet]:
    text, image, meta = _scaled_features(cfg)
    splits = meta["splits"]
    return {s: _feature_set(text, image, meta["labels"], splits.ids(s)) for s in ("train", "val", "test")}


# --- train ---------------------------------------------------------------------------------


def run_train(cfg: RunConfig) -> dict:
    sets = _split_sets(cfg)
    tr = sets["train"]
    model = build_model(cfg.fusion, tr.text.shape[1], tr.image.shape[1], cfg.dropout, cfg.weights, cfg.seed)
    model, history = train(model, tr, sets["val"], cfg.train_config())
    if model_dir(cfg).exists():
        shutil.rmtree(model_dir(cfg))
    save_model(model, model_dir(cfg), extra={"config_hash": cfg.hash})
    _write_json(history_path(cfg), {
        "config_hash": cfg.hash,
        "fusion": cfg.fusion,
        "streams": {name: h.to_dict() for name, h in history.items()},
    })
    final = {name: h.val_acc[-1] for name, h in history.items() if h.val_acc}
    logger.info("train: final validation accuracy %s", final)
    return _stamp(cfg, "train", [model_dir(cfg), history_path(cfg)], {"final_val_acc": final})


def _load_model(cfg: RunConfig):
    _require(model_dir(cfg) / "arch.json", "train")
    model = load_model(model_dir(cfg))
    if isinstance(model, LateFusionModel):
        model.set_weights(*cfg.weights)
    return model


def _check_dims(model, fs: FeatureSet) -> None:
    if (model.text_dim, model.image_dim) != (fs.text.shape[1], fs.image.shape[1]):
        raise StageError(
            EXIT_CONFIG,
            f"checkpoint expects {model.text_dim}/{model.image_dim}-d features but the cache holds "
            f"{fs.text.shape[1]}/{fs.image.shape[1]}; rerun `verifuse train`",
        )


# --- evaluate ---------------------------------------------------------------------------------


def run_evaluate(cfg: RunConfig) -> dict:
    model = _load_model(cfg)
    history = json.loads(_require(history_path(cfg), "train").read_text(encoding="utf-8"))
    sets = _split_sets(cfg)
    _check_dims(model, sets["test"])
    result = {"config_hash": cfg.hash, "fusion": model.kind, "splits": {}}
    if isinstance(model, LateFusionModel):
        result["weights"] = list(model.weights)
    for split, key in (("test", "test"), ("val", "validation")):
        fs = sets[split]
        report = evaluate_probabilities(model.predict_proba(fs.text, fs.image), fs.y)
        entry = {"n": report.n, model.kind: report.to_dict()}
        if isinstance(model, LateFusionModel):
            p_text, p_image = model.stream_proba(fs.text, fs.image)
            entry["text"] = evaluate_probabilities(p_text, fs.y).to_dict()
            entry["image"] = evaluate_probabilities(p_image, fs.y).to_dict()
        result["splits"][key] = entry
    _write_json(cfg.out / "metrics.json", result)

    test_entry = result["splits"]["test"]
    rocs = {k: (v["roc_points"], v["auc"]) for k, v in test_entry.items() if isinstance(v, dict) and v["roc_points"]}
    plots = [
        plot_history(history["streams"], "acc", cfg.out / "acc_epoch.png", cfg.hash),
        plot_history(history["streams"], "loss", cfg.out / "loss_epoch.png", cfg.hash),
        plot_roc(rocs, cfg.out / "roc.png", cfg.hash),
    ]
    test = test_entry[model.kind]
    logger.info("evaluate: test accuracy %.4f, f1 %.4f", test["accuracy"], test["f1"])
    return _stamp(cfg, "evaluate", [cfg.out / "metrics.json", *plots])


# --- sweep -------------------------------------------------------------------------------------


def run_sweep(cfg: RunConfig) -> dict:
    arch = load_arch(_require(model_dir(cfg) / "arch.json", "train").parent)
    if arch["fusion"] != "late":
        raise StageError(EXIT_CONFIG, "the weight sweep needs a late-fusion checkpoint; retrain with --fusion late")
    model = _load_model(cfg)
    test = _split_sets(cfg)["test"]
    _check_dims(model, test)
    rows = weight_sweep(model, test.text, test.image, test.y, cfg.sweep_weights)
    (cfg.out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
    _write_json(cfg.out / "sweep.json", {
        "config_hash": cfg.hash,
        "split": "test",
        "rows": [{"fusion": r.fusion, "w1": r.w1, "w2": r.w2, **r.metrics.to_dict()} for r in rows],
    })
    for r in rows:
        logger.info("sweep: (%.2f, %.2f) accuracy %.4f", r.w1, r.w2, r.metrics.accuracy)
    return _stamp(cfg, "sweep", [cfg.out / "sweep.csv", cfg.out / "sweep.json"])


# --- predict -------------------------------------------------------------------------------------


def run_predict(cfg: RunConfig, text: str, image_path: str) -> dict:
    model = _load_model(cfg)
    vocab = _load_vocab(cfg)
    t_spec, i_spec = _specs(cfg, len(vocab) if vocab else 0)
    if (model.text_dim, model.image_dim) != (t_spec.out_dim, i_spec.out_dim):
        raise StageError(EXIT_CONFIG, "encoder dims in the config do not match the checkpoint")
    image_file = Path(image_path)
    if not image_file.is_file():
        raise StageError(EXIT_CONFIG, f"image {image_file} does not exist")
    t_enc, i_enc = _text_encoder(t_spec), _image_encoder(i_spec)
    toks = tokenize_text(text, _max_len(cfg), TOKENIZER_MODE[cfg.dataset], vocab if vocab else t_enc.vocab)
    try:
        img = prepare_image(image_file.read_bytes(), value_range=i_spec.input_norm)
    except OSError as exc:
        raise StageError(EXIT_CONFIG, f"cannot decode {image_file}: {exc}") from None
    t = apply_scaler(ScalerState.load(_require(scaler_path(cfg, "text"), "extract")), t_enc.encode([toks])[0])
    v = apply_scaler(ScalerState.load(_require(scaler_path(cfg, "image"), "extract")), i_enc.encode([img])[0])
    p = model.predict_proba(t, v)
    label = predict_label(p)
    return {
        "p_fake": float(p[0]),
        "p_real": float(p[1]),
        "label": "fake" if label == 1 else "real",
        "fusion": model.kind,
        "config_hash": cfg.hash,
    }


STAGES = {
    "ingest": run_ingest,
    "extract": run_extract,
    "train": run_train,
    "evaluate": run_evaluate,
    "sweep": run_sweep,
}
