"""Training phases (text encoder, box predictors, GAN), evaluation and dataset synthesis.

Every phase reads a validated ``RunConfig`` and writes under ``config.out_dir``:

    textenc/<variant>/{log.csv, val_curve.csv, textenc.ndta}
    bbox/<depth>layer_<all|position>/{log.csv, curve.csv, bbox.ndta}
    gan/{log.csv, gan.ndta, samples/iter_NNNNN_<res>px.png}
    eval/{report.json, report.txt, boxes.json, generated.png}

All randomness derives from ``config.seed`` so a (config, seed) pair fixes
every CSV byte for byte. CSV rows hold no timings for that reason.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
import warnings
from pathlib import Path

import numpy as np

from . import bboxpred, damsm, data, disc, gen, metrics
from . import ndcore as nd
from .config import RunConfig
from .errors import ConfigError
from .imgenc import ImageEncoder, stack_boxsets
from .images import downsample, save_grid
from .textenc import TextEncoder, Vocab, parse

log = logging.getLogger("rpattn")

# fixed child-stream slots so adding a phase never shifts another phase's draws
_TEXT, _IMAGE, _BATCH, _GEN, _DISC, _NOISE, _BOX, _EVAL = range(8)


def streams(seed):
    return nd.RngStream(seed).spawn(8)


class CsvLog:
    def __init__(self, path, columns):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self.columns = list(columns)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)

    def row(self, **values):
        self._w.writerow([_fmt(values[c]) for c in self.columns])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints --

def save_checkpoint(path, modules, meta=None):
    tensors = {}
    for prefix, module in modules.items():
        for name, arr in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = arr
    nd.archive.save(path, tensors, meta or {})


def load_checkpoint(path, modules):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}")
    tensors, meta = nd.archive.load(path, with_meta=True)
    for prefix, module in modules.items():
        head = prefix + "."
        module.load_state_dict({k[len(head):]: v for k, v in tensors.items() if k.startswith(head)})
    return meta


# -- model builders --

def attention_config(cfg: RunConfig):
    return damsm.AttentionConfig(*cfg.gammas)


def build_encoders(cfg: RunConfig):
    s = streams(cfg.seed)
    m = cfg.model
    text = TextEncoder(Vocab.from_lexicon(), m.dim, m.emb_dim, s[_TEXT], phrase_mode=m.phrase_mode)
    image = ImageEncoder(m.dim, cfg.data.image_size, tuple(m.enc_channels), m.roi_size, s[_IMAGE])
    return text, image


def load_encoders(cfg: RunConfig):
    text, image = build_encoders(cfg)
    load_checkpoint(cfg.checkpoint("textenc"), {"text": text, "image": image})
    return text.freeze(), image.freeze()


def build_generator(cfg: RunConfig):
    m = cfg.model
    return gen.Generator(m.dim, m.z_dim, m.cond_dim, tuple(m.gen_channels), m.roi_size, m.base, streams(cfg.seed)[_GEN])


def build_discriminators(cfg: RunConfig):
    m, rng = cfg.model, streams(cfg.seed)[_DISC]
    return [disc.StageDiscriminator(r, m.dim, m.disc_width, m.cond_dim, rng) for r in m.resolutions]


def build_box_predictor(cfg: RunConfig, depth):
    rng = nd.RngStream(streams(cfg.seed)[_BOX].seed + depth)
    return bboxpred.BoxPredictor(cfg.model.dim, cfg.data.k_max, depth, cfg.bbox.hidden, rng)


def load_split(cfg: RunConfig, split):
    return data.load_dataset(cfg.data_dir / split, cfg.data.image_size, cfg.data.k_max)


def same_caption_mask(captions):
    caps = np.asarray(captions, dtype=object)
    return caps[:, None] == caps[None, :]


def _adam(params, cfg):
    return nd.Adam(params, lr=cfg.optim.lr, betas=tuple(cfg.optim.betas))


# -- synth --

def run_synth(cfg: RunConfig):
    sc = data.SynthConfig(size=cfg.data.image_size, k_max=cfg.data.k_max)
    out = {}
    for split, seed, n in (("train", cfg.data.train_seed, cfg.data.train_size),
                           ("val", cfg.data.val_seed, cfg.data.val_size)):
        ds = data.synth_generate(seed, n, sc)
        data.save_dataset(ds, cfg.data_dir / split)
        out[split] = data.dataset_fingerprint(ds)
        log.info("synth: wrote %d %s samples to %s", n, split, cfg.data_dir / split)
    return out


# -- text encoder --

def text_r_precision(text_enc, image_enc, ds, sentences, cfg: RunConfig, variant, R):
    """Image-to-caption R-precision on ``ds``; identical captions are not distractors."""
    with nd.no_grad():
        t = text_enc.encode(sentences)
        b, v = ds.boxes()
        f = image_enc(ds.images(), b, v)
    scores = damsm.similarity_matrix(t, f, attention_config(cfg), variant)
    exclude = same_caption_mask(ds.captions)
    R = min(R, int((~exclude).sum(axis=1).min()) + 1)   # small validation pools
    return metrics.r_precision(scores.T, np.arange(len(ds)), R=R, folds=cfg.eval.folds, seed=cfg.seed,
                               exclude=exclude)


def train_text_encoder(cfg: RunConfig, variant=None, train=None, val=None):
    """Jointly fit text and image encoders on the matching loss. Returns a summary dict."""
    variant = variant or cfg.variant
    comps = damsm.VARIANTS[variant]
    train = load_split(cfg, "train") if train is None else train
    val = load_split(cfg, "val") if val is None else val
    out = cfg.out_dir / "textenc" / variant
    text_enc, image_enc = build_encoders(cfg)
    opt = _adam(text_enc.parameters() + image_enc.parameters(), cfg)
    att = attention_config(cfg)
    sents = [parse(c) for c in train.captions]
    val_sents = [parse(c) for c in val.captions]
    R = min(cfg.eval.R)
    rng = streams(cfg.seed)[_BATCH]
    iters, m = cfg.iterations.textenc, cfg.batch_size
    r_mean = r_std = float("nan")
    t0 = time.perf_counter()
    with CsvLog(out / "log.csv", ["iteration", "loss"] + [f"L_{c}" for c in comps]) as lg, \
            CsvLog(out / "val_curve.csv", ["iteration", "r_precision", "r_precision_std"]) as curve:
        for it in range(iters):
            idx = rng.choice(len(train), m, replace=False)
            t = text_enc.encode([sents[i] for i in idx])
            b, v = train.boxes(idx)
            loss, parts = damsm.damsm_loss(t, image_enc(train.images(idx), b, v), att, variant)
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
            lg.row(iteration=it, loss=loss.item(), **{f"L_{c}": parts[c].item() for c in comps})
            if (it + 1) % cfg.eval_every == 0:
                r_mean, r_std = text_r_precision(text_enc, image_enc, val, val_sents, cfg, variant, R)
                curve.row(iteration=it + 1, r_precision=r_mean, r_precision_std=r_std)
                log.info("textenc[%s] it %d loss %.3f R@%d %.3f (%.0fs)", variant, it + 1, loss.item(), R,
                         r_mean, time.perf_counter() - t0)
    if iters % cfg.eval_every:
        r_mean, r_std = text_r_precision(text_enc, image_enc, val, val_sents, cfg, variant, R)
    meta = {"variant": variant, "iterations": iters, "seed": cfg.seed, "config": cfg.to_dict()}
    modules = {"text": text_enc, "image": image_enc}
    save_checkpoint(out / "textenc.ndta", modules, meta)
    if variant == cfg.variant:
        target = cfg.checkpoint("textenc")
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(out / "textenc.ndta", target)
    return {"variant": variant, "R": R, "r_precision": r_mean, "r_precision_std": r_std,
            "final_loss": loss.item() if iters else float("nan"), "dir": str(out)}


def run_textenc(cfg: RunConfig, variants=None):
    variants = variants or [cfg.variant]
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    results = [train_text_encoder(cfg, v, train, val) for v in variants]
    if len(results) > 1:
        rows = [("variant", f"R@{results[0]['R']}", "std", "final loss")]
        rows += [(r["variant"], f"{r['r_precision']:.4f}", f"{r['r_precision_std']:.4f}", f"{r['final_loss']:.3f}")
                 for r in results]
        _write_table(cfg.out_dir / "textenc" / "comparison.txt", rows)
        _write_json(cfg.out_dir / "textenc" / "comparison.json", results)
    return results


# -- box predictors --

def train_bbox(cfg: RunConfig):
    """The depth x {all, position-filtered} grid. Returns one summary dict per cell."""
    text_enc, _ = load_encoders(cfg)
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    sents = [parse(c) for c in train.captions]
    with nd.no_grad():
        feats = text_enc.encode(sents).sentence.data
        val_feats = text_enc.encode([parse(c) for c in val.captions]).sentence.data
    val_b, val_v = val.boxes()
    subsets = {"all": np.arange(len(train)),
               "position": np.array([i for i, s in enumerate(sents) if bboxpred.position_word_filter(s)], dtype=np.int64)}
    log.info("bbox: %d training sentences, %d with position words", len(subsets["all"]), len(subsets["position"]))
    results = []
    for depth in cfg.bbox.depths:
        for name, pool in subsets.items():
            if len(pool) == 0:
                raise ConfigError("bbox: no training sentence contains a position word")
            results.append(_train_bbox_cell(cfg, depth, name, pool, feats, train, val_feats, val_b, val_v))
    rows = [("cell", "sentences", "coord_loss", "count_loss")]
    rows += [(r["cell"], str(r["sentences"]), f"{r['coord_loss']:.5f}", f"{r['count_loss']:.5f}") for r in results]
    _write_table(cfg.out_dir / "bbox" / "summary.txt", rows)
    _write_json(cfg.out_dir / "bbox" / "summary.json", results)
    return results


def _train_bbox_cell(cfg, depth, name, pool, feats, train, val_feats, val_b, val_v):
    cell = f"{depth}layer_{name}"
    out = cfg.out_dir / "bbox" / cell
    net = build_box_predictor(cfg, depth)
    opt = _adam(net.parameters(), cfg)
    rng = nd.RngStream(streams(cfg.seed)[_BATCH].seed + depth * 2 + (name == "position"))
    m = min(cfg.batch_size, len(pool))
    coord = count = float("nan")

    def validate():
        with nd.no_grad():
            c, n = bboxpred.bbox_loss(net(val_feats), val_b, val_v)
        return c.item(), n.item()

    with CsvLog(out / "log.csv", ["iteration", "coord_loss", "count_loss"]) as lg, \
            CsvLog(out / "curve.csv", ["iteration", "coord_loss", "count_loss"]) as curve:
        for it in range(cfg.iterations.bbox):
            idx = pool[rng.choice(len(pool), m, replace=False)]
            b, v = train.boxes(idx)
            c, n = bboxpred.bbox_loss(net(feats[idx]), b, v)
            opt.zero_grad()
            nd.backward(c + n)
            opt.step()
            lg.row(iteration=it, coord_loss=c.item(), count_loss=n.item())
            if (it + 1) % cfg.eval_every == 0:
                coord, count = validate()
                curve.row(iteration=it + 1, coord_loss=coord, count_loss=count)
    if cfg.iterations.bbox % cfg.eval_every or cfg.iterations.bbox == 0:
        coord, count = validate()
    save_checkpoint(out / "bbox.ndta", {"bbox": net}, {"depth": depth, "subset": name, "sentences": len(pool)})
    if depth == cfg.bbox.keep_depth and name == "all":
        target = cfg.checkpoint("bbox")
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(out / "bbox.ndta", target)
    log.info("bbox[%s]: %d sentences, val coord %.5f count %.5f", cell, len(pool), coord, count)
    return {"cell": cell, "depth": depth, "subset": name, "sentences": int(len(pool)),
            "coord_loss": coord, "count_loss": count}


def load_box_predictor(cfg: RunConfig):
    _, meta = nd.archive.load(_require(cfg.checkpoint("bbox")), with_meta=True)
    net = build_box_predictor(cfg, int(meta.get("depth", cfg.bbox.keep_depth)))
    load_checkpoint(cfg.checkpoint("bbox"), {"bbox": net})
    return net.freeze()


def _require(path):
    if not Path(path).exists():
        raise ConfigError(f"missing checkpoint {path}")
    return path


# -- GAN --

def gan_step(cfg, G, Ds, opt_g, opt_d, image_enc, text, captions, real, boxes, valid, z):
    """One discriminator step then one generator step. Returns a dict of scalars."""
    m = len(captions)
    mis = disc.mismatch_indices(captions)
    _, fakes = G(text, z, boxes, valid)
    size = cfg.data.image_size
    false_text = text.sentence.data[mis]
    row, gaps, d_total = {}, [], None
    for D, fake in zip(Ds, fakes):
        res = D.resolution
        real_r = downsample(real, size // res)
        batch = disc.DiscBatch(disc.Triple(real_r, text.sentence, boxes, valid),
                               disc.Triple(fake, text.sentence, boxes, valid),
                               disc.Triple(real_r, nd.Tensor(false_text), boxes[mis], valid[mis]))
        d_loss, logits = disc.discriminator_loss(D, batch, return_logits=True)
        row[f"d_loss_{res}"] = d_loss.item()
        gaps += [logits["real", h].mean() - logits["fake", h].mean() for h in ("uncond", "text", "text_box")]
        d_total = d_loss if d_total is None else d_total + d_loss
    opt_d.zero_grad()
    nd.backward(d_total)
    opt_d.step()

    g_total = None
    for D, fake in zip(Ds, fakes):
        g_loss = disc.generator_adv_loss(D, disc.Triple(fake, text.sentence, boxes, valid))
        row[f"g_loss_{D.resolution}"] = g_loss.item()
        g_total = g_loss if g_total is None else g_total + g_loss
    if m >= 2 and cfg.lam > 0:
        matching, _ = damsm.damsm_loss(text, image_enc(fakes[-1], boxes, valid), attention_config(cfg), cfg.variant)
        row["matching"] = matching.item()
        g_total = g_total + matching * cfg.lam
    else:
        row["matching"] = 0.0
    opt_g.zero_grad()
    nd.backward(g_total)
    opt_g.step()
    row["gap"] = float(np.mean(gaps))
    return row


def train_gan(cfg: RunConfig, train=None):
    _require(cfg.checkpoint("textenc"))
    text_enc, image_enc = load_encoders(cfg)
    train = load_split(cfg, "train") if train is None else train
    captions = train.captions
    with nd.no_grad():
        encoded = text_enc.encode([parse(c) for c in captions]).detach()
    G, Ds = build_generator(cfg), build_discriminators(cfg)
    opt_g = _adam(G.parameters(), cfg)
    opt_d = _adam([p for D in Ds for p in D.parameters()], cfg)
    s = streams(cfg.seed)
    batch_rng, noise_rng = s[_BATCH], s[_NOISE]
    fixed_idx = np.arange(min(16, len(train)))
    fixed_z = G.sample_noise(s[_EVAL], len(fixed_idx))
    res = cfg.model.resolutions
    out = cfg.out_dir / "gan"
    columns = ["iteration"] + [f"d_loss_{r}" for r in res] + [f"g_loss_{r}" for r in res] + ["matching", "gap"]
    m = min(cfg.gan_batch_size, len(train))
    t0 = time.perf_counter()
    last = {}
    with CsvLog(out / "log.csv", columns) as lg:
        for it in range(cfg.iterations.gan):
            idx = batch_rng.choice(len(train), m, replace=False)
            b, v = train.boxes(idx)
            last = gan_step(cfg, G, Ds, opt_g, opt_d, image_enc, encoded.select(idx), [captions[i] for i in idx],
                            train.images(idx), b, v, G.sample_noise(noise_rng, m))
            lg.row(iteration=it, **last)
            done = it + 1
            if done % cfg.sample_every == 0 or done == cfg.iterations.gan:
                save_samples(G, encoded.select(fixed_idx), fixed_z, *train.boxes(fixed_idx), out / "samples", done)
                log.info("gan it %d d %.3f g %.3f gap %.3f (%.0fs)", done, sum(last[f"d_loss_{r}"] for r in res),
                         sum(last[f"g_loss_{r}"] for r in res), last["gap"], time.perf_counter() - t0)
    modules = {"gen": G}
    modules.update({f"disc{D.resolution}": D for D in Ds})
    save_checkpoint(cfg.checkpoint("gan"), modules, {"iterations": cfg.iterations.gan, "seed": cfg.seed})
    return last


def save_samples(G, text, z, boxes, valid, directory, iteration):
    with nd.no_grad():
        _, images = G(text, z, boxes, valid)
    paths = []
    for img in images:
        path = Path(directory) / f"iter_{iteration:05d}_{img.shape[-1]}px.png"
        save_grid(path, img.data)
        paths.append(path)
    return paths


def load_generator(cfg: RunConfig):
    G = build_generator(cfg)
    load_checkpoint(cfg.checkpoint("gan"), {"gen": G})
    return G.freeze()


# -- evaluation --

def predicted_layout(box_net, text):
    with nd.no_grad():
        pred = box_net(text.sentence)
    boxes, valid = stack_boxsets(pred.boxsets())
    return pred, boxes, valid


def evaluate(cfg: RunConfig, generator=None, classifier=None):
    """Generate from held-out captions and score them.

    ``generator(text, dataset) -> (images, boxes, valid)`` replaces the trained
    generator when given (e.g. an oracle returning the real images).
    """
    text_enc, image_enc = load_encoders(cfg)
    val = load_split(cfg, "val")
    out = cfg.out_dir / "eval"
    with nd.no_grad():
        text = text_enc.encode([parse(c) for c in val.captions])
    if generator is None:
        G, box_net = load_generator(cfg), load_box_predictor(cfg)
        pred, boxes, valid = predicted_layout(box_net, text)
        bboxpred.export_json(out / "boxes.json", pred)
        z = G.sample_noise(streams(cfg.seed)[_EVAL], len(val))
        with nd.no_grad():
            images = G(text, z, boxes, valid)[1][-1].data
    else:
        images, boxes, valid = generator(text, val)
    save_grid(out / "generated.png", images[:64])

    notes = []
    exclude = same_caption_mask(val.captions)
    admissible = int((~exclude).sum(axis=1).min())   # distractors available to the worst-off query
    att = attention_config(cfg)

    def scores_for(imgs, b, v):
        with nd.no_grad():
            feats = image_enc(imgs, b, v)
        return damsm.similarity_matrix(text, feats, att, cfg.variant).T

    gen_scores = scores_for(images, boxes, valid)
    real_scores = scores_for(val.images(), *val.boxes())
    rp = []
    for R in cfg.eval.R:
        use = R
        if admissible < R - 1:
            use = admissible + 1
            msg = f"held-out pool allows at most R={use}; R={R} downgraded"
            warnings.warn(msg)
            notes.append(msg)
        if use < 2:
            continue
        for label, sc in (("generated", gen_scores), ("real", real_scores)):
            mean, std = metrics.r_precision(sc, np.arange(len(val)), R=use, folds=cfg.eval.folds, seed=cfg.seed,
                                            exclude=exclude)
            rp.append(metrics.RPrecision(use, mean, std, cfg.eval.folds, label))

    classifier = classifier or metrics.load_shape_classifier()
    splits = min(cfg.eval.splits, len(val))
    mean, std = metrics.inception_score_images(images, classifier, splits)
    report = metrics.MetricsReport(rp, metrics.InceptionScore(mean, std, splits, len(classifier.classes)), len(val), notes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    return report


# -- shared output helpers --

def _write_table(path, rows):
    widths = [max(len(r[k]) for r in rows) for k in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths))) for r in rows]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def run_phase(cfg: RunConfig, variants=None):
    cfg.validate()
    if cfg.phase == "synth":
        return run_synth(cfg)
    if cfg.phase == "textenc":
        return run_textenc(cfg, variants)
    if cfg.phase == "bbox":
        return train_bbox(cfg)
    if cfg.phase == "gan":
        return train_gan(cfg)
    return evaluate(cfg)
