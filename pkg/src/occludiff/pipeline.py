"""End-to-end stages shared by the command line and the test harness.

Every piece of randomness is drawn from a generator seeded by hashing the
root seed together with a stage name, so each stage is independently
reproducible.  The stage names in use:

- "dataset", "train-denoiser", "train-embedder", "train-gate"
- "gate-train/select" (which gallery images feed gate training)
- "{phase}/mask/probe-{i}" and "{phase}/repaint/probe-{i}/expert-{k}"
  with phase in {"gate-train", "eval"} and k starting at 1
- "eval/pairs" (verification trial sampling)

Expert k's stream depends only on (root seed, phase, probe, k), so bundles
built with n experts are exact prefixes of bundles built with more.
"""

import os
import time
from dataclasses import dataclass

import numpy as np

from .config import config_lines, validate_config
from .datasynth import (
    Dataset,
    OcclusionSpec,
    load_container,
    make_mask,
    occlude,
    save_container,
    split,
    generate_dataset,
    write_png,
)
from .diffusion import DenoiserModel, make_schedule, train_denoiser
from .gate import ExpertBundle, load_gate, mixture_batch, save_gate, train_gate
from .manifest import add_artifact, load_or_new_manifest, record_stage, save_manifest
from .nncore import assign_params, derive_seed, load_checkpoint, make_rng, save_checkpoint
from .recognition import (
    EmbedderModel,
    EvalReport,
    REPORT_HEADER,
    build_gallery,
    build_verification_pairs,
    eer_and_acc,
    l2_normalize,
    report_csv_row,
    similarity,
    topk_accuracy,
    train_embedder,
)
from .repaint import repaint_batch

METHODS = ("baseline", "baseline_rf", "mode")

# artifact file names inside an output directory
F_CONFIG = "config.cfg"
F_DATASET = "dataset.mode"
F_GALLERY = "gallery.mode"
F_PROBE = "probe.mode"
F_DENOISER = "denoiser.modw"
F_EMBEDDER = "embedder.modw"
F_GATE = "gate.modw"
F_MASKS = "masks.mode"
F_OCCLUDED = "occluded.mode"
F_REPORT = "report.csv"
F_SWEEP_EXPERTS = "sweep_experts.csv"
F_SWEEP_OCCLUSIONS = "sweep_occlusions.csv"


class MissingArtifactError(FileNotFoundError):
    """A stage prerequisite is absent; the message names the file."""


@dataclass
class Session:
    """In-memory run state: corpus, splits, schedule, trained models, and
    the enrolled gallery."""

    cfg: object
    sched: object
    dataset: Dataset
    gallery_ds: Dataset
    probe_ds: Dataset
    denoiser: object = None
    embedder: object = None
    gallery: object = None
    denoiser_log: object = None
    embedder_log: object = None


def new_denoiser(cfg, seed):
    shape = (cfg.data.height, cfg.data.width, 1)
    return DenoiserModel(shape, cfg.schedule.T, channels=cfg.model.denoiser_channels,
                         temb_dim=cfg.model.temb_dim, seed=seed)


def new_embedder(cfg, seed):
    shape = (cfg.data.height, cfg.data.width, 1)
    return EmbedderModel(shape, cfg.data.n_identities, embed_dim=cfg.model.embed_dim,
                         seed=seed)


def build_session(cfg, train_models=True):
    """Generate the corpus, split it, and (optionally) train the denoiser
    and embedder and enroll the gallery."""
    validate_config(cfg)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    dataset = generate_dataset(cfg.data.n_identities, cfg.data.images_per_identity,
                               cfg.data.height, cfg.data.width,
                               derive_seed(cfg.seed, "dataset"),
                               variation=cfg.data.variation)
    gallery_ds, probe_ds = split(dataset, cfg.data.gallery_fraction, cfg.seed)
    sess = Session(cfg=cfg, sched=sched, dataset=dataset,
                   gallery_ds=gallery_ds, probe_ds=probe_ds)
    if train_models:
        tc = cfg.train_denoiser
        sess.denoiser, sess.denoiser_log = train_denoiser(
            gallery_ds.images, sched, tc.epochs, tc.batch_size, tc.lr,
            derive_seed(cfg.seed, "train-denoiser"),
            model=new_denoiser(cfg, derive_seed(cfg.seed, "train-denoiser")))
        tc = cfg.train_embedder
        sess.embedder, sess.embedder_log = train_embedder(
            gallery_ds.images, gallery_ds.labels, cfg.data.n_identities,
            tc.epochs, tc.batch_size, tc.lr,
            derive_seed(cfg.seed, "train-embedder"),
            model=new_embedder(cfg, derive_seed(cfg.seed, "train-embedder")))
        enroll_gallery(sess)
    return sess


def enroll_gallery(sess):
    embs = sess.embedder.embed(sess.gallery_ds.images)
    sess.gallery = build_gallery(embs, sess.gallery_ds.labels)
    return sess.gallery


@dataclass
class Bundles:
    """Stacked per-probe evidence for one phase: occlusion masks, occluded
    inputs, repainted expert images, stream embeddings, and score rows."""

    labels: np.ndarray          # (P,)
    masks: np.ndarray           # (P, H, W)
    occluded: np.ndarray        # (P, H, W, C)
    repainted: np.ndarray       # (P, n, H, W, C)
    features: np.ndarray        # (P, n+1, d)
    rows: np.ndarray            # (P, n+1, M)

    @property
    def n_experts(self):
        return self.repainted.shape[1]

    def take_streams(self, n):
        """Prefix view with only the first n experts (plus stream 0)."""
        if not 0 <= n <= self.n_experts:
            raise ValueError(f"cannot take {n} experts from a {self.n_experts}-expert bundle")
        return Bundles(labels=self.labels, masks=self.masks, occluded=self.occluded,
                       repainted=self.repainted[:, :n],
                       features=self.features[:, : n + 1],
                       rows=self.rows[:, : n + 1])

    def expert_bundles(self):
        return [ExpertBundle(features=self.features[i], rows=self.rows[i])
                for i in range(self.features.shape[0])]


def _raw_repaint(sess, images, phase, n_experts=None, occlusion=None):
    """Masks, occluded inputs, and expert walks (no embedding/scoring yet)."""
    cfg = sess.cfg
    n = cfg.n_experts if n_experts is None else n_experts
    occ = occlusion if occlusion is not None else cfg.occlusion
    p, h, w, c = images.shape
    masks = np.empty((p, h, w), dtype=np.float32)
    for i in range(p):
        spec = OcclusionSpec(occ.kind, occ.severity,
                             seed=derive_seed(cfg.seed, f"{phase}/mask/probe-{i}"))
        masks[i] = make_mask(spec, h, w)
    occluded = np.stack([occlude(images[i], masks[i]) for i in range(p)])
    if n > 0:
        xs = np.repeat(occluded, n, axis=0)
        masks_flat = np.repeat(masks, n, axis=0)
        rngs = [
            make_rng(derive_seed(cfg.seed, f"{phase}/repaint/probe-{i}/expert-{k}"))
            for i in range(p)
            for k in range(1, n + 1)
        ]
        flat = repaint_batch(sess.denoiser, xs, masks_flat, rngs, sess.sched,
                             cfg.repaint.r, cfg.repaint.j)
        repainted = flat.reshape(p, n, h, w, c)
    else:
        repainted = np.empty((p, 0, h, w, c), dtype=np.float32)
    return masks, occluded, repainted


def build_bundles(sess, images, labels, phase, n_experts=None, occlusion=None):
    """Occlude each image, run n stochastic inpaintings, embed every stream,
    and score all streams against the gallery."""
    n = sess.cfg.n_experts if n_experts is None else n_experts
    masks, occluded, repainted = _raw_repaint(sess, images, phase,
                                              n_experts=n, occlusion=occlusion)
    p, h, w, c = occluded.shape
    feats0 = sess.embedder.embed(occluded)
    features = np.empty((p, n + 1, feats0.shape[1]), dtype=np.float32)
    features[:, 0] = feats0
    if n > 0:
        features[:, 1:] = sess.embedder.embed(
            repainted.reshape(p * n, h, w, c)
        ).reshape(p, n, -1)
    rows = similarity(features.reshape(p * (n + 1), -1), sess.gallery)
    rows = rows.reshape(p, n + 1, len(sess.gallery))
    return Bundles(labels=np.asarray(labels), masks=masks, occluded=occluded,
                   repainted=repainted, features=features, rows=rows)


def gallery_positions(gallery, labels):
    """Row index of each label in the gallery; missing labels are an error."""
    pos = np.searchsorted(gallery.labels, labels)
    bad = (pos >= len(gallery.labels)) | (gallery.labels[np.minimum(pos, len(gallery.labels) - 1)] != labels)
    if np.any(bad):
        missing = sorted(set(np.asarray(labels)[bad].tolist()))
        raise ValueError(f"probe labels not enrolled in gallery: {missing}")
    return pos


def gate_train_images(sess):
    """Deterministic per-identity subsample of the gallery split used to fit
    the gate (probes stay untouched for evaluation)."""
    cfg = sess.cfg
    rng = make_rng(derive_seed(cfg.seed, "gate-train/select"))
    per = cfg.eval.gate_probes_per_identity
    picks = []
    for lab in np.unique(sess.gallery_ds.labels):
        idx = np.flatnonzero(sess.gallery_ds.labels == lab)
        take = min(per, idx.size)
        picks.append(rng.permutation(idx)[:take])
    picks = np.concatenate(picks)
    return sess.gallery_ds.images[picks], sess.gallery_ds.labels[picks]


def train_session_gate(sess, bundles, n_experts=None):
    """Fit the gate on the given bundles (sliced to n_experts streams)."""
    cfg = sess.cfg
    n = cfg.n_experts if n_experts is None else n_experts
    b = bundles.take_streams(n)
    targets = gallery_positions(sess.gallery, b.labels)
    tc = cfg.train_gate
    params, log = train_gate(
        b.expert_bundles(), targets,
        kind=cfg.gate.kind, k=min(cfg.gate.k, n + 1) if cfg.gate.kind == "noisy_topk" else None,
        epochs=tc.epochs, batch_size=tc.batch_size, lr=tc.lr,
        seed=derive_seed(cfg.seed, "train-gate"),
        logit_scale=cfg.gate.logit_scale)
    return params, log


def fuse_rows(method, bundles, gate_params=None):
    """(P, M) fused score matrix for one method on (already sliced) bundles."""
    if method == "baseline":
        return bundles.rows[:, 0, :]
    if method == "baseline_rf":
        return bundles.rows.mean(axis=1)
    if method == "mode":
        if gate_params is None:
            raise ValueError("method 'mode' needs trained gate parameters")
        return mixture_batch(gate_params, bundles.features, bundles.rows)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_rows(sess, fused, labels):
    """EvalReport for one fused score matrix."""
    cfg = sess.cfg
    gallery = sess.gallery
    top1 = topk_accuracy(fused, labels, gallery.labels, 1)
    top5 = topk_accuracy(fused, labels, gallery.labels, min(5, len(gallery)))
    rng = make_rng(derive_seed(cfg.seed, "eval/pairs"))
    ia, ib, genuine = build_verification_pairs(labels, rng, cfg.eval.pairs)
    unit = l2_normalize(np.asarray(fused, dtype=np.float64))
    scores = np.sum(unit[ia] * unit[ib], axis=1)
    eer, acc, _ = eer_and_acc(scores[genuine], scores[~genuine])
    return EvalReport(top1=top1, top5=top5, eer=eer, acc=acc,
                      probes=int(len(labels)), gallery_size=int(len(gallery)))


def evaluate_methods(sess, bundles, methods, gate_params=None, n_experts=None):
    """Reports for several methods on shared bundles; returns
    {method: EvalReport}."""
    n = sess.cfg.n_experts if n_experts is None else n_experts
    b = bundles.take_streams(n)
    out = {}
    for method in methods:
        fused = fuse_rows(method, b, gate_params)
        out[method] = evaluate_rows(sess, fused, b.labels)
    return out


def write_report_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")


def write_loss_csv(path, log):
    log.write_csv(path)


# ---------------------------------------------------------------------------
# disk-backed stages (the CLI surface)


def _write_config_snapshot(cfg, out_dir):
    path = os.path.join(out_dir, F_CONFIG)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(config_lines(cfg)) + "\n")
    return path


def _require(out_dir, fname, hint):
    path = os.path.join(out_dir, fname)
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {path}; run `{hint}` first")
    return path


def _finish_stage(cfg, out_dir, stage, t0, artifacts):
    man = load_or_new_manifest(out_dir, config_lines(cfg))
    for name, path, kind in artifacts:
        add_artifact(man, name, path, kind, out_dir)
    record_stage(man, stage, time.perf_counter() - t0)
    save_manifest(out_dir, man)


def stage_gen_data(cfg, out_dir):
    """Write the corpus and its gallery/probe splits as containers."""
    validate_config(cfg)
    t0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    dataset = generate_dataset(cfg.data.n_identities, cfg.data.images_per_identity,
                               cfg.data.height, cfg.data.width,
                               derive_seed(cfg.seed, "dataset"),
                               variation=cfg.data.variation)
    gallery_ds, probe_ds = split(dataset, cfg.data.gallery_fraction, cfg.seed)
    paths = {}
    for fname, ds in ((F_DATASET, dataset), (F_GALLERY, gallery_ds), (F_PROBE, probe_ds)):
        path = os.path.join(out_dir, fname)
        save_container(path, ds)
        paths[fname] = path
    cfg_path = _write_config_snapshot(cfg, out_dir)
    _finish_stage(cfg, out_dir, "gen-data", t0, [
        ("dataset", paths[F_DATASET], "container"),
        ("gallery", paths[F_GALLERY], "container"),
        ("probe", paths[F_PROBE], "container"),
        ("config", cfg_path, "config"),
    ])
    return paths


def _load_split(cfg, out_dir):
    gal = load_container(_require(out_dir, F_GALLERY, "occludiff gen-data"))
    probe = load_container(_require(out_dir, F_PROBE, "occludiff gen-data"))
    expect = (cfg.data.height, cfg.data.width, 1)
    if gal.image_shape != expect or probe.image_shape != expect:
        raise ValueError(
            f"containers in {out_dir} hold {gal.image_shape} images but the "
            f"config asks for {expect}; regenerate with gen-data"
        )
    return gal, probe


def stage_train_denoiser(cfg, out_dir):
    validate_config(cfg)
    t0 = time.perf_counter()
    gallery_ds, _ = _load_split(cfg, out_dir)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    seed = derive_seed(cfg.seed, "train-denoiser")
    tc = cfg.train_denoiser
    model, log = train_denoiser(gallery_ds.images, sched, tc.epochs, tc.batch_size,
                                tc.lr, seed, model=new_denoiser(cfg, seed))
    ck_path = os.path.join(out_dir, F_DENOISER)
    save_checkpoint(ck_path, model.params())
    loss_path = os.path.join(out_dir, "denoiser_loss.csv")
    write_loss_csv(loss_path, log)
    _finish_stage(cfg, out_dir, "train-denoiser", t0, [
        ("denoiser", ck_path, "checkpoint"),
        ("denoiser_loss", loss_path, "losslog"),
    ])
    return {"checkpoint": ck_path, "loss_log": loss_path}


def stage_train_embedder(cfg, out_dir):
    validate_config(cfg)
    t0 = time.perf_counter()
    gallery_ds, _ = _load_split(cfg, out_dir)
    seed = derive_seed(cfg.seed, "train-embedder")
    tc = cfg.train_embedder
    model, log = train_embedder(gallery_ds.images, gallery_ds.labels,
                                cfg.data.n_identities, tc.epochs, tc.batch_size,
                                tc.lr, seed, model=new_embedder(cfg, seed))
    ck_path = os.path.join(out_dir, F_EMBEDDER)
    save_checkpoint(ck_path, model.params())
    loss_path = os.path.join(out_dir, "embedder_loss.csv")
    write_loss_csv(loss_path, log)
    _finish_stage(cfg, out_dir, "train-embedder", t0, [
        ("embedder", ck_path, "checkpoint"),
        ("embedder_loss", loss_path, "losslog"),
    ])
    return {"checkpoint": ck_path, "loss_log": loss_path}


def load_denoiser(cfg, out_dir):
    path = _require(out_dir, F_DENOISER, "occludiff train-denoiser")
    model = new_denoiser(cfg, 0)
    assign_params(model.params(), load_checkpoint(path))
    return model


def load_embedder(cfg, out_dir):
    path = _require(out_dir, F_EMBEDDER, "occludiff train-embedder")
    model = new_embedder(cfg, 0)
    assign_params(model.params(), load_checkpoint(path))
    return model


def _restore_session(cfg, out_dir, need_denoiser=True, need_embedder=True):
    validate_config(cfg)
    gallery_ds, probe_ds = _load_split(cfg, out_dir)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    sess = Session(cfg=cfg, sched=sched, dataset=None,
                   gallery_ds=gallery_ds, probe_ds=probe_ds)
    if need_denoiser:
        sess.denoiser = load_denoiser(cfg, out_dir)
    if need_embedder:
        sess.embedder = load_embedder(cfg, out_dir)
        enroll_gallery(sess)
    return sess


def stage_train_gate(cfg, out_dir):
    t0 = time.perf_counter()
    sess = _restore_session(cfg, out_dir)
    images, labels = gate_train_images(sess)
    bundles = build_bundles(sess, images, labels, "gate-train")
    params, log = train_session_gate(sess, bundles)
    ck_path = os.path.join(out_dir, F_GATE)
    save_gate(ck_path, params)
    loss_path = os.path.join(out_dir, "gate_loss.csv")
    write_loss_csv(loss_path, log)
    _finish_stage(cfg, out_dir, "train-gate", t0, [
        ("gate", ck_path, "checkpoint"),
        ("gate_loss", loss_path, "losslog"),
    ])
    return {"checkpoint": ck_path, "loss_log": loss_path}


def stage_repaint(cfg, out_dir, png_count=0):
    """Occlude the probe split and write all repainted expert streams."""
    t0 = time.perf_counter()
    sess = _restore_session(cfg, out_dir, need_embedder=False)
    probe = sess.probe_ds
    masks, occluded, repainted = _raw_repaint(sess, probe.images, "eval")
    artifacts = []
    mask_path = os.path.join(out_dir, F_MASKS)
    save_container(mask_path, Dataset(masks[..., None], probe.labels))
    artifacts.append(("masks", mask_path, "container"))
    occ_path = os.path.join(out_dir, F_OCCLUDED)
    save_container(occ_path, Dataset(occluded, probe.labels))
    artifacts.append(("occluded", occ_path, "container"))
    for k in range(cfg.n_experts):
        path = os.path.join(out_dir, f"repainted_expert{k + 1}.mode")
        save_container(path, Dataset(repainted[:, k], probe.labels))
        artifacts.append((f"repainted_expert{k + 1}", path, "container"))
    for i in range(min(png_count, probe.images.shape[0])):
        write_png(os.path.join(out_dir, f"probe{i}_occluded.png"), occluded[i])
        for k in range(cfg.n_experts):
            write_png(os.path.join(out_dir, f"probe{i}_expert{k + 1}.png"),
                      repainted[i, k])
    _finish_stage(cfg, out_dir, "repaint", t0, artifacts)
    return {name: path for name, path, _ in artifacts}


def stage_eval(cfg, out_dir, methods):
    """Score the probe split and write one report row per method."""
    t0 = time.perf_counter()
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    sess = _restore_session(cfg, out_dir)
    gate_params = None
    if "mode" in methods:
        gate_path = _require(out_dir, F_GATE, "occludiff train-gate")
        gate_params = load_gate(gate_path, k=cfg.gate.k if cfg.gate.kind == "noisy_topk" else None)
    bundles = build_bundles(sess, sess.probe_ds.images, sess.probe_ds.labels, "eval")
    np.save(os.path.join(out_dir, "eval_features.npy"), bundles.features)
    np.save(os.path.join(out_dir, "eval_rows.npy"), bundles.rows)
    np.save(os.path.join(out_dir, "eval_labels.npy"), bundles.labels)
    reports = evaluate_methods(sess, bundles, methods, gate_params=gate_params)
    rows = [report_csv_row(m, cfg.n_experts, cfg.occlusion.kind, reports[m])
            for m in methods]
    report_path = os.path.join(out_dir, F_REPORT)
    write_report_csv(report_path, rows)
    _finish_stage(cfg, out_dir, "eval", t0, [("report", report_path, "report")])
    return {"report": report_path, "reports": reports}


def _session_for_seed(cfg, seed):
    import copy

    run_cfg = copy.deepcopy(cfg)
    run_cfg.seed = seed
    return build_session(run_cfg)


def stage_sweep_experts(cfg, out_dir, n_values, seeds):
    """One gate per (n, seed) on shared bundles; rows ordered by n then seed."""
    validate_config(cfg)
    if not n_values:
        raise ValueError("sweep-experts: empty n_values")
    if any(n < 0 for n in n_values):
        raise ValueError(f"sweep-experts: negative expert count in {n_values}")
    t0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    n_max = max(n_values)
    rows = []
    for seed in seeds:
        sess = _session_for_seed(cfg, seed)
        gt_images, gt_labels = gate_train_images(sess)
        train_bundles = build_bundles(sess, gt_images, gt_labels, "gate-train",
                                      n_experts=n_max)
        eval_bundles = build_bundles(sess, sess.probe_ds.images, sess.probe_ds.labels,
                                     "eval", n_experts=n_max)
        for n in n_values:
            params, _ = train_session_gate(sess, train_bundles, n_experts=n)
            reports = evaluate_methods(sess, eval_bundles, ["mode"],
                                       gate_params=params, n_experts=n)
            rows.append((n, seed, report_csv_row("mode", n, sess.cfg.occlusion.kind,
                                                 reports["mode"])))
    rows.sort(key=lambda t: (t[0], seeds.index(t[1])))
    path = os.path.join(out_dir, F_SWEEP_EXPERTS)
    write_report_csv(path, [r for _, _, r in rows])
    _finish_stage(cfg, out_dir, "sweep-experts", t0, [("sweep_experts", path, "report")])
    return {"report": path}


def stage_sweep_occlusions(cfg, out_dir, kinds, seeds):
    """All three methods per occlusion kind per seed at the config severity."""
    validate_config(cfg)
    if not kinds:
        raise ValueError("sweep-occlusions: empty kind list")
    t0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for seed in seeds:
        sess = _session_for_seed(cfg, seed)
        gt_images, gt_labels = gate_train_images(sess)
        for kind in kinds:
            occ = OcclusionSpec(kind, cfg.occlusion.severity)
            train_bundles = build_bundles(sess, gt_images, gt_labels,
                                          "gate-train", occlusion=occ)
            eval_bundles = build_bundles(sess, sess.probe_ds.images,
                                         sess.probe_ds.labels, "eval", occlusion=occ)
            params, _ = train_session_gate(sess, train_bundles)
            reports = evaluate_methods(sess, eval_bundles, METHODS, gate_params=params)
            for method in METHODS:
                rows.append(report_csv_row(method, cfg.n_experts, kind, reports[method]))
    path = os.path.join(out_dir, F_SWEEP_OCCLUSIONS)
    write_report_csv(path, rows)
    _finish_stage(cfg, out_dir, "sweep-occlusions", t0, [
        ("sweep_occlusions", path, "report")])
    return {"report": path}
