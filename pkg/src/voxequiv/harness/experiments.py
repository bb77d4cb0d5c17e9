"""The three experiment families: reconstruction, seeded generation, property prediction.

Each ``run_*`` function takes a resolved :class:`ExperimentConfig`, writes its
report files under ``experiment.output_dir`` and returns the
:class:`ReportBundle`. A failing stage leaves the partial outputs in place
plus a ``FAILED`` file naming the stage; the exception carries the stage name
in its ``stage`` attribute.
"""

from __future__ import annotations

import contextlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..denoisers import (EmpiricalBayesDenoiser, GroupAveragedDenoiser, IdentityDenoiser, NeuralDenoiser)
from ..equiv_metrics import (baseline_recon_error, equivariance_curve, equivariance_errors, latent_cosine_matrix,
                             mse_loss_decomposition)
from ..errors import SpecError
from ..genchem_metrics import (PropertyVector, canonical_form, evaluate_generated, infer_bonds, kl_samples,
                               molecular_properties, rank_agreement, shared_histograms)
from ..geom3 import cyclic_z_group, octahedral_group, rotate_array, rotate_points, z_rotations
from ..mol_io import Dataset, SyntheticSpec, gen_synthetic_dataset, read_manifest
from ..tinynet import NetConfig, TinyNet, TrainConfig, load_checkpoint, save_checkpoint
from ..training import predict_property, seed_streams, train_denoiser, train_property_head
from ..voxelizer import GridSpec, voxelize
from ..wjs_sampler import GenerationRun, SeedProtocol, WalkParams, seeded_generate
from .config import ExperimentConfig
from .reporting import ReportBundle, RunManifest, Table, mark_failed, sha256_json, write_report

log = logging.getLogger(__name__)

WORKERS_ENV = "VOXEQUIV_WORKERS"
AXIS_VECTORS = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise SpecError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def parallel_map(fn, items, workers=None) -> list:
    """Ordered map; uses a process pool when more than one worker is configured."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


@contextlib.contextmanager
def stage(name: str, out_dir, manifest: RunManifest):
    try:
        yield
    except Exception as exc:
        exc.stage = name
        mark_failed(out_dir, name, exc)
        manifest.add_stage(name, status="failed", error=str(exc))
        manifest.write(out_dir)
        raise
    manifest.add_stage(name, status="ok")


# ---------------------------------------------------------------- shared


def grid_spec(cfg: ExperimentConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(g.edge_voxels, g.resolution, tuple(g.channels), g.gaussian_width)


def load_dataset(cfg: ExperimentConfig) -> tuple:
    """``(train, held_out)`` datasets. Synthetic sets hold out the last ``holdout`` molecules."""
    d = cfg.dataset
    if d.source == "manifest":
        mols = list(read_manifest(d.path))
    else:
        spec = SyntheticSpec(n_molecules=d.n_molecules, atoms_min=d.atoms_min, atoms_max=d.atoms_max,
                             motif=d.motif, bond_length=d.bond_length, jitter=d.jitter,
                             elements=tuple(d.elements), min_distance=d.min_distance or None,
                             orientation=d.orientation)
        mols = list(gen_synthetic_dataset(spec, cfg.experiment.master_seed))
    k = min(d.holdout, len(mols) - 1)
    return Dataset(mols[:len(mols) - k]), Dataset(mols[len(mols) - k:])


def dataset_digest(ds) -> str:
    return sha256_json([[list(m.elements), np.asarray(m.positions).round(12).tolist()] for m in ds])


def _new_manifest(cfg: ExperimentConfig, train, held) -> RunManifest:
    return RunManifest(cfg.to_dict(), {"train_set": dataset_digest(train), "held_out": dataset_digest(held),
                                       "n_train": len(train), "n_held_out": len(held)})


def train_config(cfg: ExperimentConfig, **changes) -> TrainConfig:
    t = cfg.train
    base = dict(epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
                augment_rotations=t.augment_rotations, rotation_kind=t.rotation_kind,
                noise_sigma=t.noise_sigma, seed=cfg.experiment.master_seed)
    base.update(changes)
    return TrainConfig(**base)


def variants(cfg: ExperimentConfig) -> list:
    """``(label, settings)`` per ablation value."""
    e = cfg.experiment
    if e.ablation == "none":
        return [("default", {})]
    if e.ablation == "random_init":
        return [("trained", {}), ("random_init", {"untrained": True})]
    out = []
    for v in e.ablation_values:
        v = str(v)
        if e.ablation == "augmentation":
            if v not in ("on", "off", "random_init"):
                raise SpecError(f"augmentation values are on/off/random_init, got {v!r}")
            out.append((v, {"untrained": True} if v == "random_init" else {"augment": v == "on"}))
        elif e.ablation == "model_size":
            out.append((v, {"model_size": v}))
        elif e.ablation == "train_fraction":
            f = float(v)
            if not 0 < f <= 1:
                raise SpecError("train fractions must lie in (0, 1]")
            out.append((f"fraction_{f:g}", {"fraction": f}))
        elif e.ablation == "epochs":
            out.append((f"epochs_{int(v)}", {"epochs": int(v)}))
    return out


def build_net(cfg, train, settings, out_dir, label, manifest):
    """Train (or only initialise) one denoiser according to the variant settings."""
    spec = grid_spec(cfg)
    widths = cfg.widths(settings.get("model_size"))
    net_cfg = NetConfig(widths=widths, head_hidden=cfg.network.head_hidden, dropout=cfg.network.dropout)
    changes = {}
    if "augment" in settings:
        changes["augment_rotations"] = settings["augment"]
    if "epochs" in settings:
        changes["epochs"] = settings["epochs"]
    tc = train_config(cfg, **changes)
    subset = train
    info = {"widths": list(widths)}
    if "fraction" in settings:
        k = max(1, int(round(settings["fraction"] * len(train))))
        idx = np.sort(np.random.default_rng([cfg.experiment.master_seed, 17]).permutation(len(train))[:k])
        subset = Dataset([train[int(i)] for i in idx])
        info["subset_indices_sha256"] = sha256_json(idx.tolist())
        info["subset_size"] = k
    if settings.get("untrained"):
        net = TinyNet(net_cfg, rng=seed_streams(tc.seed)["init"])
        curve = []
    else:
        result = train_denoiser(subset, spec, net_cfg, tc)
        net, curve = result.net, result.curve
    ckpt_dir = Path(cfg.train.checkpoint_dir or Path(out_dir) / "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(net, ckpt_dir / f"{label}.vxnet", {"train": tc.to_dict(), "variant": label})
    info["checkpoint"] = str(path)
    manifest.add_stage(f"checkpoint:{label}", status="ok", **info)
    return net, curve, path


# ------------------------------------------------------- reconstruction


def run_reconstruction_experiment(cfg: ExperimentConfig) -> ReportBundle:
    out = Path(cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = grid_spec(cfg)
    train, held = load_dataset(cfg)
    manifest = _new_manifest(cfg, train, held)
    bundle = ReportBundle("reconstruction", manifest)
    sigma = cfg.train.noise_sigma
    seed = cfg.experiment.master_seed
    axes = [AXIS_VECTORS[a] for a in cfg.rotation.axes]
    summary = Table(["variant", "mean_eq4_octahedral", "baseline_recon_error", "decomp_total",
                     "decomp_prediction", "decomp_equivariance", "decomp_relative_residual",
                     "mean_offdiag_cosine", "noise_convention"])
    octa = octahedral_group()
    for label, settings in variants(cfg):
        with stage(f"train:{label}", out, manifest):
            net, curve, ckpt = build_net(cfg, train, settings, out, label, manifest)
            bundle.artifacts.append(ckpt)
        d = NeuralDenoiser(net)
        with stage(f"measure:{label}", out, manifest):
            tc = Table(["epoch", "loss"])
            for row in curve:
                tc.add(row["epoch"], row["loss"])
            bundle.tables[f"training_{label}"] = tc

            cur = equivariance_curve(d, held, cfg.rotation.angles, sigma, seed, spec, axes,
                                     cfg.rotation.noise_convention)
            t = Table(["axis", "angle", "mean", "std", "floor", "baseline", "noise"])
            for r in cur.rows:
                axis_name = next(k for k, v in AXIS_VECTORS.items() if tuple(v) == tuple(r["axis"]))
                t.add(axis_name, r["angle"], r["mean"], r["std"], r["floor"], cur.baseline, r["noise"])
                plot = bundle.plots.setdefault(f"curve_{label}_{axis_name}", Table(["angle", "mean", "baseline"]))
                plot.add(r["angle"], r["mean"], cur.baseline)
            bundle.tables[f"curve_{label}"] = t

            errs = equivariance_errors(d, held, octa, sigma, np.random.default_rng([seed, 1]), spec,
                                       cfg.rotation.noise_convention)
            baseline = baseline_recon_error(d, held, sigma, np.random.default_rng([seed, 2]), spec)

            sub = Dataset(list(held)[:cfg.rotation.decomposition_molecules])
            rep = mse_loss_decomposition(d, sub, octa, sigma, np.random.default_rng([seed, 3]), spec)
            td = Table(["molecule", "total", "prediction", "equivariance", "residual"])
            for r in rep.per_molecule:
                td.add(r["molecule"], r["total"], r["prediction"], r["equivariance"], r["residual"])
            bundle.tables[f"decomposition_{label}"] = td

            angles = list(cfg.rotation.cosine_angles)
            mats = [latent_cosine_matrix(d, m, angles, AXIS_VECTORS["z"], sigma,
                                         np.random.default_rng([seed, 4, i]), spec).matrix
                    for i, m in enumerate(held)]
            mean_mat = np.nanmean(np.stack(mats), axis=0)
            tcos = Table(["angle"] + [f"{a:g}" for a in angles])
            for a, row in zip(angles, mean_mat):
                tcos.add(a, *[float(v) for v in row])
            bundle.tables[f"cosine_{label}"] = tcos
            off = ~np.eye(len(angles), dtype=bool)
            summary.add(label, float(errs.mean()), baseline, rep.total_loss, rep.prediction_error,
                        rep.equivariance_error, rep.relative_residual, float(mean_mat[off].mean()),
                        cfg.rotation.noise_convention)
    bundle.tables["summary"] = summary
    bundle.summary = {"variants": summary.records(), "ablation": cfg.experiment.ablation}
    write_report(bundle, out)
    return bundle


# ----------------------------------------------------------- generation


def build_denoiser(cfg: ExperimentConfig, train, out_dir, manifest):
    dn = cfg.denoiser
    spec = grid_spec(cfg)

    def neural():
        if dn.checkpoint:
            return NeuralDenoiser(load_checkpoint(dn.checkpoint))
        net, _, _ = build_net(cfg, train, {}, out_dir, "denoiser", manifest)
        return NeuralDenoiser(net)

    def reference():
        ref = list(train)[:dn.reference_size]
        return EmpiricalBayesDenoiser.from_dataset(ref, spec, sigma=cfg.sampler.sigma,
                                                   max_reference=max(len(ref), 1))

    if dn.kind == "identity":
        return IdentityDenoiser()
    if dn.kind == "neural":
        return neural()
    if dn.kind == "empirical_bayes":
        return reference()
    base = neural() if dn.base == "neural" else reference()
    group = octahedral_group() if dn.group == "octahedral" else cyclic_z_group()
    return GroupAveragedDenoiser(base, group)


def _generate_one(job):
    d, mol, params, spec, master_seed, index, chains, matched = job
    proto = SeedProtocol(mol, z_rotations(), chains, matched)
    return seeded_generate(d, proto, params, spec, master_seed, index)


def property_table(mols) -> dict:
    props = [molecular_properties(m, infer_bonds(m)) for m in mols]
    return {name: np.array([p[name] for p in props], dtype=np.float64) for name in PropertyVector.NAMES}


def run_generation_experiment(cfg: ExperimentConfig) -> ReportBundle:
    out = Path(cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = grid_spec(cfg)
    train, held = load_dataset(cfg)
    manifest = _new_manifest(cfg, train, held)
    bundle = ReportBundle("generation", manifest)
    s = cfg.sampler
    params = WalkParams(s.gamma, s.u, s.dt, s.steps, s.save_every, s.sigma)
    with stage("denoiser", out, manifest):
        d = build_denoiser(cfg, train, out, manifest)
    seeds = list(held)[:s.n_seeds]
    with stage("sample", out, manifest):
        jobs = [(d, m, params, spec, cfg.experiment.master_seed, i, s.chains, s.matched_noise)
                for i, m in enumerate(seeds)]
        runs = parallel_map(_generate_one, jobs)
        generated = [g for r in runs for g in r.molecules]
        run = GenerationRun(generated, dict(runs[0].manifest, n_seeds=len(seeds)) if runs else {})
        p = run.write_jsonl(out / "generated.jsonl")
        bundle.artifacts += [p, Path(str(p) + ".manifest.json")]
    with stage("metrics", out, manifest):
        arms = {arm: [g.molecule for g in run.by_arm(arm)] for arm in ("rotated", "unrotated")}
        metrics = Table(["arm", "n", "n_empty", "atom_stable", "molecule_stable", "valid_proxy", "unique",
                         "atom_tv", "bond_tv", "valency_w1", "bond_angle_w1"])
        for arm, mols in arms.items():
            r = evaluate_generated(mols, reference=train)
            metrics.add(arm, r.n, r.n_empty, r.atom_stable, r.molecule_stable, r.valid, r.unique,
                        r.atom_tv, r.bond_tv, r.valency_w1, r.bond_angle_w1)
        bundle.tables["metrics"] = metrics
        present = {arm: [m for m in mols if m is not None] for arm, mols in arms.items()}
        kl = Table(["property", "kl_rotated_vs_unrotated"])
        props = {arm: property_table(ms) for arm, ms in present.items()}
        kls = {}
        for name in PropertyVector.NAMES:
            a, b = props["rotated"][name], props["unrotated"][name]
            kls[name] = kl_samples(a, b) if len(a) and len(b) else float("nan")
            kl.add(name, kls[name])
            if len(a) and len(b):
                ha, hb, edges = shared_histograms(a, b)
                centers = 0.5 * (edges[:-1] + edges[1:])
                plot = Table(["bin_center", "rotated", "unrotated"])
                for c, x, y in zip(centers, ha, hb):
                    plot.add(float(c), int(x), int(y))
                bundle.plots[f"hist_{name}"] = plot
        bundle.tables["kl"] = kl
        forms = {arm: sorted(repr(canonical_form(infer_bonds(m))) for m in ms) for arm, ms in present.items()}
        bundle.summary = {"n_per_arm": {a: len(m) for a, m in arms.items()}, "kl": kls,
                          "canonical_multisets_equal": forms["rotated"] == forms["unrotated"],
                          "denoiser": cfg.denoiser.kind, "metrics": metrics.records()}
    write_report(bundle, out)
    return bundle


# -------------------------------------------------------------- property


def property_labels(ds, name: str) -> np.ndarray:
    if name not in PropertyVector.NAMES:
        raise SpecError(f"unknown property {name!r}; choose from {PropertyVector.NAMES}")
    return np.array([molecular_properties(m)[name] for m in ds], dtype=np.float64)


def noisy_held_out(held, spec, sigma, seed, rotations):
    """Clean-plus-noise grids of each molecule and its rotated copies with the noise rotated alongside."""
    base, rotated = [], []
    for i, mol in enumerate(held):
        clean = voxelize(mol, spec).data
        eps = sigma * np.random.default_rng([seed, 5, i]).standard_normal(clean.shape)
        base.append(clean + eps)
        rotated.append([voxelize(rotate_points(r, mol), spec).data + rotate_array(eps, r) for r in rotations])
    return np.stack(base), rotated


def evaluate_predictor(predict, base, rotated, labels) -> dict:
    p0 = np.asarray(predict(base), dtype=np.float64)
    gt = rank_agreement(p0, labels)
    pr = np.concatenate([np.asarray(predict(np.stack(rs)), dtype=np.float64) for rs in rotated])
    ref = np.repeat(p0, len(rotated[0]))
    rot = rank_agreement(pr, ref)
    return {"spearman_gt": gt.spearman_rho, "mae_gt": gt.mae, "spearman_rot": rot.spearman_rho,
            "mae_rot": rot.mae}


def run_property_experiment(cfg: ExperimentConfig) -> ReportBundle:
    out = Path(cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = grid_spec(cfg)
    train, held = load_dataset(cfg)
    manifest = _new_manifest(cfg, train, held)
    bundle = ReportBundle("property", manifest)
    seed = cfg.experiment.master_seed
    name = cfg.property.name
    with stage("labels", out, manifest):
        y_train = property_labels(train, name)
        y_held = property_labels(held, name)
    rotations = z_rotations()[1:]
    sigma = cfg.train.noise_sigma
    base, rotated = noisy_held_out(held, spec, sigma, seed, rotations)
    net_cfg = NetConfig(widths=cfg.widths(), head="property", head_hidden=cfg.network.head_hidden,
                        dropout=cfg.network.dropout)
    table = Table(["model", "spearman_gt", "mae_gt", "spearman_rot", "mae_rot"])
    nets = {}
    for mode in cfg.property.modes:
        with stage(f"train:{mode}", out, manifest):
            res = train_property_head(train, y_train, mode, spec, net_cfg, train_config(cfg),
                                      recon_weight=cfg.train.recon_weight)
            nets[mode] = res.net
            ckpt = save_checkpoint(res.net, out / f"{mode}.vxnet", {"mode": mode})
            bundle.artifacts.append(ckpt)
        with stage(f"evaluate:{mode}", out, manifest):
            r = evaluate_predictor(lambda g, n=res.net: predict_property(n, g), base, rotated, y_held)
            table.add(mode, r["spearman_gt"], r["mae_gt"], r["spearman_rot"], r["mae_rot"])
    if nets:
        with stage("evaluate:invariant_control", out, manifest):
            mode = "enc_dec_denoise" if "enc_dec_denoise" in nets else next(iter(nets))
            inv = GroupAveragedDenoiser(NeuralDenoiser(nets[mode]), cyclic_z_group())
            r = evaluate_predictor(lambda g: [inv.predict_property(x) for x in g], base, rotated, y_held)
            table.add(f"invariant_control({mode})", r["spearman_gt"], r["mae_gt"], r["spearman_rot"], r["mae_rot"])
    if cfg.property.shuffle_control:
        with stage("train:shuffled_labels", out, manifest):
            shuffled = np.random.default_rng([seed, 6]).permutation(y_train)
            res = train_property_head(train, shuffled, "encoder_only", spec, net_cfg, train_config(cfg))
            r = evaluate_predictor(lambda g, n=res.net: predict_property(n, g), base, rotated, y_held)
            table.add("shuffled_labels", r["spearman_gt"], r["mae_gt"], r["spearman_rot"], r["mae_rot"])
    bundle.tables["property_table"] = table
    bundle.summary = {"property": name, "rows": table.records(), "rotations_deg": [90, 180, 270, 360]}
    write_report(bundle, out)
    return bundle


RUNNERS = {"reconstruction": run_reconstruction_experiment, "generation": run_generation_experiment,
           "property": run_property_experiment}


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    return RUNNERS[cfg.experiment.kind](cfg)
