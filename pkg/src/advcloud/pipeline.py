"""Experiment stages and the on-disk layout of a run directory.

A run lives in ``<out>/seed<seed>-<config digest>/``::

    config.txt                 serialized ExperimentConfig
    data/{train,test}/...      images/ and gt/ PNGs
    models/*.ckpt              detector, discriminator, DefenseNet variants
    attacks/<kind>.npz         attacked test images (plus E, M, loss traces)
    defended/<defense>/...     <kind>.npz and PNGs per defense
    results/*.csv              every number the report uses
    manifests/<stage>.json     inputs, checksums, config digest, wall time
    report.md                  markdown tables built from results/ only

Stages read their prerequisites from disk, so each one can be run on its
own once the previous stages have produced their artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from advcloud import checkpoint
from advcloud.attacks import advcloud_attack, baseline_attack
from advcloud.cloud import masks_for_ids, normal_cloud
from advcloud.config import ExperimentConfig
from advcloud.data import DatasetSplit, load_dataset, save_dataset, save_image, stack, synth_dataset
from advcloud.defense import (DEFENSE_VARIANTS, DefenseNet, cached_attacks, defend, train_defense)
from advcloud.discriminator import Discriminator, disc_forward, pretrain_discriminator
from advcloud.jpeg import jpeg_defense
from advcloud.metrics import quality_scores, sod_scores
from advcloud.sod import SodNet, sod_forward, train_sod

log = logging.getLogger(__name__)

# slug -> row label, in table order
ATTACK_KINDS = {
    "clean": "Clean Image",
    "normal": "Normal cloud",
    "fgsm": "FGSM",
    "mifgsm": "MIFGSM",
    "pgd": "PGD",
    "vmifgsm": "VMIFGSM",
    "nifgsm": "NIFGSM",
    "advcloud-fix-m": "AdvCloud w/o Noise",
    "advcloud-fix-e": "AdvCloud w/o Exposure Matrix",
    "advcloud": "AdvCloud",
}
ATTACKS = tuple(k for k in ATTACK_KINDS if k not in ("clean", "normal"))
BASELINE_SLUGS = {"fgsm": "FGSM", "mifgsm": "MIFGSM", "pgd": "PGD", "vmifgsm": "VMIFGSM", "nifgsm": "NIFGSM"}
ADVCLOUD_SLUGS = {"advcloud": "full", "advcloud-fix-e": "fix_E", "advcloud-fix-m": "fix_M"}
# CLI spelling of the DefenseNet variants
VARIANT_SLUGS = {"full": "full", "no-generalized": "no_generalized", "no-vanilla": "no_vanilla"}
DEFENSES = ("jpeg",) + tuple(VARIANT_SLUGS)


class MissingArtifact(FileNotFoundError):
    pass


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class Run:
    root: Path
    config: ExperimentConfig

    @classmethod
    def create(cls, out, config: ExperimentConfig) -> "Run":
        root = Path(out) / f"seed{config.seed}-{config.digest()}"
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.txt").write_text(config.dumps())
        return cls(root, config)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, rel: str, producer: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {p} (run `advcloud {producer}` first)")
        return p

    def manifest(self, stage: str, inputs, outputs, t0: float, **extra) -> None:
        doc = {
            "stage": stage,
            "config_digest": self.config.digest(),
            "seed": self.config.seed,
            "inputs": {str(p.relative_to(self.root)): file_digest(p) for p in inputs},
            "outputs": {str(p.relative_to(self.root)): file_digest(p) for p in outputs},
            "wall_seconds": round(time.perf_counter() - t0, 3),
            **extra,
        }
        out = self.path("manifests", f"{stage}.json")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    # --- loaders ------------------------------------------------------------

    def split(self) -> DatasetSplit:
        self.require("data", "synth-data")
        s = self.config.size
        return load_dataset(self.path("data"), size=(s, s), seed=self.config.seed)

    def arrays(self, which: str):
        images, gts, ids = stack(getattr(self.split(), which))
        masks = masks_for_ids(ids, self.config.size, self.config.size, self.config.seed)
        return images, gts, ids, masks

    def sod(self) -> SodNet:
        net = SodNet(self.config.sod_channels, seed=self.config.seed)
        checkpoint.load_module(self.require("models/sod.ckpt", "train-sod"), net)
        return net.freeze()

    def disc(self) -> Discriminator:
        d = Discriminator(self.config.disc_channels, seed=self.config.seed)
        checkpoint.load_module(self.require("models/disc.ckpt", "pretrain-disc"), d)
        return d.freeze()

    def defense_net(self, variant: str) -> DefenseNet:
        net = self.new_defense_net()
        checkpoint.load_module(self.require(f"models/defense-{variant}.ckpt",
                                            f"train-defense --defense-variant {variant}"), net)
        return net.freeze()

    def new_defense_net(self) -> DefenseNet:
        return DefenseNet(self.config.defense_width, self.config.defense_bottleneck, seed=self.config.seed)

    def attacked(self, kind: str) -> dict:
        p = self.require(f"attacks/{kind}.npz", f"attack --attack {kind}")
        with np.load(p) as z:
            return dict(z)


# --- stages ------------------------------------------------------------------

def stage_synth_data(run: Run, source=None) -> None:
    """Write the dataset as PNGs: synthetic, or resized from an EORSSD-layout ``source``."""
    t0 = time.perf_counter()
    c = run.config
    if source is None:
        split = synth_dataset(c.n_train, c.n_test, c.size, c.size, seed=c.seed)
    else:
        split = load_dataset(source, size=(c.size, c.size), seed=c.seed)
    save_dataset(split, run.path("data"))
    run.manifest("synth-data", [], [run.path("data")], t0,
                 n_train=len(split.train), n_test=len(split.test), source=str(source or "synthetic"))


def stage_train_sod(run: Run) -> None:
    t0 = time.perf_counter()
    c = run.config
    images, gts, _, _ = run.arrays("train")
    net = SodNet(c.sod_channels, seed=c.seed)
    hist = train_sod(net, images, gts, c.sod_epochs, lr=c.sod_lr, batch_size=c.batch_size, seed=c.seed)
    out = run.path("models", "sod.ckpt")
    out.parent.mkdir(exist_ok=True)
    checkpoint.save_module(out, net)
    write_csv(run.path("results", "sod_history.csv"), ["epoch", "loss"], enumerate(hist.epoch_loss))
    run.manifest("train-sod", [run.path("data")], [out], t0)


def stage_pretrain_disc(run: Run) -> None:
    t0 = time.perf_counter()
    c = run.config
    sod = run.sod()
    images, gts, _, masks = run.arrays("train")
    disc = Discriminator(c.disc_channels, seed=c.seed)
    hist = pretrain_discriminator(disc, images, gts, masks, sod, rounds=c.disc_rounds,
                                  images_per_round=c.disc_images_per_round, disc_steps=c.disc_steps,
                                  batch_size=2 * c.batch_size, lr=c.disc_lr, budget=c.budget, seed=c.seed)
    out = run.path("models", "disc.ckpt")
    checkpoint.save_module(out, disc)
    rows = [(r, loss, acc) for r, (loss, acc) in enumerate(zip(hist.round_loss, hist.round_accuracy))]
    write_csv(run.path("results", "disc_history.csv"), ["round", "l_d", "train_accuracy"], rows)
    write_csv(run.path("results", "disc_eval.csv"), ["fakes", "accuracy", "mean_real", "mean_fake"],
              _disc_eval(run, sod, disc, hist.attack_state))
    run.manifest("pretrain-disc", [run.path("data"), run.path("models", "sod.ckpt")], [out], t0)


def _disc_eval(run: Run, sod, disc, attack_state) -> list:
    """Held-out real-vs-fake accuracy for three kinds of fake.

    ``alternation``: clouds built against the discriminator state of the
    last attack step (the distribution it was last trained on).
    ``self-guided``: clouds built against the returned discriminator itself.
    ``unguided``: clouds built without discriminator guidance.
    """
    images, gts, _, masks = run.arrays("test")
    real = disc_forward(disc, normal_cloud(images, masks).data)
    previous = Discriminator(run.config.disc_channels, seed=run.config.seed)
    previous.load_state_dict(attack_state or disc.state_dict())
    previous.freeze()
    rows = []
    for name, guide in (("alternation", previous), ("self-guided", disc), ("unguided", None)):
        fake = advcloud_attack(images, gts, sod, guide, run.config.budget, masks0=masks).image
        s_fake = disc_forward(disc, fake)
        acc = 0.5 * ((real > 0.5).mean() + (s_fake <= 0.5).mean())
        rows.append((name, float(acc), float(real.mean()), float(s_fake.mean())))
    return rows


def stage_attack(run: Run, kinds=("all",)) -> None:
    kinds = ATTACKS if "all" in kinds else tuple(kinds)
    for k in kinds:
        if k not in ATTACKS:
            raise ValueError(f"unknown attack {k!r}; expected one of {ATTACKS} or 'all'")
    c = run.config
    sod = run.sod()
    images, gts, ids, masks = run.arrays("test")
    clouded = normal_cloud(images, masks).data
    disc = None
    run.path("attacks").mkdir(exist_ok=True)
    for kind in kinds:
        t0 = time.perf_counter()
        inputs = [run.path("data"), run.path("models", "sod.ckpt")]
        if kind in ADVCLOUD_SLUGS:
            disc = disc or run.disc()
            inputs.append(run.path("models", "disc.ckpt"))
            res = advcloud_attack(images, gts, sod, disc, c.budget, masks0=masks, mode=ADVCLOUD_SLUGS[kind])
            extra = {"exposure": res.exposure, "mask": res.mask}
        else:
            # baselines start from the normal-cloud image, as the cloudy set is the reference
            rng = np.random.default_rng([c.seed, 0xA77AC4])
            res = baseline_attack(BASELINE_SLUGS[kind], clouded, gts, sod, c.budget, rng=rng)
            extra = {}
        out = run.path("attacks", f"{kind}.npz")
        np.savez(out, image=res.image, loss_trace=res.loss_trace, ids=np.array(ids), **extra)
        folder = run.path("attacks", kind)
        folder.mkdir(exist_ok=True)
        for i, img in zip(ids, res.image):
            save_image(folder / f"{i}.png", img)
        linf = np.abs(res.image - clouded).max(axis=(1, 2, 3))
        nan = np.full(len(ids), np.nan)
        dm = np.abs(res.mask - masks.reshape(res.mask.shape)).max(axis=(1, 2, 3)) if extra else nan
        de = np.abs(res.exposure - 1.0).max(axis=(1, 2, 3)) if extra else nan
        sidecar = run.path("attacks", f"{kind}.csv")
        write_csv(sidecar, ["id", "kind", "initial_loss", "final_loss", "linf_image", "linf_mask", "linf_exposure"],
                  zip(ids, [kind] * len(ids), res.initial_loss, res.final_loss, linf, dm, de))
        run.manifest(f"attack-{kind}", inputs, [out, sidecar], t0, attack_seconds=round(res.wall_time, 3))
        log.info("attack %s done in %.1fs", kind, res.wall_time)


def _train_attack_cache(run: Run, sod, disc):
    path = run.path("models", "defense-train-attacks.npz")
    if path.exists():
        with np.load(path) as z:
            return z["exposure"], z["mask"], z["image"]
    images, gts, _, masks = run.arrays("train")
    e, m, img = cached_attacks(images, gts, masks, sod, disc, run.config.budget)
    np.savez(path, exposure=e, mask=m, image=img)
    return e, m, img


def stage_train_defense(run: Run, variants=("full",)) -> None:
    variants = tuple(VARIANT_SLUGS) if "all" in variants else tuple(variants)
    c = run.config
    sod, disc = run.sod(), run.disc()
    images, gts, _, masks = run.arrays("train")
    for v in variants:
        if v not in VARIANT_SLUGS:
            raise ValueError(f"unknown defense variant {v!r}; expected one of {tuple(VARIANT_SLUGS)}")
        t0 = time.perf_counter()
        cache = _train_attack_cache(run, sod, disc)
        net = run.new_defense_net()
        hist = train_defense(net, images, gts, masks, sod, disc, epochs=c.defense_epochs,
                             variant=VARIANT_SLUGS[v], budget=c.budget, agm=c.agm, lr=c.defense_lr,
                             batch_size=c.batch_size, reg_weight=c.reg_weight, seed=c.seed, attacks=cache,
                             lr_schedule=c.defense_lr_schedule)
        out = run.path("models", f"defense-{v}.ckpt")
        checkpoint.save_module(out, net)
        write_csv(run.path("results", f"defense_history_{v}.csv"), ["epoch", "loss"],
                  enumerate(hist.epoch_loss))
        run.manifest(f"train-defense-{v}", [run.path("data"), run.path("models", "sod.ckpt"),
                                            run.path("models", "disc.ckpt")], [out], t0)


def _inputs_for_defense(run: Run) -> dict:
    images, _, _, masks = run.arrays("test")
    sets = {"clean": images, "normal": normal_cloud(images, masks).data}
    for kind in ATTACKS:
        if run.path("attacks", f"{kind}.npz").exists():
            sets[kind] = run.attacked(kind)["image"]
    return sets


def stage_defend(run: Run, defenses=("all",)) -> None:
    defenses = DEFENSES if "all" in defenses else tuple(defenses)
    sets = _inputs_for_defense(run)
    _, _, ids, _ = run.arrays("test")
    for d in defenses:
        if d not in DEFENSES:
            raise ValueError(f"unknown defense {d!r}; expected one of {DEFENSES}")
        t0 = time.perf_counter()
        if d == "jpeg":
            apply = lambda x: jpeg_defense(x, run.config.jpeg_quality)  # noqa: E731
            inputs = []
        else:
            net = run.defense_net(d)
            apply = lambda x, net=net: defend(net, x)  # noqa: E731
            inputs = [run.path("models", f"defense-{d}.ckpt")]
        outputs = []
        for kind, x in sets.items():
            y = apply(x)
            folder = run.path("defended", d, kind)
            folder.mkdir(parents=True, exist_ok=True)
            for i, img in zip(ids, y):
                save_image(folder / f"{i}.png", img)
            out = run.path("defended", d, f"{kind}.npz")
            np.savez(out, image=y)
            outputs.append(out)
        run.manifest(f"defend-{d}", inputs, outputs, t0)


def stage_eval(run: Run) -> None:
    """Score every available attacked and defended set into results/*.csv."""
    t0 = time.perf_counter()
    sod = run.sod()
    images, gts, ids, masks = run.arrays("test")
    clouded = normal_cloud(images, masks).data
    sets = _inputs_for_defense(run)

    def scores(x):
        preds = sod_forward(sod, x)
        per = [sod_scores(p, g) for p, g in zip(preds, gts)]
        return (float(np.mean([s.mae for s in per])), float(np.mean([s.f_beta for s in per])),
                float(np.mean([s.s_measure for s in per])))

    rows = []
    for kind in ATTACK_KINDS:
        if kind in sets:
            rows.append(("none", kind, *scores(sets[kind])))
    l1_rows = []
    for d in DEFENSES:
        for kind in ATTACK_KINDS:
            p = run.path("defended", d, f"{kind}.npz")
            if kind in sets and p.exists():
                with np.load(p) as z:
                    y = z["image"]
                rows.append((d, kind, *scores(y)))
                l1_rows.append((d, kind, float(np.abs(sets[kind] - images).mean()),
                                float(np.abs(y - images).mean())))
    write_csv(run.path("results", "sod_scores.csv"), ["defense", "kind", "mae", "f_beta", "s_measure"], rows)
    write_csv(run.path("results", "defense_l1.csv"), ["defense", "kind", "l1_input", "l1_defended"], l1_rows)

    q_rows, per_image, loss_rows = [], [], []
    for kind in ATTACK_KINDS:
        if kind == "clean" or kind not in sets:
            continue
        vs_nc = [quality_scores(a, b) for a, b in zip(sets[kind], clouded)]
        vs_clean = [quality_scores(a, b) for a, b in zip(sets[kind], images)]
        q_rows.append((kind, *(float(np.mean([getattr(q, f) for q in vs_nc])) for f in ("ssim", "psnr", "l2")),
                       *(float(np.mean([getattr(q, f) for q in vs_clean])) for f in ("ssim", "psnr", "l2"))))
        per_image += [(kind, i, q.ssim) for i, q in zip(ids, vs_nc)]
        if kind in ATTACKS:
            trace = run.attacked(kind)["loss_trace"]
            loss_rows.append((kind, float(trace[0].mean()), float(trace[-1].mean())))
    write_csv(run.path("results", "quality.csv"),
              ["kind", "ssim_nc", "psnr_nc", "l2_nc", "ssim_clean", "psnr_clean", "l2_clean"], q_rows)
    write_csv(run.path("results", "ssim_per_image.csv"), ["kind", "id", "ssim_nc"], per_image)
    write_csv(run.path("results", "attack_loss.csv"), ["kind", "initial_loss", "final_loss"], loss_rows)
    run.manifest("eval", [run.path("models", "sod.ckpt")], [run.path("results")], t0)


def run_all(run: Run, source=None) -> None:
    """Every stage in order, skipping nothing."""
    stage_synth_data(run, source)
    stage_train_sod(run)
    stage_pretrain_disc(run)
    stage_attack(run, ("all",))
    stage_train_defense(run, ("all",))
    stage_defend(run, ("all",))
    stage_eval(run)
    from advcloud.report import write_report
    write_report(run.root)
