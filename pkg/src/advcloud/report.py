"""Markdown tables assembled purely from a run directory's results/*.csv."""

from __future__ import annotations

from pathlib import Path

from advcloud.pipeline import ATTACK_KINDS, read_csv

# Published values for orientation only; the toy detector and synthetic
# scenes are not expected to reproduce them.
PUBLISHED_CLEAN_ROW = {"mae": 0.0060, "f_beta": 0.9049, "s_measure": 0.9058}
PUBLISHED_NORMAL_CLOUD_VS_CLEAN = {"ssim": 0.64, "psnr": 10.01, "l2": 331.85}

DEFENSE_ATTACKS = ("fgsm", "mifgsm", "pgd", "vmifgsm", "nifgsm", "advcloud")
VARIANT_HEADINGS = (("no-generalized", "DefenseNet w/o Generalized AdvCloud"),
                    ("no-vanilla", "DefenseNet w/o Vanilla AdvCloud"),
                    ("full", "DefenseNet"))


def _f(x, digits=4) -> str:
    return f"{float(x):.{digits}f}"


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return out


def _scores(results: Path) -> dict:
    p = results / "sod_scores.csv"
    if not p.exists():
        return {}
    return {(r["defense"], r["kind"]): r for r in read_csv(p)}


def build_report(run_dir) -> str:
    run_dir = Path(run_dir)
    results = run_dir / "results"
    scores = _scores(results)
    lines = [f"# Adversarial cloud experiment report ({run_dir.name})", ""]

    lines += ["## Table 1: detector performance under attack", ""]
    rows = [(label, _f(s["mae"]), _f(s["f_beta"]), _f(s["s_measure"]))
            for kind, label in ATTACK_KINDS.items() if (s := scores.get(("none", kind)))]
    lines += _table(["Attack", "MAE", "F_beta", "S_m"], rows)
    lines += ["", "Reference (published, full-scale detector; not asserted): Clean Image "
              f"MAE {PUBLISHED_CLEAN_ROW['mae']}, F_beta {PUBLISHED_CLEAN_ROW['f_beta']}, "
              f"S_m {PUBLISHED_CLEAN_ROW['s_measure']}.", ""]

    lines += ["## Table 2: DefenseNet ablation", ""]
    header = ["Attack"] + [f"{name} {m}" for _, name in VARIANT_HEADINGS for m in ("MAE", "F_beta", "S_m")]
    rows, sums = [], {v: [[], [], []] for v, _ in VARIANT_HEADINGS}
    for kind in DEFENSE_ATTACKS:
        cells = []
        for v, _ in VARIANT_HEADINGS:
            s = scores.get((v, kind))
            if s is None:
                cells += ["-"] * 3
                continue
            for acc, key in zip(sums[v], ("mae", "f_beta", "s_measure")):
                acc.append(float(s[key]))
            cells += [_f(s["mae"]), _f(s["f_beta"]), _f(s["s_measure"])]
        if any(c != "-" for c in cells):
            rows.append([ATTACK_KINDS[kind]] + cells)
    if rows:
        mean = ["Mean"]
        for v, _ in VARIANT_HEADINGS:
            mean += [_f(sum(a) / len(a)) if a else "-" for a in sums[v]]
        rows.append(mean)
    lines += _table(header, rows)
    lines += [""]

    lines += ["## Table 3: defenses on normal cloudy images", ""]
    rows = []
    for defense, label in (("none", "Clean Image"), ("none", "Normal Cloud"), ("jpeg", "JPEG Compression"),
                           ("full", "DefenseNet")):
        kind = "clean" if label == "Clean Image" else "normal"
        if (s := scores.get((defense, kind))):
            rows.append((label, _f(s["mae"]), _f(s["f_beta"]), _f(s["s_measure"])))
    lines += _table(["Method", "MAE", "F_beta", "S_m"], rows)
    lines += [""]

    lines += ["## Table 4: image quality of attacked images", ""]
    q_path = results / "quality.csv"
    rows = []
    if q_path.exists():
        for r in read_csv(q_path):
            nc = r["kind"] == "normal"
            rows.append((ATTACK_KINDS[r["kind"]], _f(r["ssim_nc"], 2), "-" if nc else _f(r["psnr_nc"], 2),
                         _f(r["l2_nc"], 2), _f(r["ssim_clean"], 2), _f(r["psnr_clean"], 2),
                         _f(r["l2_clean"], 2)))
    lines += _table(["Method", "SSIM vs cloudy", "PSNR vs cloudy", "L2 vs cloudy",
                     "SSIM vs clean", "PSNR vs clean", "L2 vs clean"], rows)
    lines += ["", "Reference (published, normal cloud vs clean; not asserted): "
              f"SSIM {PUBLISHED_NORMAL_CLOUD_VS_CLEAN['ssim']}, PSNR {PUBLISHED_NORMAL_CLOUD_VS_CLEAN['psnr']}, "
              f"L2 {PUBLISHED_NORMAL_CLOUD_VS_CLEAN['l2']}. L2 here is the mean squared difference on the "
              "0-255 scale.", ""]

    lines += ["## Table 5: defense performance per attack", ""]
    rows = []
    for defense, label in (("jpeg", "JPEG"), ("full", "DefenseNet")):
        for kind in DEFENSE_ATTACKS:
            if (s := scores.get((defense, kind))):
                rows.append((label, ATTACK_KINDS[kind], _f(s["mae"]), _f(s["f_beta"]), _f(s["s_measure"])))
    lines += _table(["Defense", "Attack", "MAE", "F_beta", "S_m"], rows)
    lines += [""]

    extra = []
    if (p := results / "attack_loss.csv").exists():
        extra += ["### Attack loss (mean per-image BCE)", ""]
        extra += _table(["Attack", "initial", "final"],
                        [(ATTACK_KINDS[r["kind"]], _f(r["initial_loss"]), _f(r["final_loss"]))
                         for r in read_csv(p)])
        extra += [""]
    if (p := results / "disc_eval.csv").exists():
        extra += ["### Discriminator, held-out real vs fake", ""]
        extra += _table(["Fakes", "accuracy", "mean D(real)", "mean D(fake)"],
                        [(r["fakes"], _f(r["accuracy"]), _f(r["mean_real"]), _f(r["mean_fake"]))
                         for r in read_csv(p)])
        extra += [""]
    if extra:
        lines += ["## Diagnostics", ""] + extra
    return "\n".join(lines)


def write_report(run_dir) -> Path:
    out = Path(run_dir) / "report.md"
    out.write_text(build_report(run_dir))
    return out
