"""End-to-end scaled transfer experiment.

synthesize weak and target sets -> pretrain (classification, proxynca) ->
fine-tune from random / classification / proxynca at several N_c -> report,
then check the expected orderings between the three initializations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..datasets import generate_synthetic, load_folder, write_folder
from .config import RunConfig
from .protocol import finetune, pretrain
from .report import ReportRow, report

log = logging.getLogger(__name__)

WEAK_CLASSES = 24
TARGET_CLASSES = 8


@dataclass
class TrendSettings:
    weak_per_class: int = 200
    target_per_class: int = 100
    image_size: int = 32
    pretrain_epochs: int = 30
    finetune_epochs: int = 50
    finetune_batch_size: int = 4  # at n_c=4 a batch of 32 would mean one step per epoch
    head_init: str = "feature_scaled"
    n_cs: tuple[int, ...] = (4, 8, 16)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    test_per_class: int = 50
    base_lr: float = 1e-3
    arch: str = "desk"
    data_seed: int = 0
    split_seed: int = 123
    extra: dict = field(default_factory=dict)  # more RunConfig overrides for every stage

    def base_config(self, out: Path, **kw) -> RunConfig:
        values = dict(out=str(out), arch=self.arch, base_lr=self.base_lr)
        values.update(self.extra)
        values.update(kw)
        return RunConfig(**values)


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class TrendResult:
    rows: list[ReportRow]
    checks: list[TrendCheck]
    wall_time: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def cell(self, init: str, n_c: int) -> ReportRow:
        for row in self.rows:
            if row.init == init and row.n_c == n_c:
                return row
        raise KeyError((init, n_c))


def synthesize(out: Path, s: TrendSettings) -> tuple[Path, Path]:
    weak_dir, target_dir = out / "data" / "weak", out / "data" / "target"
    weak = generate_synthetic(WEAK_CLASSES, s.weak_per_class, s.image_size, seed=s.data_seed)
    target = generate_synthetic(TARGET_CLASSES, s.target_per_class, s.image_size, seed=s.data_seed + 1,
                                class_offset=WEAK_CLASSES)
    write_folder(weak, weak_dir)
    write_folder(target, target_dir)
    return weak_dir, target_dir


def check_trend(rows: list[ReportRow], inits=("classification", "proxynca"), n_cs=(4, 8, 16),
                chance: float = 100.0 / TARGET_CLASSES) -> list[TrendCheck]:
    """Orderings expected when pretraining on related data helps under scarcity."""
    cells = {(r.init, r.n_c): r for r in rows}
    lo, hi = min(n_cs), max(n_cs)
    rnd_lo, rnd_hi = cells[("random", lo)], cells[("random", hi)]
    checks = []
    for init in inits:
        pre = cells[(init, lo)]
        gap = pre.mean - rnd_lo.mean
        checks.append(TrendCheck(f"{init} beats random by >= 5 points at n_c={lo}", gap >= 5.0,
                                 f"{pre.mean:.2f} vs {rnd_lo.mean:.2f} (gap {gap:+.2f})"))
        checks.append(TrendCheck(f"{init} at n_c={lo} >= random at n_c={hi} - 2", pre.mean >= rnd_hi.mean - 2.0,
                                 f"{pre.mean:.2f} vs {rnd_hi.mean:.2f}"))
    worst = None
    for init in ("random",) + tuple(inits):
        for n_c in n_cs:
            row = cells[(init, n_c)]
            margin = (row.mean - chance) - 3.0 * row.std
            if worst is None or margin < worst[0]:
                worst = (margin, init, n_c, row)
    margin, init, n_c, row = worst
    checks.append(TrendCheck(f"every configuration beats chance ({chance:.1f}%) by >= 3 sd", margin > 0,
                             f"tightest: {init} n_c={n_c} {row.cell}"))
    return checks


def run_trend(out, settings: TrendSettings | None = None) -> TrendResult:
    s = settings or TrendSettings()
    out = Path(out)
    start = time.perf_counter()
    weak_dir, target_dir = synthesize(out, s)
    weak, target = load_folder(weak_dir), load_folder(target_dir)
    ckpts = {}
    for method in ("classification", "proxynca"):
        cfg = s.base_config(out, task="pretrain", method=method, data=str(weak_dir), epochs=s.pretrain_epochs,
                            seeds=(s.data_seed,))
        ckpts[method] = pretrain(cfg, dataset=weak)
        log.info("pretrained %s in %.0fs", method, time.perf_counter() - start)
    for init in ("random", "classification", "proxynca"):
        for n_c in s.n_cs:
            cfg = s.base_config(
                out, task="finetune", init="random" if init == "random" else str(out / f"pretrain_{init}.ckpt"),
                data=str(target_dir), protocol="holdout", test_per_class=s.test_per_class, split_seed=s.split_seed,
                n_c=n_c, seeds=s.seeds, epochs=s.finetune_epochs, batch_size=s.finetune_batch_size,
                head_init=s.head_init, label=init,
            )
            finetune(cfg, dataset=target, checkpoint=ckpts.get(init))
            log.info("fine-tuned %s n_c=%d at %.0fs", init, n_c, time.perf_counter() - start)
    rows = report(out / "runs", out)
    result = TrendResult(rows, check_trend(rows, n_cs=s.n_cs), time.perf_counter() - start)
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}" for c in result.checks]
    lines.append(f"wall time {result.wall_time:.0f}s; settings {asdict(s)}")
    (out / "trend.txt").write_text("\n".join(lines) + "\n")
    return result
