//! Acceptance report: one PASS/FAIL line per criterion, and a nonzero exit
//! if any failed. Criteria 6, 7 and 9 train the shipped
//! toy profile several times and take a while on one core.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use dualrd::cmm::{attention_weights, classification_loss, retrieve};
use dualrd::config::RunConfig;
use dualrd::data::{load_image, stack, toy_dataset, ToySpec};
use dualrd::losses::{alignment_loss, discrepancy_loss};
use dualrd::pipeline::{evaluate, sweep_memory, Trainer};
use dualrd::scoring::{dataset_alpha, FusionConfig};
use dualrd::tensor::avg_pool;
use dualrd::{Tape, Tensor};
use rand::Rng;

struct Report {
    results: Vec<(u32, bool)>,
}

impl Report {
    fn record(&mut self, criterion: u32, pass: bool, detail: String) {
        println!(
            "criterion {criterion}: {} | {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        self.results.push((criterion, pass));
    }
}

fn gradient_correctness(report: &mut Report) {
    let started = Instant::now();
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    let mut worst = ("", 0.0);
    let cases = op_cases();
    for case in &cases {
        let (e64, e32) = check_case(case);
        w64 = w64.max(e64);
        w32 = w32.max(e32);
        if e64 > worst.1 {
            worst = (case.name, e64);
        }
    }
    let (c64, c32, entries) = composed_loss_check(4);
    let secs = started.elapsed().as_secs_f64();
    let pass = w64.max(c64) < 1e-5 && w32.max(c32) < 1e-3 && secs < 60.0;
    report.record(
        1,
        pass,
        format!(
            "{} ops: max rel err f64 {w64:.1e} (worst {}), f32 {w32:.1e}; full objective ({entries} entries): \
             f64 {c64:.1e}, f32 {c32:.1e}; limits 1e-5 / 1e-3; {secs:.1}s (< 60s)",
            cases.len(),
            worst.0
        ),
    );
}

fn memory_contracts(report: &mut Report) {
    let mut rng = rng(77);
    let (mut min_weight, mut max_sum_err, mut leaked, mut rows) = (f64::INFINITY, 0.0f64, 0usize, 0usize);
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let c = rng.random_range(1..9);
        let t = rng.random_range(1..10);
        let scale = rng.random_range(0.5..8.0);
        let tokens = uniform(&[1, t, c], -scale, scale, &mut rng);
        let protos = uniform(&[n, c], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let (q, m) = (tape.constant(tokens), tape.constant(protos));
        let lambda = 1.0 / n as f64;
        let dense = attention_weights(&q, &m).unwrap().value();
        let w = retrieve(&q, &m, lambda, 1e-12).unwrap().weights.value();
        for (row, before) in w.data().chunks(n).zip(dense.data().chunks(n)) {
            rows += 1;
            max_sum_err = max_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            for (&v, &d) in row.iter().zip(before) {
                min_weight = min_weight.min(v);
                leaked += (d < lambda && v != 0.0) as usize;
            }
        }
    }
    let tape = Tape::new();
    let example = tape.constant(Tensor::<f64>::from_f64(vec![1, 4], &[0.5, 0.3, 0.15, 0.05]).unwrap());
    let shrunk = example.hard_shrink(0.25, 1e-12).unwrap().value().data().to_vec();
    let example_err = shrunk
        .iter()
        .zip([0.625, 0.375, 0.0, 0.0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pass = min_weight >= 0.0 && max_sum_err <= 1e-5 && leaked == 0 && example_err < 1e-9;
    report.record(
        2,
        pass,
        format!(
            "{rows} rows: min weight {min_weight:.1e}, max |row sum - 1| {max_sum_err:.1e}, \
             {leaked} sub-threshold entries nonzero; worked example -> {shrunk:.4?}"
        ),
    );
}

fn gradient_truncation(report: &mut Report) {
    let [am, ap, nm, np] = memory_gradients();
    report.record(
        3,
        am == 0.0 && ap == 0.0 && nm > 0.0 && np > 0.0,
        format!(
            "anomaly branch max |dL/dM| {am:e}, |dL/dP| {ap:e}; normal branch max |dL/dM| {nm:.2e}, |dL/dP| {np:.2e}"
        ),
    );
}

fn loss_fixed_points(report: &mut Report) {
    let mut rng = rng(99);
    let stages = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Tensor<f64>> {
        [(6, 8), (5, 4), (4, 2)]
            .iter()
            .map(|&(c, s)| uniform(&[2, c, s, s], -1.0, 1.0, rng))
            .collect()
    };
    let align = |a: &[Tensor<f64>], b: &[Tensor<f64>], rho: f64| {
        let tape = Tape::new();
        let p: Vec<_> = a.iter().map(|t| tape.constant(t.clone())).collect();
        let q: Vec<_> = b.iter().map(|t| tape.constant(t.clone())).collect();
        alignment_loss(&p, &q, rho).unwrap().value().item()
    };
    let disc = |maps: &[Tensor<f64>], mask: &Tensor<f64>| {
        let tape = Tape::new();
        let m: Vec<_> = maps.iter().map(|t| tape.constant(t.clone())).collect();
        discrepancy_loss(&m, mask).unwrap().value().item()
    };
    let ce = |logits: &Tensor<f64>, labels: &[usize]| {
        let tape = Tape::new();
        classification_loss(&tape.constant(logits.clone()), labels).unwrap().value().item()
    };

    // fixed points: restored == teacher(normal), identity == teacher(anomalous),
    // reconstruction == teacher(normal), RID == pooled mask, confident correct logits
    let mut at_fixed = [0.0f64; 5];
    let mut direct_gap = 0.0f64;
    for trial in 0..10 {
        let (tn, ta) = (stages(&mut rng), stages(&mut rng));
        at_fixed[0] = at_fixed[0].max(align(&tn, &tn, 0.5).abs());
        at_fixed[1] = at_fixed[1].max(align(&ta, &ta, 0.5).abs());
        at_fixed[2] = at_fixed[2].max(align(&tn, &tn, 0.5).abs());
        let mask = uniform(&[2, 16, 16], 0.0, 1.0, &mut rng).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
        let pooled: Vec<_> = [8, 4, 2].iter().map(|&s| avg_pool(&mask, (s, s)).unwrap()).collect();
        at_fixed[3] = at_fixed[3].max(disc(&pooled, &mask).abs());
        let labels = [trial % 3, (trial + 1) % 3];
        let confident = Tensor::from_fn(vec![2, 5, 3], |i| if i % 3 == labels[i / 15] { 40.0 } else { -40.0 });
        at_fixed[4] = at_fixed[4].max(ce(&confident, &labels).abs());

        for rho in [0.25, 0.5, 1.0] {
            direct_gap = direct_gap.max((align(&tn, &ta, rho) - direct_alignment(&tn, &ta, rho)).abs());
        }
        let maps: Vec<_> = [8, 4, 2].iter().map(|&s| uniform(&[2, s, s], 0.0, 2.0, &mut rng)).collect();
        direct_gap = direct_gap.max((disc(&maps, &mask) - direct_discrepancy(&maps, &mask)).abs());
        let logits = uniform(&[2, 5, 3], -3.0, 3.0, &mut rng);
        direct_gap = direct_gap.max((ce(&logits, &labels) - direct_cross_entropy(&logits, &labels)).abs());
    }
    let worst_fixed = at_fixed.iter().copied().fold(0.0, f64::max);
    report.record(
        4,
        worst_fixed < 1e-6 && direct_gap < 1e-6,
        format!(
            "at fixed points (restoration, identity, rec, dist, cls) = [{}]; \
             max gap to direct formulas {direct_gap:.1e} (limit 1e-6)",
            at_fixed.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

fn metric_oracles(report: &mut Report) {
    let started = Instant::now();
    let trials = 1500;
    let bad = metric_oracle_mismatches(trials, 31337);
    let secs = started.elapsed().as_secs_f64();
    let total: usize = bad.iter().map(|b| b.1).sum();
    report.record(
        5,
        total == 0 && secs < 120.0,
        format!("{trials} seeded trials (<= 16 samples/pixels), exact rational comparison, mismatches {bad:?}; {secs:.1}s (< 120s)"),
    );
}

struct ToyRun {
    cfg: RunConfig,
    trainer: Trainer<f32>,
    out: PathBuf,
}

fn toy_profile(root: &Path) -> RunConfig {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = RunConfig::load(&shipped).expect("shipped toy profile");
    cfg.data.root = root.to_path_buf();
    cfg
}

fn toy_experiment(report: &mut Report, work: &Path) -> ToyRun {
    let data = work.join("toy");
    let index = toy_dataset(&ToySpec::default(), &data).unwrap();
    let cfg = toy_profile(&data);
    let started = Instant::now();
    let mut trainer = Trainer::<f32>::new(cfg.clone()).unwrap();
    let out = work.join("run");
    trainer.train(&out).unwrap();
    let eval = evaluate(&trainer.net, &cfg, &trainer.index, &cfg.score).unwrap();
    eval.write(&out).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let image = eval.report.mean_image_auroc();
    let pixel = eval.report.mean_pixel_auroc().unwrap_or(f64::NAN);
    let ratio = eval.rid_anomalous / eval.rid_normal;
    report.record(
        6,
        image >= 0.85 && pixel >= 0.85 && ratio >= 2.0 && secs <= 900.0,
        format!(
            "{} categories, {} train / {} test images, {} epochs: image AUROC {image:.4} (>= 0.85), \
             pixel AUROC {pixel:.4} (>= 0.85), RID anomalous/normal {:.4}/{:.4} = {ratio:.2}x (>= 2x); \
             {secs:.0}s (<= 900s)",
            index.categories.len(),
            index.train.len(),
            index.test.len(),
            cfg.train.epochs,
            eval.rid_anomalous,
            eval.rid_normal,
        ),
    );
    ToyRun { cfg, trainer, out }
}

fn memory_sweep(report: &mut Report, run: &ToyRun, work: &Path) -> PathBuf {
    let out = work.join("sweep");
    let rows = sweep_memory::<f32>(&run.cfg, &[16, 64, 256], &out).unwrap();
    let large: Vec<f64> = rows.iter().filter(|r| r.slots >= 64).map(|r| r.image_auroc).collect();
    let spread = large.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - large.iter().copied().fold(f64::INFINITY, f64::min);
    let listing: Vec<String> = rows
        .iter()
        .map(|r| format!("N={}: AUROC {:.4}, AUPRO {:.4}", r.slots, r.image_auroc, r.pixel_aupro))
        .collect();
    // image AUROCs are ratios of small integers; compare above float rounding
    report.record(
        7,
        spread <= 0.05 + 1e-12,
        format!("{}; spread for N >= 64 = {spread:.4} (<= 0.05)", listing.join("; ")),
    );
    out
}

fn fusion_sanity(report: &mut Report, run: &ToyRun) {
    let cfg = &run.cfg;
    let size = cfg.model.image_size;
    let (mut tr_diff, mut ri_diff, mut images) = (0.0f64, 0.0f64, 0);
    for chunk in run.trainer.index.test.chunks(cfg.train.batch_size) {
        let batch: Vec<Tensor<f32>> = chunk.iter().map(|e| load_image(&e.path, size).unwrap()).collect();
        let x = cfg.data.normalization.apply(&stack(&batch).unwrap());
        let pure_tr = run.trainer.net.score(&x, &FusionConfig { alpha: 0.0, ..cfg.score }).unwrap();
        let pure_ri = run.trainer.net.score(&x, &FusionConfig { alpha: 1.0, ..cfg.score }).unwrap();
        for (a, b) in pure_tr.maps.iter().zip(&pure_ri.maps) {
            tr_diff = tr_diff.max(a.map.max_abs_diff(&a.tr));
            ri_diff = ri_diff.max(b.map.max_abs_diff(&b.ri));
            images += 1;
        }
    }
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mvtec.toml");
    let mvtec_file = RunConfig::load(&shipped).map(|c| c.score.alpha).unwrap_or(f64::NAN);
    let builtin = RunConfig::mvtec().score.alpha;
    let family = dataset_alpha("mvtec").unwrap_or(f64::NAN);
    report.record(
        8,
        tr_diff == 0.0 && ri_diff == 0.0 && mvtec_file == 0.4 && builtin == 0.4 && family == 0.4,
        format!(
            "{images} test images: |S(a=0) - S_TR| max {tr_diff:e}, |S(a=1) - S_RI| max {ri_diff:e}; \
             MVTec alpha: built-in {builtin}, configs/mvtec.toml {mvtec_file}, dataset default {family}"
        ),
    );
}

fn determinism(report: &mut Report, run: &ToyRun, sweep: &Path) {
    // the sweep's N=64 entry repeats the toy run with identical settings
    let first = fs::read_to_string(run.out.join("metrics.csv")).unwrap_or_default();
    let second = fs::read_to_string(sweep.join("N64/metrics.csv")).unwrap_or_default();
    let losses_equal = fs::read(run.out.join("loss_log.csv")).ok() == fs::read(sweep.join("N64/loss_log.csv")).ok();
    report.record(
        9,
        !first.is_empty() && first == second,
        format!(
            "two seeded train -> eval runs: metric CSVs {} ({} bytes), loss logs {}",
            if first == second { "identical" } else { "differ" },
            first.len(),
            if losses_equal { "identical" } else { "differ" }
        ),
    );
}

// runs without the libtest harness so the report is never captured
fn main() {
    let work = tempfile::TempDir::new().unwrap();
    let mut report = Report { results: Vec::new() };
    gradient_correctness(&mut report);
    memory_contracts(&mut report);
    gradient_truncation(&mut report);
    loss_fixed_points(&mut report);
    metric_oracles(&mut report);
    let run = toy_experiment(&mut report, work.path());
    let sweep = memory_sweep(&mut report, &run, work.path());
    fusion_sanity(&mut report, &run);
    determinism(&mut report, &run, &sweep);
    let failed: Vec<u32> = report.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", report.results.len());
}
