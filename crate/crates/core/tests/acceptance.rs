//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 1 3 7`.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use common::*;
use fedvtc::accounting::{ledger_total, memory_entry, LedgerFilter};
use fedvtc::datapart::{dirichlet_partition, load_dataset, DatasetBundle, SizeCap};
use fedvtc::math::{kl_gaussian, vtc_objective, PrototypeMap, StdVec, VtcSample};
use fedvtc::modelzoo::{build_local_model, build_vtc_decoder, ArchCluster, DatasetProfile};
use fedvtc::nn::Mode;
use fedvtc::orchestrator::{
    aggregate_decoder, aggregate_prototypes, aggregate_sigma, generate_synthetic, run_experiment, sample_latents,
    write_run_dir, RunArtifacts, RunConfig, TcMode, TrainMode,
};
use fedvtc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

const DESK_SEEDS: [u64; 3] = [0, 1, 2];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------- desk runs

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    Full,
    NoFinetune,
    ElboOnly,
    Regular,
}

struct Desk {
    bundle: Option<DatasetBundle<f32>>,
    runs: BTreeMap<(Variant, u64), (RunArtifacts<f32>, f64)>,
}

fn data_root() -> PathBuf {
    std::env::var_os("FEDVTC_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
}

fn desk_config(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        rounds: 20,
        fine_tune_rounds: 5,
        local_epochs: 5,
        clients: 10,
        participants: 3,
        clusters: 2,
        synthetic_samples: 100,
        batch_size: 16,
        lambda: 0.1,
        seed,
        ..RunConfig::default()
    };
    match variant {
        Variant::Full => {}
        Variant::NoFinetune => cfg.fine_tune_rounds = 0,
        Variant::ElboOnly => cfg.train_mode = TrainMode::ElboOnly,
        Variant::Regular => cfg.tc_mode = TcMode::Regular,
    }
    cfg
}

impl Desk {
    fn bundle(&mut self) -> Result<&DatasetBundle<f32>, String> {
        if self.bundle.is_none() {
            let cap = SizeCap {
                train: Some(2000),
                test: Some(1000),
            };
            let b = load_dataset(&DatasetProfile::mnist(), &data_root(), cap, 0).map_err(|e| e.to_string())?;
            self.bundle = Some(b);
        }
        Ok(self.bundle.as_ref().unwrap())
    }

    fn run(&mut self, variant: Variant, seed: u64) -> Result<&(RunArtifacts<f32>, f64), String> {
        if !self.runs.contains_key(&(variant, seed)) {
            let cfg = desk_config(variant, seed);
            let bundle = self.bundle()?;
            let part = dirichlet_partition(&bundle.train_labels, cfg.clients, 0.1, seed).map_err(|e| e.to_string())?;
            let t = Instant::now();
            let art = run_experiment(&format!("{variant:?}"), &cfg, bundle, &part).map_err(|e| e.to_string())?;
            let secs = t.elapsed().as_secs_f64();
            eprintln!(
                "  desk run {variant:?} seed {seed}: {:.2}% in {secs:.0}s",
                art.final_accuracy()
            );
            self.runs.insert((variant, seed), (art, secs));
        }
        Ok(&self.runs[&(variant, seed)])
    }

    fn mean_accuracy(&mut self, variant: Variant) -> Result<(f64, f64, Vec<f64>), String> {
        let mut acc = Vec::new();
        let mut secs = 0.0;
        for s in DESK_SEEDS {
            let (art, t) = self.run(variant, s)?;
            acc.push(art.final_accuracy());
            secs += t;
        }
        Ok((acc.iter().sum::<f64>() / acc.len() as f64, secs, acc))
    }
}

// ---------------------------------------------------------------- criteria

fn analytic_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let samples = 1_000_000usize;
    let mut worst = 0.0f64;
    let mut within = 0;
    for _ in 0..200 {
        let p = rng.random_range(1..=5);
        let z: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..p).map(|_| rng.random_range(0.3..2.0)).collect();
        let exact = kl_gaussian(&z, &c, &sigma).map_err(|e| e.to_string())?;
        let log_sigma: f64 = sigma.iter().map(|s| s.ln()).sum();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..samples {
            // log q(v) − log p(v) with v = z + σ⊙ε, q = N(z, σ²), p = N(c, I)
            let mut r = -log_sigma;
            for i in 0..p {
                let e = normal(&mut rng);
                let v = z[i] + sigma[i] * e;
                r += 0.5 * ((v - c[i]).powi(2) - e * e);
            }
            sum += r;
            sq += r * r;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sq / n - mean * mean) / (n - 1.0)).sqrt();
        let dev = (mean - exact).abs() / se;
        worst = worst.max(dev);
        if dev <= 3.0 {
            within += 1;
        }
    }
    check(
        within == 200,
        format!("{within}/200 instances within 3 SE (largest deviation {worst:.2} SE)"),
    )
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm(got).max(norm(want)).max(1e-300)
}

struct GradInstance {
    profile: DatasetProfile,
    decoder: fedvtc::modelzoo::VtcDecoder<f64>,
    model: fedvtc::modelzoo::LocalModel<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    z: Vec<f64>,
    sigma: Vec<f64>,
    eps: Vec<f64>,
    prototypes: PrototypeMap<f64>,
    lambda: f64,
}

impl GradInstance {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let profile = DatasetProfile::tiny(3);
        let p = profile.latent_dim();
        let n = rng.random_range(2..=4);
        let arch = ArchCluster::new(rng.random_range(1..=2)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let d = profile.input_dim();
        let mut shape = vec![n];
        shape.extend(profile.input);
        GradInstance {
            decoder: build_vtc_decoder(&profile, p, rng.random()).unwrap(),
            model: build_local_model(arch, &profile, p, rng.random()).unwrap(),
            x: Tensor::from_vec(&shape, (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            z: (0..n * p).map(|_| normal(rng)).collect(),
            sigma: (0..p).map(|_| rng.random_range(0.5..1.5)).collect(),
            eps: (0..n * p).map(|_| normal(rng)).collect(),
            prototypes: (0..3).map(|y| (y, (0..p).map(|_| normal(rng)).collect())).collect(),
            lambda: rng.random_range(0.05..1.0),
            labels,
            profile,
        }
    }

    fn p(&self) -> usize {
        self.profile.latent_dim()
    }

    /// Objective given the decoder output.
    fn loss_at(&mut self, z: &[f64], sigma: &[f64], x_gen: &Tensor<f64>) -> f64 {
        let p = self.p();
        let z_gen = self.model.extractor.forward(x_gen, Mode::Frozen).unwrap().0;
        let z_t = Tensor::from_vec(&[self.labels.len(), p], z.to_vec()).unwrap();
        let batch: Vec<_> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &class)| VtcSample {
                class,
                x: self.x.sample(i),
                z: z_t.sample(i),
                x_gen: x_gen.sample(i),
                z_gen: Some(z_gen.sample(i)),
            })
            .collect();
        vtc_objective(&batch, &self.prototypes, sigma, self.lambda)
            .unwrap()
            .0
            .total
    }

    fn decode(&mut self, z: &[f64], sigma: &[f64]) -> Tensor<f64> {
        let p = self.p();
        let v: Vec<f64> = z
            .iter()
            .zip(&self.eps)
            .enumerate()
            .map(|(i, (&zi, &e))| zi + sigma[i % p] * e)
            .collect();
        let v = Tensor::from_vec(&[self.labels.len(), p], v).unwrap();
        self.decoder.net.forward(&v, Mode::Frozen).unwrap().0
    }

    fn loss(&mut self, z: &[f64], sigma: &[f64]) -> f64 {
        let x_gen = self.decode(z, sigma);
        self.loss_at(z, sigma, &x_gen)
    }

    /// Analytic gradients w.r.t. z, σ and the decoder output, chained the
    /// way the decoder step chains them.
    fn analytic(&mut self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = self.p();
        let n = self.labels.len();
        let v: Vec<f64> = self
            .z
            .iter()
            .zip(&self.eps)
            .enumerate()
            .map(|(i, (&zi, &e))| zi + self.sigma[i % p] * e)
            .collect();
        let v = Tensor::from_vec(&[n, p], v).unwrap();
        let (x_gen, tape_d) = self.decoder.net.forward(&v, Mode::Frozen).unwrap();
        let (z_gen, tape_g) = self.model.extractor.forward(&x_gen, Mode::Frozen).unwrap();
        let z_t = Tensor::from_vec(&[n, p], self.z.clone()).unwrap();
        let batch: Vec<_> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &class)| VtcSample {
                class,
                x: self.x.sample(i),
                z: z_t.sample(i),
                x_gen: x_gen.sample(i),
                z_gen: Some(z_gen.sample(i)),
            })
            .collect();
        let (_, g) = vtc_objective(&batch, &self.prototypes, &self.sigma, self.lambda).unwrap();
        let through = self
            .model
            .extractor
            .backward(&tape_g, Tensor::from_vec(&[n, p], g.z_gen).unwrap(), false)
            .unwrap();
        let mut dx_gen = Tensor::from_vec(x_gen.shape(), g.x_gen).unwrap();
        dx_gen.add_assign(&through);
        let dv = self.decoder.net.backward(&tape_d, dx_gen.clone(), false).unwrap();
        let dz: Vec<f64> = g.z.iter().zip(dv.data()).map(|(a, b)| a + b).collect();
        let mut dsigma = g.sigma;
        for (row, e) in dv.data().chunks(p).zip(self.eps.chunks(p)) {
            for ((d, a), e) in dsigma.iter_mut().zip(row).zip(e) {
                *d += a * e;
            }
        }
        (dz, dsigma, dx_gen.into_data())
    }
}

/// Central differences at `h` and `h/10`. A coordinate whose two estimates
/// disagree has a ReLU kink within the step and is left out.
fn central(f: &mut dyn FnMut(usize, f64) -> f64, n: usize, h: f64) -> Vec<Option<f64>> {
    (0..n)
        .map(|i| {
            let coarse = (f(i, h) - f(i, -h)) / (2.0 * h);
            let fine = (f(i, h / 10.0) - f(i, -h / 10.0)) / (0.2 * h);
            ((coarse - fine).abs() <= 1e-6 * (1.0 + fine.abs())).then_some(coarse)
        })
        .collect()
}

fn gradient_checks() -> Outcome {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = [0.0f64; 3];
    let (mut total, mut skipped) = (0usize, 0usize);
    for _ in 0..50 {
        let mut inst = GradInstance::new(&mut rng);
        let (dz, dsigma, dx) = inst.analytic();
        let (z, sigma) = (inst.z.clone(), inst.sigma.clone());
        let fd_z = central(
            &mut |i, d| {
                let mut a = z.clone();
                a[i] += d;
                inst.loss(&a, &sigma)
            },
            z.len(),
            h,
        );
        let fd_s = central(
            &mut |i, d| {
                let mut a = sigma.clone();
                a[i] += d;
                inst.loss(&z, &a)
            },
            sigma.len(),
            h,
        );
        let x_gen = inst.decode(&z, &sigma);
        let fd_x = central(
            &mut |i, d| {
                let mut a = x_gen.clone();
                a.data_mut()[i] += d;
                inst.loss_at(&z, &sigma, &a)
            },
            x_gen.len(),
            h,
        );
        for (w, (g, f)) in worst.iter_mut().zip([(&dz, &fd_z), (&dsigma, &fd_s), (&dx, &fd_x)]) {
            let (kept_g, kept_f): (Vec<f64>, Vec<f64>) =
                g.iter().zip(f).filter_map(|(&a, b)| b.map(|b| (a, b))).unzip();
            total += g.len();
            skipped += g.len() - kept_g.len();
            *w = w.max(rel_err(&kept_g, &kept_f));
        }
    }
    check(
        worst.iter().all(|&w| w < 1e-4) && skipped * 100 <= total,
        format!(
            "50 instances, largest relative error z {:.1e}, sigma {:.1e}, decoder output {:.1e} (bound 1e-4); \
             {skipped}/{total} coordinates straddle a kink",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn aggregation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let profile = DatasetProfile::tiny(10);
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=40);
        let mut uploads = Vec::new();
        for _ in 0..n {
            let mut m = PrototypeMap::new();
            for y in 0..10 {
                if rng.random_bool(0.5) {
                    m.insert(y, (0..p).map(|_| normal(&mut rng) * 3.0).collect::<Vec<f64>>());
                }
            }
            uploads.push(m);
        }
        let previous: PrototypeMap<f64> = (0..10).map(|y| (y, vec![y as f64; p])).collect();
        let got = aggregate_prototypes(&uploads.iter().collect::<Vec<_>>(), &previous).map_err(|e| e.to_string())?;
        for y in 0..10 {
            let rows: Vec<Vec<f64>> = uploads.iter().filter_map(|u| u.get(&y).cloned()).collect();
            if rows.is_empty() {
                if got[&y] != previous[&y] {
                    return Err(format!("class {y} lost its previous prototype"));
                }
            } else {
                worst[0] = worst[0].max(mean_rel_err(&got[&y], &rows));
            }
        }

        let sigmas: Vec<StdVec<f64>> = (0..n)
            .map(|_| StdVec::floored((0..p).map(|_| rng.random_range(1e-3..4.0)).collect()))
            .collect();
        let got = aggregate_sigma(&sigmas.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = sigmas.iter().map(|s| s.values().to_vec()).collect();
        worst[1] = worst[1].max(mean_rel_err(got.values(), &rows));

        let decoders: Vec<_> = (0..n)
            .map(|_| {
                let mut d = build_vtc_decoder::<f64>(&profile, profile.latent_dim(), 0).unwrap();
                let state: Vec<f64> = (0..d.state_count()).map(|_| normal(&mut rng)).collect();
                d.net.load_flat_state(&state).unwrap();
                d
            })
            .collect();
        let got = aggregate_decoder(&decoders.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = decoders.iter().map(|d| d.net.flat_state()).collect();
        worst[2] = worst[2].max(mean_rel_err(&got.net.flat_state(), &rows));
    }
    check(
        worst.iter().all(|&w| w <= 1e-12),
        format!(
            "100 instances, largest relative error prototypes {:.1e}, sigma {:.1e}, decoder {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn ledger_exactness(desk: &mut Desk) -> Outcome {
    let profile = DatasetProfile::mnist();
    let p = profile.latent_dim() as u64;
    let d = decoder_elements(&profile);
    let labels = desk.bundle()?.train_labels.clone();
    let mut totals = Vec::new();
    for v in [Variant::Full, Variant::Regular] {
        let (art, _) = desk.run(v, 0)?;
        let want = expected_ledger(&art.config, &art.partition, &labels, &art.trace, p, d);
        let got = LedgerTotals::of(&art.ledger);
        if got != want || ledger_total(&art.ledger, &LedgerFilter::all()) != want.total() {
            return Err(format!("{v:?}: ledger {got:?}, closed form {want:?}"));
        }
        totals.push((got.total(), art.trace.clone(), art.config.clone()));
    }
    if totals[0].1 != totals[1].1 {
        return Err("singular and regular runs selected different clients".into());
    }
    let cfg = &totals[0].2;
    let diff = totals[1].0 - totals[0].0;
    let formula = 4 * d * (cfg.rounds * cfg.participants - cfg.clients) as u64;
    check(
        diff == formula,
        format!(
            "singular {} B and regular {} B equal the closed form; regular - singular = {diff} B, 4*{d}*({}*{}-{}) = {formula} B",
            totals[0].0, totals[1].0, cfg.rounds, cfg.participants, cfg.clients
        ),
    )
}

fn desk_efficacy(desk: &mut Desk) -> Outcome {
    let (tuned, t1, a) = desk.mean_accuracy(Variant::Full)?;
    let (plain, t2, b) = desk.mean_accuracy(Variant::NoFinetune)?;
    let minutes = (t1 + t2) / 60.0;
    check(
        tuned - plain >= 2.0 && minutes < 30.0,
        format!(
            "fine-tuned {tuned:.2}% {a:.2?} vs no fine-tuning {plain:.2}% {b:.2?}: gain {:.2} pp (need >= 2); {minutes:.1} min",
            tuned - plain
        ),
    )
}

fn dm_ablation(desk: &mut Desk) -> Outcome {
    let (full, _, a) = desk.mean_accuracy(Variant::Full)?;
    let (elbo, _, b) = desk.mean_accuracy(Variant::ElboOnly)?;
    check(
        full >= elbo,
        format!("full objective {full:.2}% {a:.2?} vs reconstruction+KL only {elbo:.2}% {b:.2?}"),
    )
}

fn memory_schedule() -> Outcome {
    let mut checked = 0;
    for profile in [DatasetProfile::mnist(), DatasetProfile::tiny(10)] {
        let p = profile.latent_dim();
        let decoder = build_vtc_decoder::<f32>(&profile, p, 0).map_err(|e| e.to_string())?;
        for arch in ArchCluster::zoo(6).map_err(|e| e.to_string())? {
            let model = build_local_model::<f32>(arch, &profile, p, 0).map_err(|e| e.to_string())?;
            for batch in [1, 16, 64, 256] {
                let e = memory_entry(&model, &decoder, &profile.input, batch).map_err(|e| e.to_string())?;
                if e.alternating_peak > e.simultaneous {
                    return Err(format!(
                        "architecture {} batch {batch}: alternating {} B > simultaneous {} B",
                        arch.id, e.alternating_peak, e.simultaneous
                    ));
                }
                checked += 1;
            }
        }
    }
    check(
        true,
        format!("alternating peak <= simultaneous for all {checked} architecture/batch/profile cases"),
    )
}

fn determinism(desk: &mut Desk) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let cfg = desk_config(Variant::Full, 0);
    let bundle = desk.bundle()?.clone();
    let part = dirichlet_partition(&bundle.train_labels, cfg.clients, 0.1, 0).map_err(|e| e.to_string())?;
    let again = run_experiment("Full", &cfg, &bundle, &part).map_err(|e| e.to_string())?;
    write_run_dir(&again, dirs[1].path()).map_err(|e| e.to_string())?;
    let (first, _) = desk.run(Variant::Full, 0)?;
    write_run_dir(first, dirs[0].path()).map_err(|e| e.to_string())?;
    let mut same = Vec::new();
    for f in ["metrics.jsonl", "ledger.tsv"] {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between identical runs"));
        }
        same.push(format!("{f} ({} B)", a.len()));
    }
    check(
        true,
        format!("two desk runs with seed 0 wrote identical {}", same.join(" and ")),
    )
}

fn synthetic_contracts(desk: &mut Desk) -> Outcome {
    let (art, _) = desk.run(Variant::Full, 0)?;
    let prototypes: PrototypeMap<f32> = art
        .globals
        .prototypes
        .iter()
        .map(|(&y, c)| (y, c.iter().map(|&v| v as f32).collect()))
        .collect();
    let sigma = StdVec::floored(art.globals.sigma.iter().map(|&v| v as f32).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut notes = Vec::new();
    for s in [100usize, 101, 7] {
        let synth = generate_synthetic(&art.decoder, &prototypes, &sigma, s, &mut rng).map_err(|e| e.to_string())?;
        if synth.labels.len() != s || synth.images.batch() != s {
            return Err(format!("asked for {s} samples, got {}", synth.labels.len()));
        }
        let mut counts: BTreeMap<usize, usize> = prototypes.keys().map(|&y| (y, 0)).collect();
        for y in &synth.labels {
            *counts.get_mut(y).ok_or(format!("label {y} has no prototype"))? += 1;
        }
        let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        if hi - lo > 1 {
            return Err(format!("S={s}: per-class counts {lo}..{hi}"));
        }
        if synth.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(format!("S={s}: pixel outside [0, 1]"));
        }
        notes.push(format!("S={s} counts {lo}..{hi}"));
    }

    let draws = 10_000;
    let p64: PrototypeMap<f64> = art.globals.prototypes.iter().map(|(&y, c)| (y, c.clone())).collect();
    let s64 = StdVec::floored(art.globals.sigma.clone());
    let (latents, labels) = sample_latents(&p64, &s64, draws, &mut rng).map_err(|e| e.to_string())?;
    let p = s64.len();
    let mut worst = 0.0f64;
    for (&y, c) in &p64 {
        let rows: Vec<&[f64]> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == y)
            .map(|(i, _)| latents.sample(i))
            .collect();
        let n = rows.len() as f64;
        for j in 0..p {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let se = s64.values()[j] / n.sqrt();
            worst = worst.max((mean - c[j]).abs() / se);
        }
    }
    notes.push(format!(
        "{draws} latent draws over {} classes, largest mean deviation {worst:.2} SE",
        p64.len()
    ));
    check(worst <= 5.0, notes.join("; "))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut desk = Desk {
        bundle: None,
        runs: BTreeMap::new(),
    };
    let names = [
        "analytic KL vs Monte Carlo",
        "gradient checks",
        "aggregation oracles",
        "ledger exactness",
        "desk-scale fine-tuning gain",
        "distribution-matching ablation",
        "memory schedule",
        "determinism",
        "synthetic-dataset contracts",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = match id {
            1 => analytic_kl(),
            2 => gradient_checks(),
            3 => aggregation_oracles(),
            4 => ledger_exactness(&mut desk),
            5 => desk_efficacy(&mut desk),
            6 => dm_ablation(&mut desk),
            7 => memory_schedule(),
            8 => determinism(&mut desk),
            _ => synthetic_contracts(&mut desk),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id} ({name}): PASS  {d}  [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL  {d}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
