//! Acceptance suite for the primary component. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! Oracles here are written from the formulas directly, in f64 loops over
//! plain vectors, without calling the library code they check.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use amk_core::ablation::{self, Adapters, AblationSetup};
use amk_core::attention::{
    self, AgeBounds, AlphaField, DirectionEntry, FeatureBlock, KvPair, SiteFeatures, SiteKey, TokenLayout,
};
use amk_core::backend::{self, BackendConfig, BackendRegistry, GatedBackend, ImageCodec};
use amk_core::edit;
use amk_core::eval::{self, PixelEmbedder, Report};
use amk_core::pipeline::{MixingConfig, Preset, Strategy};
use amk_core::prompt::{self, ConditionCatalog, EditRequest, RefineMode};
use amk_core::rf::{self, Conditioning, Direction, StepSchedule, TrajectoryState};
use amk_core::sar::{self, SarSettings};
use amk_core::store::CrashPoint;
use amk_core::toy::{ToyBackend, ToyModelSpec};
use amk_core::ExecMode;
use amk_tree::{server, JobState, Runtime, Tree, TreeError, TreeManifest, TreeSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const INSTANCES: u64 = 128;
const ORACLE_TOL: f64 = 1e-5;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("attention-math oracle suite", c01_oracles),
        ("value projection identities", c02_identities),
        ("text masking contract", c03_text_mask),
        ("key modulation properties", c04_key_modulation),
        ("SAR weight endpoints", c05_sar_weight),
        ("solver order", c06_solver_order),
        ("inversion/denoising round trip", c07_round_trip),
        ("ablation ladder executability", c08_ablation),
        ("eval fixtures", c09_eval_fixtures),
        ("tree service state machine", c10_tree_service),
        ("offline primary suite", c11_offline),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  [{:>2}] {name} ({secs:.2}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  [{:>2}] {name} ({secs:.2}s) {why}", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

/// Plain nested-vector view of a block: `[head][token][channel]`.
type Raw = Vec<Vec<Vec<f64>>>;

fn raw(b: &FeatureBlock) -> Raw {
    let l = b.layout();
    (0..l.heads)
        .map(|h| (0..l.total_tokens()).map(|i| b.token(h, i).iter().map(|&x| x as f64).collect()).collect())
        .collect()
}

fn block_from(layout: TokenLayout, r: &Raw) -> FeatureBlock {
    FeatureBlock::from_fn(layout, |(h, i, c)| r[h][i][c] as f32).unwrap()
}

fn random_layout(rng: &mut ChaCha8Rng) -> TokenLayout {
    let tokens = rng.random_range(2..=8);
    let text = rng.random_range(1..tokens);
    TokenLayout::new(text, tokens - text, rng.random_range(1..=4), rng.random_range(1..=8)).unwrap()
}

fn random_raw(rng: &mut ChaCha8Rng, l: TokenLayout) -> Raw {
    (0..l.heads)
        .map(|_| {
            (0..l.total_tokens())
                .map(|_| (0..l.head_dim).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect())
                .collect()
        })
        .collect()
}

/// Random values with every token vector's squared norm at least 0.25.
fn well_conditioned(rng: &mut ChaCha8Rng, l: TokenLayout) -> Raw {
    let mut r = random_raw(rng, l);
    for head in r.iter_mut() {
        for tok in head.iter_mut() {
            while tok.iter().map(|x| x * x).sum::<f64>() < 0.25 {
                for x in tok.iter_mut() {
                    *x = rng.random_range(-1.0f32..1.0) as f64;
                }
            }
        }
    }
    r
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn oracle_alpha(inv: &Raw, edit: &Raw) -> Vec<Vec<f64>> {
    inv.iter()
        .zip(edit)
        .map(|(hi, he)| hi.iter().zip(he).map(|(i, e)| dot(i, e) / dot(e, e)).collect())
        .collect()
}

fn oracle_project(inv: &Raw, edit: &Raw, text: usize) -> Raw {
    let alpha = oracle_alpha(inv, edit);
    edit.iter()
        .enumerate()
        .map(|(h, he)| {
            he.iter()
                .enumerate()
                .map(|(i, e)| {
                    let a = if i < text { 1.0 } else { alpha[h][i] };
                    e.iter().map(|x| a * x).collect()
                })
                .collect()
        })
        .collect()
}

fn oracle_softmax_rows(ke: &[Vec<f64>], ki: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = ke[0].len() as f64;
    ke.iter()
        .map(|q| {
            let s: Vec<f64> = ki.iter().map(|k| dot(q, k) / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect()
}

fn oracle_modulate(ke: &Raw, ki: &Raw, g: f64) -> Raw {
    ke.iter()
        .zip(ki)
        .map(|(he, hi)| {
            let a = oracle_softmax_rows(he, hi);
            he.iter()
                .enumerate()
                .map(|(i, row)| {
                    (0..row.len())
                        .map(|c| row[c] + g * (0..hi.len()).map(|j| a[i][j] * hi[j][c]).sum::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn max_err(got: &Raw, want: &Raw) -> f64 {
    got.iter()
        .flatten()
        .flatten()
        .zip(want.iter().flatten().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn rel_err(got: &Raw, want: &Raw) -> f64 {
    got.iter()
        .flatten()
        .flatten()
        .zip(want.iter().flatten().flatten())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn budget(start: Instant, limit: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    ensure!(spent < limit, "took {spent:?}, budget {limit:?}");
    Ok(())
}

fn toy() -> ToyBackend {
    ToyBackend::new(ToyModelSpec::default())
}

fn write_portrait(dir: &Path, seed: u64) -> PathBuf {
    let p = dir.join(format!("portrait-{seed}.png"));
    fs::write(&p, backend::png_bytes(&toy().sample_portrait(seed)).unwrap()).unwrap();
    p
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

// ---------------------------------------------------------------- criteria

fn c01_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_layout(&mut rng);
        let inv = random_raw(&mut rng, l);
        let edit = well_conditioned(&mut rng, l);
        let (vi, ve) = (block_from(l, &inv), block_from(l, &edit));

        let alpha = attention::compute_alpha(&vi, &ve).unwrap();
        let want = oracle_alpha(&inv, &edit);
        let e = (0..l.heads)
            .flat_map(|h| (0..l.total_tokens()).map(move |i| (h, i)))
            .map(|(h, i)| (alpha.get(h, i) as f64 - want[h][i]).abs())
            .fold(0.0, f64::max);
        note("compute_alpha", e);

        for mask in [false, true] {
            let got = raw(&attention::project_value(&vi, &ve, mask).unwrap());
            let text = if mask { l.text_tokens } else { 0 };
            note("project_value", max_err(&got, &oracle_project(&inv, &edit, text)));
        }

        let ki = random_raw(&mut rng, l);
        let ke = random_raw(&mut rng, l);
        let g = rng.random_range(-2.0f32..2.0);
        let got = raw(&attention::modulate_key(&block_from(l, &ke), &block_from(l, &ki), g).unwrap());
        note("modulate_key", max_err(&got, &oracle_modulate(&ke, &ki, g as f64)));

        let sites: Vec<SiteKey> = (0..rng.random_range(1..=3)).map(|s| SiteKey::new(s, rng.random_range(0..3))).collect();
        let cluster = |rng: &mut ChaCha8Rng, n: usize| -> Vec<BTreeMap<SiteKey, (Raw, Raw)>> {
            (0..n)
                .map(|_| sites.iter().map(|s| (*s, (random_raw(rng, l), random_raw(rng, l)))).collect())
                .collect()
        };
        let (n_old, n_young) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let old = cluster(&mut rng, n_old);
        let young = cluster(&mut rng, n_young);
        let to_features = |c: &[BTreeMap<SiteKey, (Raw, Raw)>]| -> Vec<SiteFeatures> {
            c.iter()
                .map(|m| {
                    m.iter()
                        .map(|(s, (k, v))| {
                            (
                                *s,
                                KvPair {
                                    k: block_from(l, k),
                                    v: block_from(l, v),
                                },
                            )
                        })
                        .collect()
                })
                .collect()
        };
        let lo = rng.random_range(20.0f32..50.0);
        let hi = lo + rng.random_range(1.0f32..40.0);
        let dir = attention::compute_aging_direction(&to_features(&old), &to_features(&young), AgeBounds::new(lo, hi).unwrap()).unwrap();
        for s in &sites {
            for (pick, got) in [(0usize, &dir.get(*s).unwrap().delta_k), (1, &dir.get(*s).unwrap().delta_v)] {
                let mean = |c: &[BTreeMap<SiteKey, (Raw, Raw)>], h: usize, i: usize, ch: usize| {
                    c.iter()
                        .map(|m| if pick == 0 { m[s].0[h][i][ch] } else { m[s].1[h][i][ch] })
                        .sum::<f64>()
                        / c.len() as f64
                };
                let want: Raw = (0..l.heads)
                    .map(|h| {
                        (0..l.total_tokens())
                            .map(|i| (0..l.head_dim).map(|ch| mean(&old, h, i, ch) - mean(&young, h, i, ch)).collect())
                            .collect()
                    })
                    .collect();
                note("compute_aging_direction", max_err(&raw(got), &want));
            }
        }

        let t = rng.random_range(10.0f32..100.0);
        let w = attention::age_weight(t, lo, hi).unwrap();
        note("age_weight", (w as f64 - (t as f64 - lo as f64) / (hi as f64 - lo as f64)).abs());

        let (k, v, dk, dv) = (
            random_raw(&mut rng, l),
            random_raw(&mut rng, l),
            random_raw(&mut rng, l),
            random_raw(&mut rng, l),
        );
        let entry = DirectionEntry {
            delta_k: block_from(l, &dk),
            delta_v: block_from(l, &dv),
        };
        let (ks, vs) = attention::apply_aging_direction(&block_from(l, &k), &block_from(l, &v), &entry, w).unwrap();
        let shift = |a: &Raw, d: &Raw| -> Raw {
            a.iter()
                .zip(d)
                .map(|(ha, hd)| {
                    ha.iter()
                        .zip(hd)
                        .map(|(ta, td)| ta.iter().zip(td).map(|(x, y)| x + w as f64 * y).collect())
                        .collect()
                })
                .collect()
        };
        note("apply_aging_direction", max_err(&raw(&ks), &shift(&k, &dk)).max(max_err(&raw(&vs), &shift(&v, &dv))));
    }
    budget(start, Duration::from_secs(10))?;
    ensure!(worst.len() == 6, "only {} operations checked", worst.len());
    for (name, e) in &worst {
        ensure!(*e <= ORACLE_TOL, "{name}: max abs error {e:.3e} > {ORACLE_TOL:.0e}");
    }
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    Ok(format!("{INSTANCES} instances; {}", summary.join(" ")))
}

fn c02_identities() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let l = random_layout(&mut rng);
        let edit = well_conditioned(&mut rng, l);
        let ve = block_from(l, &edit);

        let same = attention::compute_alpha(&ve, &ve).unwrap();
        let e1 = same.values().iter().map(|a| (*a as f64 - 1.0).abs()).fold(0.0, f64::max);
        worst[0] = worst[0].max(e1);

        // Rotate channel pairs by 90 degrees: (a, b) -> (-b, a), exactly orthogonal.
        let ortho: Raw = edit
            .iter()
            .map(|h| {
                h.iter()
                    .map(|t| {
                        let mut o = vec![0.0; t.len()];
                        for p in 0..t.len() / 2 {
                            o[2 * p] = -t[2 * p + 1];
                            o[2 * p + 1] = t[2 * p];
                        }
                        o
                    })
                    .collect()
            })
            .collect();
        let zero = attention::compute_alpha(&block_from(l, &ortho), &ve).unwrap();
        worst[1] = worst[1].max(zero.values().iter().map(|a| a.abs() as f64).fold(0.0, f64::max));

        let inv = random_raw(&mut rng, l);
        let vi = block_from(l, &inv);
        let base = raw(&attention::project_value(&vi, &ve, false).unwrap());
        for c in [0.5f64, -2.0, 3.7, 1e3] {
            let scaled: Raw = edit.iter().map(|h| h.iter().map(|t| t.iter().map(|x| x * c).collect()).collect()).collect();
            let got = raw(&attention::project_value(&vi, &block_from(l, &scaled), false).unwrap());
            worst[2] = worst[2].max(rel_err(&got, &base));
        }
    }
    ensure!(worst[0] <= 1e-6, "alpha(V, V) deviates from 1 by {:.3e}", worst[0]);
    ensure!(worst[1] <= 1e-6, "alpha under orthogonality reaches {:.3e}", worst[1]);
    ensure!(worst[2] <= 1e-6, "projection changes under edit scaling by {:.3e} (relative)", worst[2]);
    Ok(format!("|alpha-1|={:.1e} |alpha_orth|={:.1e} scale_rel={:.1e}", worst[0], worst[1], worst[2]))
}

fn c03_text_mask() -> Outcome {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let l = random_layout(&mut rng);
        let a = ndarray::Array2::from_shape_fn((l.heads, l.total_tokens()), |_| rng.random_range(-3.0f32..3.0));
        let field = AlphaField::new(l, a.clone()).unwrap();
        let masked = attention::mask_text_alpha(&field);
        for h in 0..l.heads {
            for i in 0..l.total_tokens() {
                let got = masked.get(h, i);
                if i < l.text_tokens {
                    ensure!(got == 1.0, "text alpha at ({h},{i}) is {got}");
                } else {
                    ensure!(got.to_bits() == a[[h, i]].to_bits(), "image alpha at ({h},{i}) changed");
                }
            }
        }
    }
    Ok(format!("{INSTANCES} instances exact"))
}

fn c04_key_modulation() -> Outcome {
    let (mut row_dev, mut lin) = (0.0f64, 0.0f64);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let l = random_layout(&mut rng);
        let ke = block_from(l, &random_raw(&mut rng, l));
        let ki = block_from(l, &random_raw(&mut rng, l));
        let a = attention::alignment_matrix(&ke, &ki).unwrap();
        for row in a.lanes(ndarray::Axis(2)) {
            row_dev = row_dev.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
        }
        let k0 = attention::modulate_key(&ke, &ki, 0.0).unwrap();
        ensure!(k0 == ke, "g = 0 changed K_edit");
        let e = raw(&ke);
        let k1 = raw(&attention::modulate_key(&ke, &ki, 1.0).unwrap());
        for g in [0.25f32, -1.5, 2.0] {
            let kg = raw(&attention::modulate_key(&ke, &ki, g).unwrap());
            let want: Raw = (0..l.heads)
                .map(|h| {
                    (0..l.total_tokens())
                        .map(|i| (0..l.head_dim).map(|c| e[h][i][c] + g as f64 * (k1[h][i][c] - e[h][i][c])).collect())
                        .collect()
                })
                .collect();
            lin = lin.max(rel_err(&kg, &want));
        }
    }
    ensure!(row_dev <= 1e-6, "row sums deviate from 1 by {row_dev:.3e}");
    ensure!(lin <= 1e-6, "linearity in g off by {lin:.3e}");
    Ok(format!("row_sum_dev={row_dev:.1e} linearity={lin:.1e}"))
}

fn c05_sar_weight() -> Outcome {
    for (t, want) in [(30.0f32, 0.0f32), (70.0, 1.0), (50.0, 0.5)] {
        let w = attention::age_weight(t, 30.0, 70.0).map_err(|e| e.to_string())?;
        ensure!(w == want, "w({t}; 30, 70) = {w}, expected {want}");
    }
    Ok("0 / 1 / 0.5 exact".into())
}

fn c06_solver_order() -> Outcome {
    let start = Instant::now();
    let field = rf::affine_field(&[1], 1.0, 0.3);
    let exact = 1.3 * std::f64::consts::E - 0.3;
    let mut errs = Vec::new();
    for n in [8usize, 16, 32, 64] {
        let sched = StepSchedule::uniform(n).unwrap();
        let s0 = TrajectoryState::new(rf::scalar_latent(1.0), 0.0).unwrap();
        let end = rf::integrate(&s0, &sched, Direction::Inversion, &field, &Conditioning::default(), None).unwrap();
        errs.push((end.latent[[0]] as f64 - exact).abs());
    }
    budget(start, Duration::from_secs(5))?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    for r in &ratios {
        ensure!((3.0..=5.0).contains(r), "error ratios {ratios:?} not all in [3, 5]");
    }
    let rel = errs[3] / exact;
    ensure!(rel < 1e-3, "N=64 relative error {rel:.3e}");
    Ok(format!("ratios {:.2}/{:.2}/{:.2}, N=64 rel {rel:.1e}", ratios[0], ratios[1], ratios[2]))
}

fn pixel_l1(a: &[u8], b: &[u8]) -> Result<f64, String> {
    let da = image::load_from_memory(a).map_err(|e| e.to_string())?.to_luma8();
    let db = image::load_from_memory(b).map_err(|e| e.to_string())?.to_luma8();
    Ok(da.pixels().zip(db.pixels()).map(|(x, y)| (x.0[0] as f64 - y.0[0] as f64).abs()).sum())
}

fn c07_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = toy();
    let input = write_portrait(tmp.path(), 0);
    let z = toy.encode_image(&backend::read_image(&input).unwrap()).unwrap();
    let sched = StepSchedule::uniform(16).unwrap();
    let prompt = edit::source_prompt("person", 30.0);
    let inv = edit::invert(&toy, &z, &sched, &Conditioning::prompt(&prompt)).map_err(|e| e.to_string())?;
    let none = edit::denoise(&toy, &inv, &sched, &Conditioning::prompt(&prompt), &MixingConfig::default()).unwrap();
    let num: f64 = none.latent.iter().zip(z.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    let den: f64 = z.iter().map(|b| (*b as f64).powi(2)).sum();
    let rel = (num / den).sqrt();
    ensure!(rel < 5e-2, "reconstruction relative error {rel:.3e}");

    let direction = sar::synthetic_direction(&input, &toy, &sched, &SarSettings::default(), &tmp.path().join("cache"), ExecMode::default())
        .map_err(|e| e.to_string())?;
    let shift = edit::sar_shift(Arc::new(direction.direction), 70.0).unwrap();
    let render = |cfg: &MixingConfig| edit::render(&toy, &inv, &sched, &prompt, cfg).map(|(png, _)| png).map_err(|e| e.to_string());
    let none_png = render(&MixingConfig::default())?;
    let rv = pixel_l1(&render(&MixingConfig::with_strategy(Strategy::ReplaceV))?, &none_png)?;
    let full = pixel_l1(&render(&Preset::Full.config(1.0, Some(shift)))?, &none_png)?;
    ensure!(rv < full, "replace_v differs by {rv}, full preset by {full}; expected replace_v < full");
    Ok(format!("rel {rel:.1e}; L1 vs none: replace_v {rv} < full {full}"))
}

fn c08_ablation() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let toy = toy();
    let input = write_portrait(tmp.path(), 0);
    let setup = AblationSetup {
        condition: "hair loss".into(),
        ..AblationSetup::default()
    };
    let adapters = Adapters {
        face: Some(&PixelEmbedder),
        ..Default::default()
    };
    let run = ablation::run_ablation(&toy, &input, &setup, &tmp.path().join("cache"), &adapters, ExecMode::default())
        .map_err(|e| e.to_string())?;
    budget(start, Duration::from_secs(60))?;
    let expected = [
        "RF-Solver-Edit (baseline)",
        "+ Att. Mixing (Value only)",
        "+ Text Embedding Masking",
        "+ Att. Mixing (Value & Key)",
        "+ Simulated Aging Regularization",
    ];
    let labels: Vec<&str> = run.report.rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == expected, "report rows {labels:?}");
    ensure!(run.rows.len() == 5, "{} rows", run.rows.len());
    for i in 0..5 {
        for j in i + 1..5 {
            ensure!(run.rows[i].png != run.rows[j].png, "outputs {i} and {j} are identical");
        }
    }
    let text = run.report.to_text();
    let order: Vec<usize> = expected.iter().map(|l| text.find(l).unwrap_or(usize::MAX)).collect();
    ensure!(order.windows(2).all(|w| w[0] < w[1]), "text report out of order");
    Ok("5 presets, pairwise distinct, ladder order".into())
}

fn c09_eval_fixtures() -> Outcome {
    let mut checked = 0;
    for table in ["table1", "table3"] {
        let records = eval::read_jsonl(&fixture(&format!("{table}.jsonl"))).map_err(|e| e.to_string())?;
        let report = Report::from_records(&records);
        for (ext, got) in [("txt", report.to_text()), ("csv", report.to_csv())] {
            let golden = fs::read(fixture(&format!("{table}.{ext}"))).map_err(|e| e.to_string())?;
            ensure!(got.as_bytes() == golden.as_slice(), "{table}.{ext} differs from golden:\n{got}");
            checked += 1;
        }
    }
    Ok(format!("{checked} golden files byte-identical"))
}

fn c10_tree_service() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = write_portrait(tmp.path(), 0);
    let dir = tmp.path().join("tree");
    let settings = TreeSettings {
        steps: 8,
        sar_cluster_size: 2,
        ..TreeSettings::default()
    };
    drop(Tree::create(&dir, &input, "person", 30.0, "toy", settings).map_err(|e| e.to_string())?);
    let rt = Runtime::new(GatedBackend::new(Arc::new(toy())));
    let h = server::serve(&dir, "127.0.0.1:0".parse().unwrap(), rt).map_err(|e| e.to_string())?;
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent
        .post(format!("{}/branch", h.url()))
        .send_json(json!({"parent_id": "root", "condition": "alcoholism", "age_target": 60}))
        .map_err(|e| e.to_string())?;
    ensure!(resp.status().as_u16() == 202, "POST /branch answered {}", resp.status());
    let body: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
    let job = body["job_id"].as_str().ok_or("no job id")?.to_string();
    let mut trace: Vec<String> = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let v: Value = agent
            .get(format!("{}/jobs/{job}", h.url()))
            .call()
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        let s = v["state"].as_str().unwrap_or("?").to_string();
        if trace.last() != Some(&s) {
            trace.push(s.clone());
        }
        if s == "done" || s == "failed" {
            break;
        }
        ensure!(Instant::now() < deadline, "job stuck at {trace:?}");
        std::thread::sleep(Duration::from_millis(5));
    }
    h.shutdown();
    let rank = |s: &str| ["pending", "running", "done"].iter().position(|x| *x == s);
    ensure!(trace.last().map(String::as_str) == Some("done"), "trace {trace:?}");
    ensure!(
        trace.windows(2).all(|w| rank(&w[0]) < rank(&w[1])) && trace.iter().all(|s| rank(s).is_some()),
        "trace {trace:?} is not a forward walk of pending -> running -> done"
    );

    // Crash injection during manifest writes.
    let (tree, _) = Tree::open(&dir).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for k in 0..20 {
        let before = fs::read(dir.join("manifest.json")).map_err(|e| e.to_string())?;
        let crash = match rng.random_range(0..3) {
            0 => CrashPoint::DuringWrite(rng.random_range(0..before.len() + 64)),
            1 => CrashPoint::BeforeSync,
            _ => CrashPoint::BeforeRename,
        };
        let r = tree.update_with_fault(Some(crash), |m| {
            m.subject_desc = format!("person rev {k}");
            m.nodes[0].extra.insert("note".into(), json!(k));
            Ok(())
        });
        ensure!(matches!(r, Err(TreeError::Crashed(_))), "kill point {crash:?} did not fire");
        let after = fs::read(dir.join("manifest.json")).map_err(|e| e.to_string())?;
        let parsed = TreeManifest::from_bytes(&after).map_err(|e| format!("kill point {k} ({crash:?}): {e}"))?;
        ensure!(after == before, "kill point {k} ({crash:?}) altered the manifest");
        ensure!(parsed.nodes.iter().any(|n| n.job_state == JobState::Done), "lost nodes");
        tree.update_with_fault(None, |m| {
            m.next_id += 0;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    }
    TreeManifest::load(&dir).map_err(|e| e.to_string())?;
    Ok(format!("trace {}; 20 kill points survived", trace.join(" -> ")))
}

fn c11_offline() -> Outcome {
    let registry = BackendRegistry::new();
    let cfg = BackendConfig::default();
    ensure!(
        backend::probe(&cfg, &registry).map_err(|e| e.to_string())?.is_none(),
        "a real backbone is configured by default"
    );
    let gated = backend::load(&cfg, &registry).map_err(|e| e.to_string())?;
    ensure!(gated.descriptor().name == "toy", "default backend is {}", gated.descriptor().name);
    let req = EditRequest::new("person", 60.0, "hair loss").map_err(|e| e.to_string())?;
    let p = prompt::refine_prompt(&req, RefineMode::Llm, &ConditionCatalog::builtin(), None).map_err(|e| e.to_string())?;
    ensure!(p.mode == RefineMode::Template && p.warning.is_some(), "LLM mode without a client did not fall back");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = write_portrait(tmp.path(), 3);
    let clusters = sar::build_clusters(&input, &[30.0, 70.0], 2, &sar::ClusterProvider::Synthetic { seed: 0 }, tmp.path())
        .map_err(|e| e.to_string())?;
    ensure!(
        clusters.iter().all(|c| c.source == sar::ClusterSource::Synthetic && c.images.len() == 2),
        "default SAR clusters are not synthetic"
    );
    let ws = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../Cargo.toml")).map_err(|e| e.to_string())?;
    ensure!(!ws.contains("ui"), "workspace pulls in a UI member");
    Ok("toy backend, template prompts, synthetic SAR, loopback HTTP only".into())
}
