//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use beacon_ptq::beacon::{beacon_channel, beacon_matrix, BeaconConfig, Calibration, ColumnOrder};
use beacon_ptq::geometry::{norm, norm_sq, optimal_scale, projected_residual, reduce_inputs, residual, Matrix};
use beacon_ptq::grid::{IntegerGrid, Levels};
use beacon_ptq::harness::{evaluate, gen_synthetic, write_layer, SyntheticLayer, SyntheticSpec};
use beacon_ptq::oracle::{alignment, exhaustive_best, rtn_matrix, rtn_refit_matrix, verify_fixed_point, DEFAULT_LIMIT};
use beacon_ptq::tensor_io::{
    read_quantized, read_tensor, write_quantized, write_tensor, QuantizedColumn, QuantizedMatrixFile, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SUITE_SEEDS: std::ops::RangeInclusive<u64> = 42..=51;

type Outcome = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn suite() -> Vec<SyntheticLayer> {
    SUITE_SEEDS
        .map(|s| gen_synthetic(&SyntheticSpec::default_suite(s)).expect("valid suite spec"))
        .collect()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    let data: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_row_major(m, n, &data)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `x + sigma * noise`.
fn perturbed(x: &Matrix, noise: &Matrix, sigma: f64) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..x.cols())
        .map(|j| x.col(j).iter().zip(noise.col(j)).map(|(a, b)| a + sigma * b).collect())
        .collect();
    Matrix::from_columns(x.rows(), &cols)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn monotone_sweeps(layers: &[SyntheticLayer]) -> Outcome {
    let start = Instant::now();
    let mut channels = 0;
    let mut worst_drop: f64 = 0.0;
    for (k, layer) in layers.iter().enumerate() {
        for ec in [false, true] {
            let cfg = BeaconConfig {
                error_correction: ec,
                ..BeaconConfig::default()
            };
            let xt = ec.then_some(&layer.x_tilde);
            let qm = beacon_matrix(&layer.x, xt, &layer.w, &cfg).map_err(|e| e.to_string())?;
            for (j, ch) in qm.channels.iter().enumerate() {
                channels += 1;
                for pair in ch.e_trace.windows(2) {
                    let drop = pair[0] - pair[1];
                    worst_drop = worst_drop.max(drop);
                    ensure(drop <= 1e-9, || {
                        format!("seed index {k}, ec {ec}, channel {j}: trace {:?}", ch.e_trace)
                    })?;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{channels} channels, largest decrease {worst_drop:.1e}, {secs:.2} s"
    ))
}

fn fixed_points(layers: &[SyntheticLayer]) -> Outcome {
    let mut checked = 0;
    for layer in layers {
        for (ec, bits) in [(false, 2), (false, 4), (true, 3)] {
            let cfg = BeaconConfig {
                error_correction: ec,
                ..BeaconConfig::with_bits(bits).unwrap()
            };
            let xt = ec.then_some(&layer.x_tilde);
            let qm = beacon_matrix(&layer.x, xt, &layer.w, &cfg).map_err(|e| e.to_string())?;
            for (j, ch) in qm.channels.iter().enumerate() {
                let ok = verify_fixed_point(&layer.x, xt, layer.w.col(j), &ch.q, ch.scale)
                    .map_err(|e| e.to_string())?;
                ensure(ok, || format!("channel {j} (bits {bits}, ec {ec}) c = {}", ch.scale))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} channels satisfy the fixed point at 1e-12"))
}

fn oracle_sandwich() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut gap_sum = 0.0;
    let mut hits = 0;
    for inst in 0..200 {
        let n = 2 + inst % 4;
        let bits = 1 + (inst / 4) % 2;
        let ec = inst % 3 == 0;
        let x = gaussian_matrix(&mut rng, 2 * n, n);
        let noise = gaussian_matrix(&mut rng, 2 * n, n);
        let x_tilde = perturbed(&x, &noise, 0.05);
        let xt = ec.then_some(&x_tilde);
        let w = gaussian_vec(&mut rng, n);
        let levels = Levels::from_bits(bits as u8).unwrap();
        let cal = Calibration::prepare(&x, xt, ColumnOrder::NormSorted).map_err(|e| e.to_string())?;
        let base = BeaconConfig {
            levels,
            error_correction: ec,
            ..BeaconConfig::default()
        };
        let greedy = beacon_channel(&cal, &w, &BeaconConfig { max_loops: 0, ..base }).map_err(|e| e.to_string())?;
        let fin = beacon_channel(&cal, &w, &base).map_err(|e| e.to_string())?;
        let grid = IntegerGrid::for_channel(&w, levels).map_err(|e| e.to_string())?;
        let best = exhaustive_best(&x, xt, &w, &grid, DEFAULT_LIMIT).map_err(|e| e.to_string())?;

        let g = alignment(&x, xt, &w, &greedy.q).ok_or_else(|| format!("instance {inst}: greedy output is zero"))?;
        let f = alignment(&x, xt, &w, &fin.q).ok_or_else(|| format!("instance {inst}: final output is zero"))?;
        ensure(g <= f && f <= best.cos_star, || {
            format!("instance {inst}: greedy {g}, final {f}, oracle {}", best.cos_star)
        })?;
        gap_sum += best.cos_star - f;
        if fin.q == best.q_star {
            hits += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "200 instances, mean oracle gap {:.3e}, oracle code matched {hits}/200, {secs:.2} s",
        gap_sum / 200.0
    ))
}

fn reduction_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(1..=12);
        let m = n + rng.random_range(0..=12);
        let x = gaussian_matrix(&mut rng, m, n);
        let sigma = [0.0, 0.01, 0.3][case % 3];
        let noise = gaussian_matrix(&mut rng, m, n);
        let x_tilde = perturbed(&x, &noise, sigma);
        let w = gaussian_vec(&mut rng, n);
        let q: Vec<i32> = (0..n).map(|_| rng.random_range(-4..=4)).collect();
        let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        for xt in [None, Some(&x_tilde)] {
            let pair = reduce_inputs(&x, xt).map_err(|e| e.to_string())?;
            match (alignment(&x, xt, &w, &q), pair.cosine(&w, &qf)) {
                (Some(raw), Some(red)) => {
                    let rel = (raw - red).abs() / raw.abs().max(f64::MIN_POSITIVE);
                    worst = worst.max(rel);
                    ensure(rel <= 1e-9, || format!("case {case}: raw {raw}, reduced {red}"))?;
                }
                (None, None) => {}
                (a, b) => return Err(format!("case {case}: raw {a:?}, reduced {b:?}")),
            }
        }
    }
    Ok(format!("50 cases with and without X~, worst relative gap {worst:.1e}"))
}

fn scale_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_identity: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=16);
        let y = gaussian_vec(&mut rng, n);
        let v = gaussian_vec(&mut rng, n);
        let c = optimal_scale(&y, &v).map_err(|e| e.to_string())?;
        let r = residual(&y, &v, c);
        let gap = (r - projected_residual(&y, &v)).abs() / norm_sq(&y);
        worst_identity = worst_identity.max(gap);
        ensure(gap <= 1e-6, || format!("case {case}: identity gap {gap}"))?;
        for _ in 0..10 {
            let delta = rng.random_range(1e-3..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let other = residual(&y, &v, c + delta);
            ensure(other > r, || format!("case {case}: c {c} residual {r}, c+{delta} residual {other}"))?;
        }
    }
    Ok(format!(
        "100 cases x 10 perturbations, worst identity gap {worst_identity:.1e}"
    ))
}

fn mean_rel_error(layers: &[SyntheticLayer], f: impl Fn(&SyntheticLayer) -> beacon_ptq::Result<beacon_ptq::QuantizedMatrix>) -> Result<f64, String> {
    let mut sum = 0.0;
    for l in layers {
        let qm = f(l).map_err(|e| e.to_string())?;
        sum += evaluate(&l.w, &l.x, None, &qm).map_err(|e| e.to_string())?.rel_error;
    }
    Ok(sum / layers.len() as f64)
}

fn baseline_dominance(layers: &[SyntheticLayer]) -> Outcome {
    let mut summary = Vec::new();
    for bits in [2u8, 3] {
        let levels = Levels::from_bits(bits).unwrap();
        let cfg = BeaconConfig::with_bits(bits).unwrap();
        let beacon = mean_rel_error(layers, |l| beacon_matrix(&l.x, None, &l.w, &cfg))?;
        let refit = mean_rel_error(layers, |l| rtn_refit_matrix(&l.x, None, &l.w, levels))?;
        let rtn = mean_rel_error(layers, |l| rtn_matrix(&l.w, levels))?;
        let margin = (rtn - beacon) / rtn;
        summary.push(format!(
            "b={bits}: beacon {beacon:.4} rtn_refit {refit:.4} rtn {rtn:.4} (margin {:.1}%)",
            100.0 * margin
        ));
        ensure(beacon <= refit && refit <= rtn, || summary.join("; "))?;
        if bits == 2 {
            ensure(margin >= 0.05, || summary.join("; "))?;
        }
    }
    Ok(summary.join("; "))
}

/// Fraction of channels whose early-stopped run ends within 6 sweeps, and
/// the histogram of executed sweeps.
fn convergence_rate(layers: &[SyntheticLayer], bits: u8) -> Result<(f64, [usize; 11]), String> {
    let cfg = BeaconConfig {
        max_loops: 10,
        early_stop: true,
        ..BeaconConfig::with_bits(bits).unwrap()
    };
    let mut within = 0;
    let mut total = 0;
    let mut hist = [0usize; 11];
    for l in layers {
        let qm = beacon_matrix(&l.x, None, &l.w, &cfg).map_err(|e| e.to_string())?;
        for ch in &qm.channels {
            total += 1;
            hist[ch.sweeps()] += 1;
            if ch.converged_at.is_some_and(|s| s <= 6) {
                within += 1;
            }
        }
    }
    Ok((within as f64 / total as f64, hist))
}

fn convergence(layers: &[SyntheticLayer]) -> Outcome {
    let default_bits = BeaconConfig::default().levels.storage_bits();
    let (frac, hist) = convergence_rate(layers, default_bits)?;
    let mut other = Vec::new();
    for bits in 1..=4u8 {
        if bits != default_bits {
            other.push(format!("b={bits} {:.1}%", 100.0 * convergence_rate(layers, bits)?.0));
        }
    }
    let msg = format!(
        "b={default_bits}: {:.1}% of channels stop within 6 sweeps (need 95%); sweep histogram {hist:?}; other widths: {}",
        100.0 * frac,
        other.join(", ")
    );
    ensure(frac >= 0.95, || msg.clone())?;
    Ok(msg)
}

fn exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..50 {
        let m = rng.random_range(1..=8);
        let x = gaussian_matrix(&mut rng, m, 1);
        let w = [rng.random_range(-5.0..5.0)];
        let bits = rng.random_range(1..=8u8);
        let cal = Calibration::prepare(&x, None, ColumnOrder::NormSorted).map_err(|e| e.to_string())?;
        let ch = beacon_channel(&cal, &w, &BeaconConfig::with_bits(bits).unwrap()).map_err(|e| e.to_string())?;
        let y = x.mul_vec(&w);
        let v = x.mul_vec(&ch.dequantize());
        let resid = norm(&y.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        ensure(resid < 1e-12 * norm(&y), || format!("N=1 case {case}: residual {resid}"))?;
    }
    for case in 0..50 {
        let n = rng.random_range(2..=20);
        let bits = rng.random_range(1..=8u8);
        let levels = Levels::from_bits(bits).unwrap();
        let l = levels.count() as i32;
        let z = rng.random_range(-(l - 1)..=0);
        let mut q: Vec<i32> = (0..n).map(|_| rng.random_range(z..z + l)).collect();
        q[0] = z;
        q[1] = z + l - 1;
        let s = rng.random_range(0.01..3.0) * if case % 2 == 0 { 1.0 } else { -1.0 };
        let w: Vec<f64> = q.iter().map(|&v| s * v as f64).collect();
        let x = Matrix::identity(n);
        let cal = Calibration::prepare(&x, None, ColumnOrder::NormSorted).map_err(|e| e.to_string())?;
        let ch = beacon_channel(&cal, &w, &BeaconConfig { levels, ..BeaconConfig::default() })
            .map_err(|e| e.to_string())?;
        let rec = ch.dequantize();
        let resid = norm(&w.iter().zip(&rec).map(|(a, b)| a - b).collect::<Vec<_>>());
        ensure(resid < 1e-12 * norm(&w), || {
            format!("on-grid case {case}: q {q:?} got {:?} residual {resid}", ch.q)
        })?;
    }
    Ok("50 single-coordinate and 50 on-grid identity channels reconstruct exactly".into())
}

fn run_quantize(files: &beacon_ptq::harness::LayerFiles, dir: &Path, tag: &str, threads: &str) -> Result<(Vec<u8>, serde_json::Value), String> {
    let out = dir.join(format!("{tag}.bcnq"));
    let report = dir.join(format!("{tag}.json"));
    let status = Command::new(env!("CARGO_BIN_EXE_beacon"))
        .arg("quantize")
        .arg("--weights")
        .arg(&files.weights)
        .arg("--calib")
        .arg(&files.calib)
        .arg("--calib-tilde")
        .arg(&files.calib_tilde)
        .args(["--bits", "3", "--threads", threads, "--out"])
        .arg(&out)
        .arg("--report")
        .arg(&report)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("quantize exited with {status}"))?;
    let bytes = std::fs::read(&out).map_err(|e| e.to_string())?;
    let mut json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    json["metrics"]["wall_ms"] = serde_json::Value::Null;
    Ok((bytes, json))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let layer = gen_synthetic(&SyntheticSpec::default_suite(42)).map_err(|e| e.to_string())?;
    let files = write_layer(&layer, dir.path()).map_err(|e| e.to_string())?;
    let (a, ra) = run_quantize(&files, dir.path(), "t1", "1")?;
    let (b, rb) = run_quantize(&files, dir.path(), "t8", "8")?;
    ensure(a == b, || "BCNQ files differ between 1 and 8 threads".into())?;
    ensure(ra == rb, || "reports differ beyond wall time".into())?;
    Ok(format!("--threads 1 and --threads 8 give identical {}-byte BCNQ files and reports", a.len()))
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let ndim = rng.random_range(0..=4);
        let dims: Vec<u64> = (0..ndim).map(|_| rng.random_range(0..=5)).collect();
        let len = dims.iter().product::<u64>() as usize;
        let data: Vec<f32> = (0..len)
            .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("t{i}.bcn"));
        write_tensor(&p, &t).map_err(|e| e.to_string())?;
        let back = read_tensor(&p).map_err(|e| e.to_string())?;
        ensure(
            back.dims() == t.dims()
                && back.data().iter().map(|v| v.to_bits()).eq(t.data().iter().map(|v| v.to_bits())),
            || format!("tensor {i} changed"),
        )?;

        let bits = rng.random_range(1..=8u8);
        let n_rows = rng.random_range(0..=40usize);
        let n_cols = rng.random_range(0..=6usize);
        let columns = (0..n_cols)
            .map(|_| QuantizedColumn {
                zero_point: rng.random_range(-255..=0),
                scale: rng.sample::<f64, _>(StandardNormal) * 10f64.powi(rng.random_range(-30..30)),
                codes: (0..n_rows).map(|_| rng.random_range(0..(1u32 << bits)) as u8).collect(),
            })
            .collect();
        let qf = QuantizedMatrixFile {
            bits,
            n_rows: n_rows as u64,
            n_cols: n_cols as u64,
            columns,
        };
        let p = dir.path().join(format!("q{i}.bcnq"));
        write_quantized(&p, &qf).map_err(|e| e.to_string())?;
        let back = read_quantized(&p).map_err(|e| e.to_string())?;
        ensure(back == qf, || format!("quantized file {i} changed"))?;
        ensure(
            back.columns.iter().zip(&qf.columns).all(|(a, b)| a.scale.to_bits() == b.scale.to_bits()),
            || format!("quantized file {i} scale bits changed"),
        )?;
    }
    Ok("100 tensors and 100 quantized layers survive write/read bit-exactly".into())
}

fn main() {
    let layers = suite();
    let criteria: Vec<Criterion> = vec![
        (2, "monotone sweep trace", Box::new(|| monotone_sweeps(&layers))),
        (3, "fixed point of emitted scales", Box::new(|| fixed_points(&layers))),
        (4, "greedy <= beacon <= exhaustive oracle", Box::new(oracle_sandwich)),
        (5, "reduction equivalence", Box::new(reduction_equivalence)),
        (6, "scale optimality and projection identity", Box::new(scale_optimality)),
        (7, "baseline dominance", Box::new(|| baseline_dominance(&layers))),
        (8, "convergence within 6 sweeps", Box::new(|| convergence(&layers))),
        (9, "exactness corner cases", Box::new(exactness)),
        (10, "thread-count determinism", Box::new(determinism)),
        (11, "file round trip", Box::new(io_round_trip)),
    ];

    println!("SKIP criterion 1: full-network accuracy results are out of scope for a synthetic-layer suite");
    let mut failed = 0;
    for (id, name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed, 1 skipped", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
