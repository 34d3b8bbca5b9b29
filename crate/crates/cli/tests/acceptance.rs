//! End-to-end acceptance checks. Runs without the libtest harness so every
//! check prints its verdict line.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use treecorr::align::{gen_correlated_er, score_candidates, AlignConfig};
use treecorr::counting::{
    count_depth, estimate_otter, phi_d_series, phi_eval, phi_eval_unbounded, OTTER_ALPHA,
};
use treecorr::detect::{
    base_log_threshold, gaussian_kl_at, gaussian_kl_product, propagate, sample_z,
    z_fourth_moment_bound, DetectionTest, EventSet, Tabulation,
};
use treecorr::likelihood::{cyclic_moment, log_lr, mc_kl, mc_moment, Measure};
use treecorr::rng::{par_streams, stream};
use treecorr::spectral::{
    charlier, mixed_moment_d1, mixed_moment_limit, project_y, spectral_lr, EigenTable,
};
use treecorr::stats::{Accumulator, Estimate};
use treecorr::trees::enumerate;
use treecorr::{Model, ModelParams, Tree};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn model(lambda: f64, s: f64, d: usize) -> Model {
    Model::new(ModelParams::new(lambda, s, d).unwrap())
}

fn poisson_pmf(lambda: f64, max: usize) -> Vec<f64> {
    let mut p = vec![(-lambda).exp()];
    for l in 1..=max {
        p.push(p[l - 1] * lambda / l as f64);
    }
    p
}

fn enumerated_counts(max_n: usize, max_depth: usize) -> Vec<u64> {
    let mut counts = vec![0u64; max_n + 1];
    for t in enumerate(max_n, max_depth) {
        counts[t.size()] += 1;
    }
    counts
}

fn counting_oracle() -> Check {
    let out = Command::new(env!("CARGO_BIN_EXE_treecorr"))
        .args(["count", "--max-n", "12"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8(out.stdout).unwrap();
    let got: Vec<u64> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let want = enumerated_counts(12, 12)[1..].to_vec();
    ensure(got == want, format!("cli {got:?} vs enumeration {want:?}"))
}

fn otter_constant() -> Check {
    let est = estimate_otter(40).map_err(|e| e.to_string())?;
    let err = (est - 0.3383219).abs();
    ensure(
        err <= 2e-3,
        format!("estimate {est:.7}, |err| = {err:.2e} (alpha = {OTTER_ALPHA:.7})"),
    )
}

fn partitions(max: usize) -> Vec<u64> {
    let mut p = vec![0u64; max + 1];
    p[0] = 1;
    for part in 1..=max {
        for n in part..=max {
            p[n] += p[n - part];
        }
    }
    p
}

fn depth_counts() -> Check {
    for d in 0..=9 {
        let series = phi_d_series(d, 10);
        let enumerated = enumerated_counts(10, d);
        for n in 1..=10 {
            if series.coeff(n - 1) != BigUint::from(enumerated[n]) {
                return Err(format!(
                    "d = {d}, n = {n}: series {} vs {}",
                    series.coeff(n - 1),
                    enumerated[n]
                ));
            }
        }
    }
    let p = partitions(9);
    let a2 = count_depth(2, 10);
    for n in 1..=10 {
        if *a2.get(n) != BigUint::from(p[n - 1]) {
            return Err(format!(
                "A_(2,{n}) = {} but p({}) = {}",
                a2.get(n),
                n - 1,
                p[n - 1]
            ));
        }
    }
    Ok("d <= 9, n <= 10 match enumeration; A_2 = partitions".into())
}

fn charlier_gram() -> Check {
    let lambda = 2.0;
    let w = poisson_pmf(lambda, 300);
    let mut worst = 0.0f64;
    for m in 0..=6 {
        for k in 0..=6 {
            let g: f64 = (0..=300)
                .map(|l| w[l] * charlier(m, l, lambda) * charlier(k, l, lambda))
                .sum();
            let want = if m == k { 1.0 } else { 0.0 };
            worst = worst.max((g - want).abs());
        }
    }
    ensure(worst <= 1e-8, format!("max |G - I| = {worst:.2e}"))
}

fn dual_orthogonality() -> Check {
    let w = poisson_pmf(1.0, 4);
    let mut worst = 0.0f64;
    for l in 0..=4 {
        for k in 0..=4 {
            let sum: f64 = (0..=40)
                .map(|m| charlier(m, l, 1.0) * charlier(m, k, 1.0))
                .sum();
            let want = if l == k { 1.0 / w[l] } else { 0.0 };
            worst = worst.max((sum - want).abs());
        }
    }
    ensure(worst <= 1e-4, format!("max deviation {worst:.2e}"))
}

fn cyclic_moments() -> Check {
    let n = 100_000;
    let s: f64 = 0.4;
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |label: String, est: Estimate, target: f64| {
        let z = est.z_score(target);
        ok &= z.abs() <= 4.0;
        lines.push(format!("{label} z={z:+.2}"));
    };
    for d in [1, 2] {
        let m1 = model(1.0, s, d);
        let target2 = phi_eval(d, s * s, 200).unwrap().value;
        let est = mc_moment(&m1, 1, Measure::Alt, n, &mut stream(60 + d as u64, 0)).unwrap();
        record(format!("m=2 d={d}"), est, target2);
        let est = cyclic_moment(&m1, 3, n, &mut stream(70 + d as u64, 0)).unwrap();
        record(
            format!("m=3 d={d}"),
            est,
            phi_eval(d, s.powi(3), 200).unwrap().value,
        );
        let m2 = model(2.0, s, d);
        let est = mc_moment(&m2, 1, Measure::Alt, n, &mut stream(80 + d as u64, 0)).unwrap();
        record(format!("m=2 d={d} lambda=2"), est, target2);
    }
    ensure(ok, lines.join(", "))
}

fn spectral_equivalence() -> Check {
    let m = model(1.0, 0.4, 2);
    let table = EigenTable::new(1.0).unwrap();
    let mut rng = stream(7, 0);
    let pairs: Vec<_> = (0..50).map(|_| m.sample_null(&mut rng)).collect();
    let mut mean_err = Vec::new();
    let mut worst10 = 0.0f64;
    for b in [4, 6, 8, 10] {
        let mut total = 0.0;
        for p in &pairs {
            let approx = spectral_lr(m.params(), &table, p, b)
                .map_err(|e| e.to_string())?
                .value;
            let exact = log_lr(&m, p).map_err(|e| e.to_string())?.exp();
            let err = (approx - exact).abs();
            total += err;
            if b == 10 {
                worst10 = worst10.max(err);
            }
        }
        mean_err.push(total / pairs.len() as f64);
    }
    let monotone = mean_err.windows(2).all(|w| w[1] <= w[0]);
    ensure(
        worst10 <= 1e-3 && monotone,
        format!(
            "max err at B=10 {worst10:.2e}, mean err by B {:?}",
            mean_err
                .iter()
                .map(|e| format!("{e:.1e}"))
                .collect::<Vec<_>>()
        ),
    )
}

fn mixed_moment_rate() -> Check {
    let limit = mixed_moment_limit(&[vec![1], vec![1], vec![2]]).map_err(|e| e.to_string())?;
    let gap =
        |ms: &[usize], lambda: f64, lim: f64| (mixed_moment_d1(ms, lambda).unwrap() - lim).abs();
    let (g100, g1e4) = (gap(&[1, 1, 2], 100.0, limit), gap(&[1, 1, 2], 1e4, limit));
    let limit3 = mixed_moment_limit(&[vec![1], vec![1], vec![1]]).map_err(|e| e.to_string())?;
    let (h100, h1e4) = (gap(&[1, 1, 1], 100.0, limit3), gap(&[1, 1, 1], 1e4, limit3));
    ensure(
        (limit - 2f64.sqrt()).abs() < 1e-12 && g1e4 * 8.0 <= g100 && h1e4 * 8.0 <= h100,
        format!(
            "limit {limit:.12}; (1,1,2) gap {g100:.2e} -> {g1e4:.2e}; (1,1,1) gap {h100:.2e} -> {h1e4:.2e}"
        ),
    )
}

fn gaussian_covariance() -> Check {
    let (lambda, s) = (32.0, 0.6);
    let m = model(lambda, s, 2);
    let table = EigenTable::new(lambda).unwrap();
    let basis: Vec<Tree> = enumerate(3, 1).collect();
    let k = basis.len();
    let parts = par_streams(&mut stream(9, 0), 100_000, 16, |st, count| {
        let mut acc = vec![Accumulator::new(); k * k];
        for _ in 0..count {
            let p = m.sample_correlated(st);
            let y = project_y(&table, 1, p.left, &basis).unwrap();
            let y2 = project_y(&table, 1, p.right, &basis).unwrap();
            for i in 0..k {
                for j in 0..k {
                    acc[i * k + j].push(y[i] * y2[j]);
                }
            }
        }
        acc
    });
    let mut lines = Vec::new();
    let mut ok = true;
    for i in 0..k {
        for j in 0..k {
            let mut acc = Accumulator::new();
            for part in &parts {
                acc.merge(&part[i * k + j]);
            }
            let est = acc.estimate();
            let target = if i == j {
                s.powi(basis[i].size() as i32)
            } else {
                0.0
            };
            let z = est.z_score(target);
            ok &= z.abs() <= 4.0;
            if i == j {
                lines.push(format!("{} cov {:.4} vs {target:.4}", basis[i], est.mean));
            } else if z.abs() > 2.0 {
                lines.push(format!("{}x{} z={z:+.2}", basis[i], basis[j]));
            }
        }
    }
    ensure(ok, lines.join(", "))
}

fn kl_consistency() -> Check {
    let mut worst: f64 = 0.0;
    for d in 1..=4 {
        for s in [0.3, 0.5, 0.58] {
            let a = gaussian_kl_at(d, s, 400).map_err(|e| e.to_string())?;
            let b = gaussian_kl_product(d, s, 400).map_err(|e| e.to_string())?;
            let slack = a.tail + b.tail + 1e-12;
            let gap = (a.value - b.value).abs();
            if gap > slack {
                return Err(format!(
                    "d={d} s={s}: {} vs {} (gap {gap:.2e} > {slack:.2e})",
                    a.value, b.value
                ));
            }
            worst = worst.max(gap);
        }
    }
    let s: f64 = 0.5;
    let kls: Vec<Estimate> = [2.0, 8.0, 32.0]
        .iter()
        .enumerate()
        .map(|(i, &l)| mc_kl(&model(l, s, 1), 100_000, &mut stream(100 + i as u64, 0)).unwrap())
        .collect();
    let limit = -0.5 * (1.0 - s * s).ln();
    let rising = kls.windows(2).all(|w| {
        let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        w[1].mean - w[0].mean > -2.0 * se
    });
    let closer = (limit - kls[2].mean).abs() < (limit - kls[0].mean).abs();
    let means: Vec<f64> = kls.iter().map(|e| e.mean).collect();
    ensure(
        rising && closer,
        format!("closed forms agree (max gap {worst:.1e}); mc_kl {means:.4?} toward {limit:.4}"),
    )
}

fn bounded_kl() -> Check {
    let s: f64 = 0.55;
    let bound = phi_eval_unbounded(s * s, 60)
        .map_err(|e| e.to_string())?
        .value
        .ln();
    let mut lines = Vec::new();
    let mut ok = true;
    for d in 1..=4 {
        let n = if d == 4 { 20_000 } else { 100_000 };
        let est = mc_kl(&model(4.0, s, d), n, &mut stream(110 + d as u64, 0))
            .map_err(|e| e.to_string())?;
        ok &= est.mean <= bound + 4.0 * est.std_error;
        lines.push(format!("d={d} {:.4}±{:.4}", est.mean, est.std_error));
    }
    ensure(ok, format!("{} below {bound:.4}", lines.join(", ")))
}

struct ZSetup {
    model: Model,
    event: EventSet,
    how: Tabulation,
}

fn z_setup() -> ZSetup {
    let (lambda, s, d0) = (8.0, 0.9, 2);
    let log_a = base_log_threshold(d0, s).unwrap();
    ZSetup {
        model: model(lambda, s, d0),
        event: EventSet::Threshold { depth: d0, log_a },
        how: Tabulation::Restrict { max_trees: 508 },
    }
}

fn z_moments(setup: &ZSetup) -> Check {
    let tables = setup
        .event
        .tabulate(&setup.model, setup.how)
        .map_err(|e| e.to_string())?;
    let lambda = setup.model.params().lambda;
    let s = setup.model.params().s;
    let n = 100_000;
    let z0: Accumulator = sample_z(&tables, Measure::Null, n, &mut stream(120, 0))
        .into_iter()
        .collect();
    let z1: Accumulator = sample_z(&tables, Measure::Alt, n, &mut stream(121, 0))
        .into_iter()
        .collect();
    let z4: Accumulator = sample_z(&tables, Measure::Null, n, &mut stream(122, 0))
        .into_iter()
        .map(|z| z.powi(4))
        .collect();
    let (z0, z1, z4) = (z0.estimate(), z1.estimate(), z4.estimate());
    let target1 = lambda * s * tables.p1();
    let bound = z_fourth_moment_bound(lambda, tables.p0());
    let ok =
        z0.within(0.0, 3.0) && z1.within(target1, 3.0) && z4.mean <= bound + 4.0 * z4.std_error;
    ensure(
        ok,
        format!(
            "|S| = {}; P0 mean z={:+.2}; P1 mean {:.5} vs {target1:.5} (z={:+.2}); E[Z^4] {:.3e} <= {bound:.3e}",
            tables.len(),
            z0.z_score(0.0),
            z1.mean,
            z1.z_score(target1),
            z4.mean
        ),
    )
}

fn propagation(setup: &ZSetup) -> Check {
    let tables = setup
        .event
        .tabulate(&setup.model, setup.how)
        .map_err(|e| e.to_string())?;
    let test = DetectionTest::new(setup.model.params(), setup.event.clone());
    let (next, cal) = propagate(
        &setup.model,
        &test,
        setup.how,
        0.1,
        100_000,
        &mut stream(130, 0),
    )
    .map_err(|e| e.to_string())?;
    let (p0, p1) = (tables.p0(), tables.p1());
    let ok = cal.p0.mean <= 0.5 * p0 + 3.0 * cal.p0.std_error && cal.p1.mean >= p1 - 0.1;
    ensure(
        ok,
        format!(
            "sigma {:.2}; P0: {:.2e} -> {:.2e}; P1: {:.2e} -> {:.2e}",
            next.chain[0].sigma, p0, cal.p0.mean, p1, cal.p1.mean
        ),
    )
}

fn alignment() -> Check {
    let (n, lambda, s, d) = (2000, 8.0, 0.9, 3);
    let pair = gen_correlated_er(n, lambda, s, &mut stream(7, 0)).map_err(|e| e.to_string())?;
    let m = model(lambda, s, d);
    let scored = score_candidates(&pair, &m, &AlignConfig::new(d)).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut fractions = Vec::new();
    let mut enough = true;
    for log_a in [0.0, 5.0, 10.0] {
        let a = scored.assemble(log_a);
        fractions.push(a.error_fraction());
        enough &= a.correct() * 100 > n;
        lines.push(format!(
            "logA={log_a}: {} matched, {} correct, wrong {:.3}",
            a.len(),
            a.correct(),
            a.error_fraction()
        ));
    }
    let decreasing = fractions.windows(2).all(|w| w[1] < w[0]);
    ensure(decreasing && enough, lines.join("; "))
}

fn main() -> ExitCode {
    let setup = z_setup();
    let checks: Vec<(&str, Duration, Box<dyn Fn() -> Check + '_>)> = vec![
        (
            "enumeration counting oracle",
            Duration::from_secs(5),
            Box::new(counting_oracle),
        ),
        (
            "otter constant",
            Duration::from_secs(10),
            Box::new(otter_constant),
        ),
        (
            "depth-limited counts",
            Duration::MAX,
            Box::new(depth_counts),
        ),
        (
            "charlier orthonormality",
            Duration::from_secs(1),
            Box::new(charlier_gram),
        ),
        (
            "dual orthogonality",
            Duration::MAX,
            Box::new(dual_orthogonality),
        ),
        (
            "cyclic moments",
            Duration::from_secs(120),
            Box::new(cyclic_moments),
        ),
        (
            "exact vs spectral likelihood ratio",
            Duration::MAX,
            Box::new(spectral_equivalence),
        ),
        (
            "mixed moment limit",
            Duration::MAX,
            Box::new(mixed_moment_rate),
        ),
        (
            "gaussian covariance",
            Duration::MAX,
            Box::new(gaussian_covariance),
        ),
        (
            "gaussian kl consistency",
            Duration::MAX,
            Box::new(kl_consistency),
        ),
        ("bounded kl regime", Duration::MAX, Box::new(bounded_kl)),
        (
            "z statistic moments",
            Duration::from_secs(300),
            Box::new(|| z_moments(&setup)),
        ),
        (
            "propagation contraction",
            Duration::MAX,
            Box::new(|| propagation(&setup)),
        ),
        (
            "alignment smoke",
            Duration::from_secs(600),
            Box::new(alignment),
        ),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *limit => {
                Err(format!("{detail}; took {elapsed:.1?} > {limit:?}"))
            }
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(result.is_err());
        println!(
            "criterion {:>2} {tag} [{elapsed:.1?}] {name}: {detail}",
            i + 1
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
