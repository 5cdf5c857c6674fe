//! Acceptance criteria, each at its stated tolerance. Prints one
//! `PASS`/`FAIL`/`SKIP` line per criterion and exits non-zero if any fails.
//! Runs without the libtest harness so the lines are always shown.
//!
//! The Boston housing criterion runs only when `EKFAC_BOSTON_PATH` points at
//! a whitespace-delimited `housing.data` file.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ekfac::bench::{self, BenchConfig, DatasetSchema};
use ekfac::optim::OptimizerKind;
use ekfac::verify;

const SEED: u64 = 20_240_601;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn judge(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.1} s (limit {limit_s} s)"))
}

fn kronecker() -> Outcome {
    let t = Instant::now();
    let k = verify::measure_kronecker(500, SEED).expect("kronecker trials");
    let (fast, time) = within(t.elapsed(), 5.0);
    judge(
        k.matvec_rel <= 1e-12 && k.eigval_rel <= 1e-8 && k.eigpair_rel <= 1e-8 && fast,
        format!(
            "500 trials, matvec {:.2e} (1e-12), eigenvalues {:.2e}, eigenpairs {:.2e} (1e-8), {time}",
            k.matvec_rel, k.eigval_rel, k.eigpair_rel
        ),
    )
}

fn frobenius() -> Outcome {
    let t = Instant::now();
    let f = verify::measure_frobenius_optimality(100, SEED).expect("frobenius trials");
    let (fast, time) = within(t.elapsed(), 30.0);
    judge(
        f.trials == 100 && f.not_worse == 100 && f.strictly_better >= 95 && fast,
        format!(
            "{}/100 not worse, {}/100 strictly better (≥ 95), {time}",
            f.not_worse, f.strictly_better
        ),
    )
}

fn update_oracle() -> Outcome {
    let u = verify::measure_update_oracle(200, SEED).expect("update oracle");
    judge(
        u.ekfac_rel <= 1e-10 && u.kfac_rel <= 1e-10,
        format!(
            "200 states, noisy EK-FAC {:.2e}, noisy K-FAC {:.2e} (1e-10)",
            u.ekfac_rel, u.kfac_rel
        ),
    )
}

fn reduction() -> Outcome {
    let w = verify::measure_reduction(100, SEED).expect("reduction");
    judge(
        w <= 1e-8,
        format!("100 trials, worst relative difference {w:.2e} (1e-8)"),
    )
}

fn sampling() -> Outcome {
    let s = verify::measure_sampling(200_000, SEED).expect("sampling");
    judge(
        s.emvg_rel <= 0.05 && s.mvg_rel <= 0.05 && s.generic_z <= 5.0 && s.log_density_abs <= 1e-8,
        format!(
            "2e5 samples, EMVG {:.3}, MVG {:.3} relative (0.05), generic max z {:.2} (5), log-density {:.2e} (1e-8)",
            s.emvg_rel, s.mvg_rel, s.generic_z, s.log_density_abs
        ),
    )
}

fn kl() -> Outcome {
    let k = verify::measure_kl(50, 100_000, SEED).expect("kl");
    judge(
        k.dense_abs <= 1e-8 && k.mc_z.iter().all(|z| *z <= 3.0),
        format!(
            "dense {:.2e} (1e-8), 1e5-sample z EMVG {:.2}, MVG {:.2}, FFG {:.2} (3)",
            k.dense_abs, k.mc_z[0], k.mc_z[1], k.mc_z[2]
        ),
    )
}

fn gradients() -> Outcome {
    let g = verify::measure_gradients(30, SEED).expect("gradients");
    judge(
        g.backprop_rel <= 1e-5 && g.bbb_rel <= 1e-5,
        format!(
            "30 nets, backprop {:.2e}, BBB {:.2e} relative (1e-5)",
            g.backprop_rel, g.bbb_rel
        ),
    )
}

fn teacher_ordering() -> Outcome {
    let t = Instant::now();
    let ds = bench::synthetic_teacher(0);
    assert_eq!((ds.len(), ds.dim()), (400, 8));
    let mut ordered = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let mut cfg = BenchConfig::default();
        cfg.train.seed = seed;
        assert_eq!(cfg.hidden, vec![50]);
        let elbo = |kind| bench::train_full(&cfg, &ds, kind, |_| {}).expect("teacher training").1;
        let e = [
            elbo(OptimizerKind::NoisyEkfac),
            elbo(OptimizerKind::NoisyKfac),
            elbo(OptimizerKind::Bbb),
        ];
        if e[0] >= e[1] && e[1] >= e[2] {
            ordered += 1;
        }
        rows.push(format!("{:.1}/{:.1}/{:.1}", e[0], e[1], e[2]));
    }
    let (fast, time) = within(t.elapsed(), 600.0);
    judge(
        ordered >= 4 && fast,
        format!("{ordered}/5 seeds ordered (≥ 4), ELBOs {}, {time}", rows.join(" ")),
    )
}

fn boston() -> Outcome {
    let Ok(path) = std::env::var("EKFAC_BOSTON_PATH") else {
        return Outcome::Skip("EKFAC_BOSTON_PATH not set".into());
    };
    let t = Instant::now();
    let ds = bench::load_dataset(Path::new(&path), &DatasetSchema::default()).expect("boston file");
    let cfg = BenchConfig::default();
    let c = &cfg.train;
    assert_eq!(
        (c.alpha, c.beta, c.omega, c.batch_size, c.t_eig, c.t_reinit),
        (0.01, 0.001, 0.01, 10, 5, 50)
    );
    assert_eq!(cfg.split.repeats, 10);
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let result = bench::run_benchmark(&cfg, &[ds], &[OptimizerKind::NoisyEkfac], jobs).expect("boston benchmark");
    let agg = &result.aggregates[0];
    let (rmse, ll) = (agg.rmse.expect("rmse").mean, agg.test_ll.expect("test ll").mean);
    let (fast, time) = within(t.elapsed(), 900.0);
    judge(
        agg.splits_ok == 10 && rmse <= 3.2 && ll >= -2.65 && fast,
        format!(
            "{} splits ok, RMSE {rmse:.3} (≤ 3.2), test LL {ll:.3} (≥ −2.65), {time}",
            agg.splits_ok
        ),
    )
}

fn train_determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "dataset = \"synthetic-teacher\"\nlambda = 1.0\nepochs = 3\n").expect("config");
    let mut streams = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_ekfac"))
            .args(["train", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .expect("spawn ekfac");
        if !status.status.success() {
            return Outcome::Fail(format!("train exited with {}", status.status));
        }
        streams.push(std::fs::read(out.join("metrics.jsonl")).expect("metrics stream"));
    }
    let lines = streams[0].iter().filter(|b| **b == b'\n').count();
    judge(
        lines > 0 && streams[0] == streams[1],
        format!(
            "two runs, {lines} JSON lines each, byte-identical: {}",
            streams[0] == streams[1]
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 kronecker identity", kronecker),
        ("2 frobenius optimality", frobenius),
        ("3 update-derivation oracle", update_oracle),
        ("4 ekfac/kfac reduction", reduction),
        ("5 sampling fidelity", sampling),
        ("6 kl correctness", kl),
        ("7 gradient fidelity", gradients),
        ("8a synthetic teacher elbo ordering", teacher_ordering),
        ("8b boston housing", boston),
        ("9 convolutional benchmark", || {
            Outcome::Skip("no criterion; convolutional layers out of scope".into())
        }),
        ("10 train determinism", train_determinism),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match f() {
            Outcome::Pass(d) => println!("PASS {name}: {d}"),
            Outcome::Fail(d) => {
                println!("FAIL {name}: {d}");
                failed.push(name);
            }
            Outcome::Skip(d) => println!("SKIP {name}: {d}"),
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
