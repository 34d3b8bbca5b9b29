mod output;

use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use treecorr::align::{gen_correlated_er, score_candidates, write_edges, AlignConfig};
use treecorr::counting::{
    count_depth, count_unbounded, estimate_otter, otter_plain_ratio, phi_eval, phi_eval_unbounded,
};
use treecorr::detect::{
    run_experiment, ExperimentConfig, Tabulation, DEFAULT_K, DEFAULT_MAX_TREES,
};
use treecorr::likelihood::{cyclic_moment, log_lr, mc_moment, Measure};
use treecorr::rng::stream;
use treecorr::spectral::{spectral_lr, EigenTable};
use treecorr::{Error, Model, ModelParams, Tree, TreePair};

use output::{write_table, write_text_header, Format, Table};

#[derive(Parser, Debug)]
#[command(
    name = "treecorr",
    version,
    about = "Correlation detection for pairs of random trees"
)]
struct Cli {
    #[arg(
        long,
        global = true,
        value_enum,
        default_value = "csv",
        env = "TREECORR_FORMAT"
    )]
    format: Format,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "TREECORR_THREADS")]
    threads: Option<usize>,
    /// Write the primary output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Number of unlabeled rooted trees by size.
    Count(CountArgs),
    /// Estimate Otter's constant from count ratios.
    Otter(OtterArgs),
    /// Evaluate the depth-limited tree generating function.
    Phi(PhiArgs),
    /// Sample trees or tree pairs.
    Sample(SampleArgs),
    /// Log-probabilities of trees or pairs read from stdin.
    Pmf(PmfArgs),
    /// Log likelihood ratios of pairs read from stdin.
    Lr(LrArgs),
    /// Evaluate one eigenfunction at one tree.
    Spectral(SpectralArgs),
    /// Truncated spectral likelihood ratio next to the exact one.
    SpectralLr(SpectralLrArgs),
    /// Monte-Carlo moments of the likelihood ratio against their oracle.
    Moments(MomentsArgs),
    /// Type-I error and power of the one-sided tests.
    Detect(DetectArgs),
    /// Partial alignment of a correlated graph pair.
    Align(AlignArgs),
}

#[derive(Args, Debug, Serialize)]
struct Model3 {
    #[arg(long, env = "TREECORR_LAMBDA")]
    lambda: f64,
    #[arg(long, env = "TREECORR_S", default_value_t = 0.0)]
    s: f64,
    #[arg(long, env = "TREECORR_D")]
    d: usize,
}

impl Model3 {
    fn model(&self) -> treecorr::Result<Model> {
        Ok(Model::new(ModelParams::new(self.lambda, self.s, self.d)?))
    }
}

#[derive(Args, Debug, Serialize)]
struct CountArgs {
    #[arg(long)]
    max_n: usize,
    /// Restrict to trees of depth at most this.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct OtterArgs {
    #[arg(long, default_value_t = 40)]
    max_n: usize,
}

#[derive(Args, Debug, Serialize)]
struct PhiArgs {
    /// Depth; omit for the unbounded series.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    x: f64,
    #[arg(long, default_value_t = 60)]
    order: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SampleModel {
    Correlated,
    Null,
    Gw,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long, value_enum, default_value = "correlated")]
    model: SampleModel,
    #[command(flatten)]
    params: Model3,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, env = "TREECORR_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PmfModel {
    Gw,
    Joint,
}

#[derive(Args, Debug, Serialize)]
struct PmfArgs {
    #[arg(long, value_enum, default_value = "gw")]
    model: PmfModel,
    #[command(flatten)]
    params: Model3,
}

#[derive(Args, Debug, Serialize)]
struct LrArgs {
    #[command(flatten)]
    params: Model3,
}

#[derive(Args, Debug, Serialize)]
struct SpectralArgs {
    #[arg(long, env = "TREECORR_LAMBDA")]
    lambda: f64,
    #[arg(long, env = "TREECORR_D")]
    d: usize,
    #[arg(long)]
    beta: String,
    #[arg(long)]
    tree: String,
}

#[derive(Args, Debug, Serialize)]
struct SpectralLrArgs {
    #[command(flatten)]
    params: Model3,
    /// Largest basis tree size.
    #[arg(long = "B", alias = "b", default_value_t = 10)]
    b: usize,
}

#[derive(Args, Debug, Serialize)]
struct MomentsArgs {
    #[command(flatten)]
    params: Model3,
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Cycle of `m` independent trees instead of `E_{P0}[L^m]`.
    #[arg(long)]
    cycle: bool,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, env = "TREECORR_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct DetectArgs {
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true, env = "TREECORR_LAMBDA")]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true, env = "TREECORR_S")]
    s: Vec<f64>,
    /// Base depth; chosen from the Gaussian KL level `--k` when omitted.
    #[arg(long)]
    d0: Option<usize>,
    #[arg(long, default_value_t = 3)]
    dmax: usize,
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: f64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_TREES)]
    max_trees: usize,
    /// Tabulate the full event with this tail budget instead of restricting it.
    #[arg(long)]
    tail_budget: Option<f64>,
    #[arg(long, default_value_t = treecorr::model::DEFAULT_BUDGET)]
    budget: u64,
    #[arg(long, env = "TREECORR_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct AlignArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, env = "TREECORR_LAMBDA")]
    lambda: f64,
    #[arg(long, env = "TREECORR_S")]
    s: f64,
    #[arg(long, env = "TREECORR_D", default_value_t = 2)]
    d: usize,
    #[arg(
        long = "logA",
        alias = "log-a",
        default_value_t = 0.0,
        allow_negative_numbers = true
    )]
    log_a: f64,
    #[arg(long, env = "TREECORR_SEED", default_value_t = 0)]
    seed: u64,
    /// Maximum number of depth-d likelihood evaluations.
    #[arg(long, default_value_t = 1_000_000)]
    budget: usize,
    /// Also write `g.edges`, `h.edges` and `pi_star.txt` here.
    #[arg(long)]
    save_graphs: Option<PathBuf>,
}

enum Failure {
    Domain(Error),
    Io(io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

type Run<T> = std::result::Result<T, Failure>;

fn input_lines() -> Run<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in io::stdin().lock().lines().enumerate() {
        let line = line?;
        let body = line.trim_end_matches(['\r', '\n']);
        if body.trim().is_empty() || body.starts_with('#') {
            continue;
        }
        out.push((i + 1, body.to_string()));
    }
    Ok(out)
}

fn with_line<T>(line: usize, r: treecorr::Result<T>) -> treecorr::Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("line {line}: {message}"),
        },
        e => e,
    })
}

fn read_pairs() -> Run<Vec<TreePair>> {
    input_lines()?
        .into_iter()
        .map(|(i, l)| with_line(i, TreePair::parse(&l)).map_err(Failure::from))
        .collect()
}

fn read_trees() -> Run<Vec<Tree>> {
    input_lines()?
        .into_iter()
        .map(|(i, l)| with_line(i, Tree::parse(l.trim())).map_err(Failure::from))
        .collect()
}

fn count(a: &CountArgs) -> Table {
    let table = match a.depth {
        Some(d) => count_depth(d, a.max_n),
        None => count_unbounded(a.max_n),
    };
    let mut t = Table::new(&["n", "A"]);
    for n in 1..=a.max_n {
        t.push(vec![n.into(), table.get(n).to_string().into()]);
    }
    t
}

fn otter(a: &OtterArgs) -> Run<Table> {
    let table = count_unbounded(a.max_n);
    let mut t = Table::new(&["n", "A", "ratio", "estimate"]);
    for n in 1..=a.max_n {
        let ratio = (n >= 2).then(|| otter_plain_ratio(n)).transpose()?;
        let est = (n >= 10).then(|| estimate_otter(n)).transpose()?;
        t.push(vec![
            n.into(),
            table.get(n).to_string().into(),
            ratio.into(),
            est.into(),
        ]);
    }
    t.note(
        "estimate",
        output::fmt_float(estimate_otter(a.max_n.max(10))?),
    );
    Ok(t)
}

fn phi(a: &PhiArgs) -> Run<Table> {
    let v = match a.d {
        Some(d) => phi_eval(d, a.x, a.order)?,
        None => phi_eval_unbounded(a.x, a.order)?,
    };
    let mut t = Table::new(&["d", "x", "order", "value", "tail_estimate", "tail_reliable"]);
    t.push(vec![
        a.d.into(),
        a.x.into(),
        a.order.into(),
        v.value.into(),
        v.tail_estimate.into(),
        v.tail_reliable.into(),
    ]);
    Ok(t)
}

fn sample(a: &SampleArgs, format: Format, config: &Value, out: &mut dyn Write) -> Run<()> {
    let model = a.params.model()?;
    let mut rng = stream(a.seed, 0);
    let draws: Vec<(Tree, Option<Tree>)> = (0..a.n)
        .map(|_| match a.model {
            SampleModel::Correlated => {
                let p = model.sample_correlated(&mut rng);
                (p.left, Some(p.right))
            }
            SampleModel::Null => {
                let p = model.sample_null(&mut rng);
                (p.left, Some(p.right))
            }
            SampleModel::Gw => (model.sample_gw(&mut rng), None),
        })
        .collect();
    match format {
        Format::Csv => {
            write_text_header(&mut *out, config)?;
            for (l, r) in draws {
                match r {
                    Some(r) => writeln!(out, "{l}\t{r}")?,
                    None => writeln!(out, "{l}")?,
                }
            }
        }
        Format::Json => {
            let mut t = Table::new(&["left", "right"]);
            for (l, r) in draws {
                t.push(vec![
                    l.code().into(),
                    r.map(|r| r.code().to_string()).into(),
                ]);
            }
            write_table(out, format, config, &t)?;
        }
    }
    Ok(())
}

fn pmf(a: &PmfArgs) -> Run<Table> {
    let model = a.params.model()?;
    match a.model {
        PmfModel::Gw => {
            let mut t = Table::new(&["tree", "log_prob"]);
            for tree in read_trees()? {
                t.push(vec![tree.code().into(), model.gw_logpmf(tree)?.into()]);
            }
            Ok(t)
        }
        PmfModel::Joint => {
            let mut t = Table::new(&["left", "right", "log_prob"]);
            for p in read_pairs()? {
                t.push(vec![
                    p.left.code().into(),
                    p.right.code().into(),
                    model.joint_logpmf(&p)?.into(),
                ]);
            }
            Ok(t)
        }
    }
}

fn lr(a: &LrArgs) -> Run<Table> {
    let model = a.params.model()?;
    let mut t = Table::new(&["left", "right", "log_lr"]);
    for p in read_pairs()? {
        t.push(vec![
            p.left.code().into(),
            p.right.code().into(),
            log_lr(&model, &p)?.into(),
        ]);
    }
    Ok(t)
}

fn spectral(a: &SpectralArgs) -> Run<Table> {
    let beta = Tree::parse(&a.beta)?;
    let tree = Tree::parse(&a.tree)?;
    let f = EigenTable::new(a.lambda)?.value(a.d, beta, tree)?;
    let mut t = Table::new(&["d", "lambda", "beta", "tree", "f"]);
    t.push(vec![
        a.d.into(),
        a.lambda.into(),
        a.beta.as_str().into(),
        a.tree.as_str().into(),
        f.into(),
    ]);
    Ok(t)
}

fn spectral_lr_cmd(a: &SpectralLrArgs) -> Run<Table> {
    let model = a.params.model()?;
    let table = EigenTable::new(a.params.lambda)?;
    let mut t = Table::new(&[
        "left",
        "right",
        "spectral",
        "exact",
        "truncation_weight",
        "full_weight",
    ]);
    for p in read_pairs()? {
        let sp = spectral_lr(model.params(), &table, &p, a.b)?;
        let exact = log_lr(&model, &p)?.exp();
        t.push(vec![
            p.left.code().into(),
            p.right.code().into(),
            sp.value.into(),
            exact.into(),
            sp.truncation_weight.into(),
            sp.full_weight.into(),
        ]);
    }
    Ok(t)
}

fn moments(a: &MomentsArgs) -> Run<Table> {
    if a.m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()).into());
    }
    let model = a.params.model()?;
    let (d, s) = (a.params.d, a.params.s);
    let mut rng = stream(a.seed, 0);
    let oracle = |x: f64| -> treecorr::Result<f64> {
        if d == 0 {
            return Ok(1.0);
        }
        Ok(phi_eval(d, x, 200)?.value)
    };
    let (est, target) = if a.cycle {
        (
            cyclic_moment(&model, a.m, a.n, &mut rng)?,
            Some(oracle(s.powi(a.m as i32))?),
        )
    } else {
        let target = match a.m {
            1 => Some(1.0),
            2 => Some(oracle(s * s)?),
            _ => None,
        };
        (
            mc_moment(&model, a.m as u32, Measure::Null, a.n, &mut rng)?,
            target,
        )
    };
    let mut t = Table::new(&[
        "m",
        "cycle",
        "estimate",
        "std_error",
        "n",
        "ess",
        "target",
        "z_score",
    ]);
    t.push(vec![
        a.m.into(),
        a.cycle.into(),
        est.mean.into(),
        est.std_error.into(),
        est.n.into(),
        est.ess.into(),
        target.into(),
        target
            .map(|x| est.z_score(x))
            .filter(|z| z.is_finite())
            .into(),
    ]);
    Ok(t)
}

fn detect(a: &DetectArgs) -> Run<Table> {
    let grid = a
        .lambda
        .iter()
        .flat_map(|&l| a.s.iter().map(move |&s| (l, s)))
        .collect();
    let tabulation = match a.tail_budget {
        Some(tail_budget) => Tabulation::Full {
            max_trees: a.max_trees,
            tail_budget,
        },
        None => Tabulation::Restrict {
            max_trees: a.max_trees,
        },
    };
    let cfg = ExperimentConfig {
        grid,
        d0: a.d0,
        d_max: a.dmax,
        k_level: a.k,
        target_c: a.c,
        n_samples: a.n,
        tabulation,
        budget: a.budget,
    };
    let rows = run_experiment(&cfg, &mut stream(a.seed, 0))?;
    let mut t = Table::new(&[
        "lambda", "s", "depth", "test", "type1", "type1_se", "power", "power_se", "sigma", "A",
    ]);
    for r in rows {
        t.push(vec![
            r.lambda.into(),
            r.s.into(),
            r.depth.into(),
            r.test.as_str().into(),
            r.type1.map(|e| e.mean).into(),
            r.type1.map(|e| e.std_error).into(),
            r.power.map(|e| e.mean).into(),
            r.power.map(|e| e.std_error).into(),
            r.sigma.into(),
            r.a.into(),
        ]);
    }
    Ok(t)
}

fn align(a: &AlignArgs) -> Run<Table> {
    let mut rng = stream(a.seed, 0);
    let pair = gen_correlated_er(a.n, a.lambda, a.s, &mut rng)?;
    if let Some(dir) = &a.save_graphs {
        std::fs::create_dir_all(dir)?;
        write_edges(&pair.g, BufWriter::new(File::create(dir.join("g.edges"))?))?;
        write_edges(&pair.h, BufWriter::new(File::create(dir.join("h.edges"))?))?;
        let mut w = BufWriter::new(File::create(dir.join("pi_star.txt"))?);
        for (u, v) in pair.pi_star.iter().enumerate() {
            writeln!(w, "{u} {v}")?;
        }
    }
    let model = Model::new(ModelParams::new(a.lambda, a.s, a.d)?);
    let mut cfg = AlignConfig::new(a.d);
    cfg.budget = a.budget;
    let scored = score_candidates(&pair, &model, &cfg)?;
    let result = scored.assemble(a.log_a);
    let mut t = Table::new(&["u", "u_prime", "score", "correct"]);
    for m in &result.matches {
        t.push(vec![
            m.u.into(),
            m.u_prime.into(),
            m.score.into(),
            m.correct.into(),
        ]);
    }
    t.note("matched", result.len());
    t.note("correct", result.correct());
    t.note("coverage", output::fmt_float(result.coverage()));
    t.note("error_fraction", output::fmt_float(result.error_fraction()));
    t.note("truncated", result.truncated);
    Ok(t)
}

fn run(cli: &Cli) -> Run<()> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let config: Value = json!(&cli.command);
    let mut out: Box<dyn Write> = match &cli.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let table = match &cli.command {
        Command::Count(a) => count(a),
        Command::Otter(a) => otter(a)?,
        Command::Phi(a) => phi(a)?,
        Command::Sample(a) => {
            sample(a, cli.format, &config, &mut *out)?;
            out.flush()?;
            return Ok(());
        }
        Command::Pmf(a) => pmf(a)?,
        Command::Lr(a) => lr(a)?,
        Command::Spectral(a) => spectral(a)?,
        Command::SpectralLr(a) => spectral_lr_cmd(a)?,
        Command::Moments(a) => moments(a)?,
        Command::Detect(a) => detect(a)?,
        Command::Align(a) => align(a)?,
    };
    write_table(&mut out, cli.format, &config, &table)?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
