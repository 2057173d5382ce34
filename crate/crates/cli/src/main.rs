use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use graphforge::descent::{run_descent_traced, DescentParams};
use graphforge::io::{read_dataset, read_graph, write_dataset, write_graph};
use graphforge::ooc::{
    build_out_of_core, plan_dispatch, simulate_cache, DispatchOrder, OocConfig, DEFAULT_QUEUE_DEPTH,
};
use graphforge::partition::{assign_overlap, build_cluster_graph, kmeans, ClusterAssignment, DEFAULT_KMEANS_ITERS};
use graphforge::prune::{prune_graph, CollectMode, FilterMetric, PruneConfig, DEFAULT_GAMMA};
use graphforge::search::{brute_force_knn, brute_force_self_knn, sweep, write_eval_csv, GroundTruth};
use graphforge::{synth, MetricKind, VectorDataset};

/// Graph index construction for approximate nearest neighbor search.
#[derive(Debug, Parser)]
#[command(name = "graphforge", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset as fvecs.
    GenData(GenDataArgs),
    /// Exact top-k of each query against the base set, as ivecs.
    GroundTruth(GroundTruthArgs),
    /// Build an approximate k-NN graph with two-phase NN-Descent.
    BuildKnn(BuildKnnArgs),
    /// Prune a k-NN graph into a search index.
    Prune(PruneCmdArgs),
    /// Partition the data and print the cluster load/evict schedule.
    PlanDispatch(PlanArgs),
    /// Build a pruned index cluster by cluster under a bounded cache.
    BuildOoc(BuildOocArgs),
    /// Sweep search beam widths and report recall and QPS.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Distribution {
    Uniform,
    Mixture,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, value_enum, default_value = "mixture")]
    distribution: Distribution,
    /// Mixture components.
    #[arg(long, default_value_t = 16)]
    modes: usize,
    /// Per-component standard deviation.
    #[arg(long, default_value_t = 3.0)]
    spread: f32,
    /// Also draw this many queries from the same distribution.
    #[arg(long, requires = "query_output")]
    queries: Option<usize>,
    #[arg(long)]
    query_output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GroundTruthArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    input: PathBuf,
    /// Query vectors (fvecs); omit for each base point's neighbors
    /// excluding itself.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
}

#[derive(Debug, Args)]
struct DescentArgs {
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    it1: usize,
    #[arg(long, default_value_t = 4)]
    it2: usize,
    #[arg(long, default_value_t = 16)]
    sample: usize,
    #[arg(long, default_value_t = 8)]
    topm: usize,
    /// Lane-group width for phase-1 candidate retention.
    #[arg(long, default_value_t = 4)]
    group: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DescentArgs {
    fn params(&self) -> DescentParams {
        DescentParams {
            k: self.k,
            it1: self.it1,
            it2: self.it2,
            sample: self.sample,
            top_m: self.topm,
            group: self.group,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct BuildKnnArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    descent: DescentArgs,
    /// Per-iteration convergence CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Add exact recall to the trace (brute-force, quadratic).
    #[arg(long, requires = "trace")]
    trace_recall: bool,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Candidate collection: 1-hop, 2-hop or path.
    #[arg(long, default_value = "path")]
    mode: String,
    /// Filter: dist, angle or rank.
    #[arg(long, default_value = "dist")]
    metric: String,
    /// alpha for dist (default 1.2), gamma in degrees for angle (default 60).
    #[arg(long)]
    thres: Option<f32>,
    /// Candidate cap (default 4 x degree).
    #[arg(long)]
    cand: Option<usize>,
    #[arg(long, default_value_t = 32)]
    degree: usize,
    /// Path-mode search width (default 2 x degree).
    #[arg(long)]
    beam: Option<usize>,
    /// key=value config file; command-line flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl PruneArgs {
    fn config(&self) -> Result<PruneConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(PruneConfig::parse_kv(&text)?);
        }
        let mode: CollectMode = self.mode.parse()?;
        let metric: FilterMetric = self.metric.parse()?;
        let thres = self.thres.unwrap_or(match metric {
            FilterMetric::Dist => 1.2,
            FilterMetric::Angle => DEFAULT_GAMMA,
            FilterMetric::Rank => 0.0,
        });
        let cfg = PruneConfig {
            mode,
            metric,
            thres,
            cand_size: self.cand.unwrap_or(4 * self.degree),
            degree: self.degree,
            beam: self.beam.unwrap_or(2 * self.degree),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct PruneCmdArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    input: PathBuf,
    /// k-NN graph to prune.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    prune: PruneArgs,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[arg(long, default_value_t = 64)]
    clusters: usize,
    /// Clusters each point joins.
    #[arg(long, default_value_t = 2)]
    overlap: usize,
    /// Local indexes held in memory at once.
    #[arg(long, default_value_t = 8)]
    cache: usize,
    #[arg(long, default_value_t = DEFAULT_KMEANS_ITERS)]
    kmeans_iters: usize,
    /// k-means seed.
    #[arg(long, default_value_t = 0)]
    partition_seed: u64,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    input: PathBuf,
    /// Dispatch order, one `load evict` line per step.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    partition: PartitionArgs,
    /// Cluster graph as `ci cj weight` lines.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Per-point cluster ids, binary little-endian u32.
    #[arg(long)]
    assignment: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderKind {
    Planned,
    Sequential,
}

#[derive(Debug, Args)]
struct BuildOocArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    partition: PartitionArgs,
    #[command(flatten)]
    descent: DescentArgs,
    #[command(flatten)]
    prune: PruneArgs,
    #[arg(long, value_enum, default_value = "planned")]
    order: OrderKind,
    /// Merge counters as JSON lines.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Parent directory for spilled lists.
    #[arg(long, env = "GRAPHFORGE_SCRATCH")]
    scratch: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_QUEUE_DEPTH)]
    queue_depth: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Ground truth ivecs; computed by brute force when omitted.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Beam widths to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [10, 16, 32, 64, 128])]
    beam: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// CSV `L,recall,qps`; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write a gnuplot script plotting the CSV.
    #[arg(long, requires = "output")]
    plot: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_data(path: &Path) -> Result<VectorDataset> {
    let ds = read_dataset(path, MetricKind::SquaredL2).with_context(|| format!("reading {}", path.display()))?;
    info!("loaded {} vectors of dimension {} from {}", ds.len(), ds.dim(), path.display());
    Ok(ds)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n == 0 || a.dim == 0 {
        bail!("--n and --dim must be at least 1");
    }
    let nq = a.queries.unwrap_or(0);
    let (base, queries) = match a.distribution {
        Distribution::Uniform => (
            synth::uniform(a.n, a.dim, a.seed),
            (nq > 0).then(|| synth::uniform(nq, a.dim, a.seed.wrapping_add(1))),
        ),
        Distribution::Mixture if nq > 0 => {
            let (b, q) = synth::mixture_with_queries(a.n, nq, a.dim, a.modes, a.spread, a.seed);
            (b, Some(q))
        }
        Distribution::Mixture => (synth::gaussian_mixture(a.n, a.dim, a.modes, a.spread, a.seed), None),
    };
    write_dataset(&a.output, &base)?;
    if let (Some(q), Some(path)) = (queries, &a.query_output) {
        write_dataset(path, &q)?;
    }
    Ok(())
}

fn ground_truth(a: &GroundTruthArgs) -> Result<()> {
    let base = load_data(&a.input)?;
    let gt = match &a.queries {
        Some(q) => brute_force_knn(&base, &load_data(q)?, a.k)?,
        None => brute_force_self_knn(&base, a.k)?,
    };
    gt.write_ivecs(&a.output)?;
    Ok(())
}

fn build_knn(a: &BuildKnnArgs) -> Result<()> {
    let ds = load_data(&a.input)?;
    let params = a.descent.params();
    let truth = if a.trace_recall {
        Some(brute_force_self_knn(&ds, params.k)?)
    } else {
        None
    };
    let start = Instant::now();
    let (graph, trace) = run_descent_traced(&ds, &params, truth.as_ref())?;
    info!("built k-NN graph in {:.2}s", start.elapsed().as_secs_f64());
    if let Some(r) = trace.records.last().and_then(|r| r.recall) {
        info!("final recall {r:.4}");
    }
    write_graph(&a.output, &graph)?;
    if let Some(path) = &a.trace {
        trace.write_csv(create(path)?)?;
    }
    Ok(())
}

fn prune(a: &PruneCmdArgs) -> Result<()> {
    let cfg = a.prune.config()?;
    info!("prune config: {cfg}");
    let ds = load_data(&a.input)?;
    let graph = read_graph(&a.graph).with_context(|| format!("reading {}", a.graph.display()))?;
    let start = Instant::now();
    let pruned = prune_graph(&graph, &ds, &cfg)?;
    info!(
        "pruned in {:.2}s, max degree {}",
        start.elapsed().as_secs_f64(),
        pruned.max_degree()
    );
    write_graph(&a.output, &pruned)?;
    Ok(())
}

fn partition(ds: &VectorDataset, p: &PartitionArgs) -> Result<ClusterAssignment> {
    let start = Instant::now();
    let centroids = kmeans(ds, p.clusters, p.kmeans_iters, p.partition_seed)?;
    let assignment = assign_overlap(ds, &centroids, p.overlap)?;
    info!(
        "partitioned into {} clusters (overlap {}) in {:.2}s",
        p.clusters,
        p.overlap,
        start.elapsed().as_secs_f64()
    );
    Ok(assignment)
}

fn plan(a: &PlanArgs) -> Result<()> {
    let ds = load_data(&a.input)?;
    let assignment = partition(&ds, &a.partition)?;
    let cg = build_cluster_graph(&assignment);
    let start = Instant::now();
    let order = plan_dispatch(&cg, a.partition.cache)?;
    info!("planned in {:.3}ms", start.elapsed().as_secs_f64() * 1e3);
    let c = assignment.num_clusters();
    let planned = simulate_cache(&assignment, &order, a.partition.cache)?;
    let sequential = simulate_cache(&assignment, &DispatchOrder::sequential(c, a.partition.cache), a.partition.cache)?;
    info!(
        "simulated hit ratio: planned {:.4}, sequential {:.4}",
        planned.ratio(),
        sequential.ratio()
    );
    order.write_text(create(&a.output)?)?;
    if let Some(path) = &a.edges {
        cg.write_edge_list(create(path)?)?;
    }
    if let Some(path) = &a.assignment {
        assignment.write(path)?;
    }
    Ok(())
}

fn build_ooc(a: &BuildOocArgs) -> Result<()> {
    let prune = a.prune.config()?;
    let mut cfg = OocConfig::new(a.partition.cache, prune.degree, a.descent.params(), prune);
    cfg.scratch = a.scratch.clone();
    cfg.queue_depth = a.queue_depth;
    cfg.validate()?;
    info!("out-of-core config: {cfg:?}");
    let ds = load_data(&a.input)?;
    let assignment = partition(&ds, &a.partition)?;
    let c = assignment.num_clusters();
    let order = match a.order {
        OrderKind::Planned => plan_dispatch(&build_cluster_graph(&assignment), cfg.n_cache)?,
        OrderKind::Sequential => DispatchOrder::sequential(c, cfg.n_cache),
    };
    let start = Instant::now();
    let out = build_out_of_core(&ds, &assignment, &order, &cfg)?;
    info!(
        "built in {:.2}s, hit ratio {:.4}, {:?}",
        start.elapsed().as_secs_f64(),
        out.stats.hit_ratio(),
        out.stats
    );
    write_graph(&a.output, &out.graph)?;
    if let Some(path) = &a.stats {
        out.write_stats_jsonl(create(path)?)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ds = load_data(&a.input)?;
    let queries = load_data(&a.queries)?;
    let graph = read_graph(&a.graph).with_context(|| format!("reading {}", a.graph.display()))?;
    let truth = match &a.truth {
        Some(p) => GroundTruth::read_ivecs(p).with_context(|| format!("reading {}", p.display()))?,
        None => brute_force_knn(&ds, &queries, a.topk)?,
    };
    let rows = sweep(&graph, &ds, &queries, &truth, a.topk, &a.beam)?;
    for r in &rows {
        info!("L={} recall@{}={:.4} qps={:.1}", r.beam, a.topk, r.recall, r.qps);
    }
    match &a.output {
        Some(path) => write_eval_csv(create(path)?, &rows)?,
        None => write_eval_csv(std::io::stdout().lock(), &rows)?,
    }
    if let (Some(script), Some(csv)) = (&a.plot, &a.output) {
        let mut w = create(script)?;
        writeln!(w, "set datafile separator ','")?;
        writeln!(w, "set key autotitle columnhead")?;
        writeln!(w, "set xlabel 'recall@{}'", a.topk)?;
        writeln!(w, "set ylabel 'QPS'")?;
        writeln!(w, "set logscale y")?;
        writeln!(w, "set terminal pngcairo size 800,600")?;
        writeln!(w, "set output '{}'", csv.with_extension("png").display())?;
        writeln!(w, "plot '{}' using 2:3 with linespoints title 'QPS vs recall'", csv.display())?;
        w.flush()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    info!("{cli:?}");
    match &cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::GroundTruth(a) => ground_truth(a),
        Command::BuildKnn(a) => build_knn(a),
        Command::Prune(a) => prune(a),
        Command::PlanDispatch(a) => plan(a),
        Command::BuildOoc(a) => build_ooc(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
