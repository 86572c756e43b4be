//! Named end-to-end experiments behind a trait-object registry. Each one
//! builds its own address space from the configuration, runs an attack or
//! measurement, and returns a versioned JSON summary plus plot-ready tables.
//!
//! Measurement noise is applied here, on observed latencies, so the core
//! model stays deterministic. Ground truth from the pagemap only feeds the
//! verification fields of a summary, never the attack itself.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{correlate_counters, histogram_classes, latency_scenarios, AnalysisError};
use crate::cache::{CacheError, CacheGeometry, SearchOptions, StrategyRegistry, CLASSIC_TESTS_PER_ADDRESS, LINES_PER_PAGE};
use crate::config::{ConfigError, Presets};
use crate::dram::{
    colocation_probability, contiguous_regions, fragmentation_sweep, hammer, plan_double_sided, score_contiguity,
    ContiguityScore, DramError, DramGeometry, FlipModel, SweepConfig, SweepPhase, DEFAULT_MIN_PEAKS,
};
use crate::memmap::{AddressSpace, AllocPolicy, MemError, VirtualAddress, ALIAS_PERIOD_FRAMES};
use crate::mob::{FillerKind, MicroArchParams, Mob};
use crate::noise::GaussianNoise;
use crate::spoiler::{
    aliasing_scan, context_switch_probe, depth_probe, recover_aliased_pool, ContextSwitchScenario, PeakDetector,
    SpoilerError, TimingTrace, DEFAULT_WINDOW,
};

pub const SCHEMA_VERSION: u32 = 1;

const LOAD_SALT: u64 = 0x10ad_0000_0000_0001;
const NOISE_SALT: u64 = 0x0015_e000_0000_0002;
const UTIL_SALT: u64 = 0x0b5e_0000_0000_0003;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("attack infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Spoiler(SpoilerError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Dram(DramError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<SpoilerError> for ExperimentError {
    fn from(e: SpoilerError) -> Self {
        match e {
            SpoilerError::BudgetExhausted { .. } => ExperimentError::Infeasible(e.to_string()),
            other => ExperimentError::Spoiler(other),
        }
    }
}

impl From<DramError> for ExperimentError {
    fn from(e: DramError) -> Self {
        match e {
            DramError::AttackInfeasible(msg) => ExperimentError::Infeasible(msg),
            DramError::Spoiler(s) => s.into(),
            DramError::Mem(m) => ExperimentError::Mem(m),
            other => ExperimentError::Dram(other),
        }
    }
}

impl ExperimentError {
    /// Process exit status: 2 when the attack cannot succeed on this
    /// memory state, 1 for configuration and every other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Infeasible(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(ConfigError::Invalid(format!("unknown output format `{other}`"))),
        }
    }
}

/// Allocation policy of the attacker's buffer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocationSpec {
    Contiguous,
    Fragmented,
    Mixed { contiguous_fraction: f64 },
    Buddy,
}

impl AllocationSpec {
    pub fn policy(self, seed: u64) -> AllocPolicy {
        match self {
            AllocationSpec::Contiguous => AllocPolicy::contiguous(seed),
            AllocationSpec::Fragmented => AllocPolicy::fragmented(seed),
            AllocationSpec::Mixed { contiguous_fraction } => AllocPolicy::mixed(contiguous_fraction, seed),
            AllocationSpec::Buddy => AllocPolicy::buddy(seed),
        }
    }
}

/// Accepts `contiguous`, `fragmented`, `buddy` and `mixed:<fraction>`.
impl std::str::FromStr for AllocationSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contiguous" => Ok(AllocationSpec::Contiguous),
            "fragmented" => Ok(AllocationSpec::Fragmented),
            "buddy" => Ok(AllocationSpec::Buddy),
            _ => {
                let frac = s
                    .strip_prefix("mixed:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| ConfigError::Invalid(format!("unknown allocation policy `{s}`")))?;
                Ok(AllocationSpec::Mixed { contiguous_fraction: frac })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvsetParams {
    /// Registered strategy name: `classic`, `improved` or `aa`.
    pub strategy: String,
    /// Pool size; defaults to 4096 pages, or 115 aliased pages for `aa`.
    pub pool: Option<usize>,
    pub rounds: usize,
    /// Chance that one eviction test reports the wrong answer.
    pub flip_probability: f64,
    /// Abort after this many tests per pool address. Classic defaults to
    /// the modeled budget, the other strategies run unbounded.
    pub tests_per_address: Option<u64>,
}

impl Default for EvsetParams {
    fn default() -> Self {
        EvsetParams { strategy: "aa".into(), pool: None, rounds: 1, flip_probability: 0.0, tests_per_address: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RowhammerParams {
    pub hammers: u64,
    /// Extra hammer counts reported as a flips-versus-hammers series.
    pub series: Vec<u64>,
    /// DRAM module model; its susceptibility overrides the flip model's.
    pub module: Option<String>,
    pub flip_model: FlipModel,
}

impl Default for RowhammerParams {
    fn default() -> Self {
        RowhammerParams {
            hammers: 500_000_000,
            series: vec![0, 50_000_000, 100_000_000, 200_000_000, 300_000_000, 400_000_000, 500_000_000],
            module: None,
            flip_model: FlipModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthParams {
    pub fillers: Vec<FillerKind>,
    pub counts: Vec<u64>,
    /// Step count of the kernel-side probe; defaults to the architecture's.
    pub kernel_steps: Option<usize>,
}

impl Default for DepthParams {
    fn default() -> Self {
        DepthParams { fillers: FillerKind::ALL.to_vec(), counts: (0..=4000).step_by(100).collect(), kernel_steps: None }
    }
}

/// Everything an experiment reads. Unset sizes fall back to per-experiment
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: String,
    pub dram: String,
    pub pages: Option<u64>,
    pub frames: Option<u64>,
    pub trials: Option<usize>,
    pub seed: u64,
    /// Gaussian noise on observed load latencies, in cycles. 0 is noiseless.
    pub noise_sigma: f64,
    pub format: OutputFormat,
    pub allocation: Option<AllocationSpec>,
    /// Background utilization applied before the attacker allocates.
    pub utilization: Option<f64>,
    pub window: usize,
    pub hyperthreading: bool,
    pub cache: CacheGeometry,
    pub evset: EvsetParams,
    pub rowhammer: RowhammerParams,
    pub depth: DepthParams,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: "kabylake-r".into(),
            dram: "e".into(),
            pages: None,
            frames: None,
            trials: None,
            seed: 0,
            noise_sigma: 0.0,
            format: OutputFormat::Csv,
            allocation: None,
            utilization: None,
            window: DEFAULT_WINDOW,
            hyperthreading: false,
            cache: CacheGeometry::default(),
            evset: EvsetParams::default(),
            rowhammer: RowhammerParams::default(),
            depth: DepthParams::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Contents of a configuration file: preset overlays plus a `[run]` table.
#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    #[serde(default)]
    run: Option<ExperimentConfig>,
}

/// Parses a configuration file. Preset tables extend or replace the
/// built-in ones; the optional `[run]` table sets experiment parameters.
pub fn load_config(text: &str) -> Result<(Presets, ExperimentConfig), ConfigError> {
    let presets = Presets::builtin_with(text)?;
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    Ok((presets, file.run.unwrap_or_default()))
}

impl ExperimentConfig {
    pub fn validate(&self, presets: &Presets) -> Result<(), ConfigError> {
        presets.microarch(&self.arch)?;
        presets.dram(&self.dram)?;
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return invalid(format!("noise sigma {} must be a non-negative number", self.noise_sigma));
        }
        if self.window == 0 {
            return invalid("window must be positive".into());
        }
        if let Some(AllocationSpec::Mixed { contiguous_fraction: f }) = self.allocation {
            if !(0.0..=1.0).contains(&f) {
                return invalid(format!("contiguous fraction {f} outside [0, 1]"));
            }
        }
        if let Some(u) = self.utilization {
            if !(0.0..=1.0).contains(&u) {
                return invalid(format!("utilization {u} outside [0, 1]"));
            }
        }
        if self.trials == Some(0) {
            return invalid("at least one trial is required".into());
        }
        if self.pages == Some(0) || self.frames == Some(0) {
            return invalid("page and frame counts must be positive".into());
        }
        if self.evset.rounds == 0 {
            return invalid("eviction test rounds must be positive".into());
        }
        if !(0.0..0.5).contains(&self.evset.flip_probability) {
            return invalid(format!("flip probability {} outside [0, 0.5)", self.evset.flip_probability));
        }
        if StrategyRegistry::default().get(&self.evset.strategy).is_err() {
            return invalid(format!("unknown eviction-set strategy `{}`", self.evset.strategy));
        }
        if let Some(m) = &self.rowhammer.module {
            if presets.module_is_flippy(m).is_none() {
                return invalid(format!("unknown DRAM module `{m}`"));
            }
        }
        self.cache.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// A file produced next to the summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub summary: Value,
    pub artifacts: Vec<Artifact>,
}

impl ExperimentOutput {
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary is plain JSON");
        s.push('\n');
        s
    }

    /// Writes `summary.json` and every artifact into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), self.summary_json())?;
        for a in &self.artifacts {
            std::fs::write(dir.join(&a.name), &a.contents)?;
        }
        Ok(())
    }
}

/// Inputs shared by every experiment.
pub struct RunContext<'a> {
    pub presets: &'a Presets,
    pub config: &'a ExperimentConfig,
}

impl RunContext<'_> {
    pub fn arch(&self) -> Result<&MicroArchParams, ConfigError> {
        self.presets.microarch(&self.config.arch)
    }

    pub fn mob(&self) -> Result<Mob, ConfigError> {
        let mut mob = Mob::new(self.arch()?.clone());
        mob.set_hyperthreading(self.config.hyperthreading);
        Ok(mob)
    }

    pub fn dram_geometry(&self) -> Result<DramGeometry, ConfigError> {
        Ok(DramGeometry::from_preset(self.presets.dram(&self.config.dram)?))
    }

    fn noise(&self, seed: u64) -> Option<GaussianNoise> {
        (self.config.noise_sigma > 0.0).then(|| GaussianNoise::new(self.config.noise_sigma, seed ^ NOISE_SALT))
    }

    fn detector(&self) -> PeakDetector {
        PeakDetector::for_noise(self.config.noise_sigma)
    }

    fn trials(&self, default: usize) -> usize {
        self.config.trials.unwrap_or(default)
    }

    /// Fresh address space with the configured background load, an
    /// attacker buffer and a separate load page.
    fn attacker_space(
        &self,
        seed: u64,
        default_frames: u64,
        default_pages: u64,
        default_alloc: AllocationSpec,
    ) -> Result<(AddressSpace, Vec<VirtualAddress>, VirtualAddress), ExperimentError> {
        let cfg = self.config;
        let mut space = AddressSpace::new(cfg.frames.unwrap_or(default_frames), seed)?;
        if let Some(u) = cfg.utilization {
            space.set_utilization(u, seed ^ UTIL_SALT)?;
        }
        let alloc = cfg.allocation.unwrap_or(default_alloc);
        let buffer = space.alloc_pages(cfg.pages.unwrap_or(default_pages), alloc.policy(seed))?;
        let load = space.alloc_pages(1, alloc.policy(seed ^ LOAD_SALT))?[0];
        Ok((space, buffer, load))
    }

    /// Aliasing scan with measurement noise applied to the trace.
    fn observed_scan(
        &self,
        space: &AddressSpace,
        buffer: &[VirtualAddress],
        load: VirtualAddress,
        seed: u64,
    ) -> Result<TimingTrace, ExperimentError> {
        let mut mob = self.mob()?;
        let mut trace = aliasing_scan(space, &mut mob, buffer, self.config.window, load)?;
        if let Some(mut n) = self.noise(seed) {
            trace.apply_noise(&mut n);
        }
        Ok(trace)
    }

    fn table(&self, stem: &str, header: &[&str], rows: &[Vec<String>]) -> Artifact {
        match self.config.format {
            OutputFormat::Csv => {
                let mut out = header.join(",");
                out.push('\n');
                for r in rows {
                    out.push_str(&r.join(","));
                    out.push('\n');
                }
                Artifact { name: format!("{stem}.csv"), contents: out }
            }
            OutputFormat::Json => {
                let records: Vec<BTreeMap<&str, &str>> =
                    rows.iter().map(|r| header.iter().copied().zip(r.iter().map(String::as_str)).collect()).collect();
                Artifact { name: format!("{stem}.json"), contents: pretty(&json!(records)) }
            }
        }
    }

    fn trace_artifact(&self, trace: &TimingTrace) -> Artifact {
        match self.config.format {
            OutputFormat::Csv => Artifact { name: "trace.csv".into(), contents: trace.to_csv() },
            OutputFormat::Json => Artifact { name: "trace.json".into(), contents: pretty(&json!(trace)) },
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain JSON");
    s.push('\n');
    s
}

/// Per-trial seed; trial 0 uses the configured seed unchanged.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Returns the experiment-specific `result` object and artifacts.
    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError>;
}

pub struct ExperimentRegistry {
    experiments: BTreeMap<&'static str, Box<dyn Experiment>>,
}

impl Default for ExperimentRegistry {
    fn default() -> Self {
        let mut r = ExperimentRegistry::empty();
        r.register(Box::new(Scan));
        r.register(Box::new(Evset));
        r.register(Box::new(Colocate));
        r.register(Box::new(Contiguous));
        r.register(Box::new(Rowhammer));
        r.register(Box::new(Depth));
        r.register(Box::new(Correlate));
        r.register(Box::new(FragSweep));
        r
    }
}

impl ExperimentRegistry {
    pub fn empty() -> Self {
        ExperimentRegistry { experiments: BTreeMap::new() }
    }

    pub fn register(&mut self, e: Box<dyn Experiment>) {
        self.experiments.insert(e.name(), e);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Experiment, ConfigError> {
        self.experiments
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| ConfigError::UnknownExperiment(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.experiments.keys().copied()
    }

    pub fn descriptions(&self) -> impl Iterator<Item = (&'static str, &'static str)> + '_ {
        self.experiments.values().map(|e| (e.name(), e.description()))
    }

    /// Validates the configuration, runs the experiment and wraps its result.
    pub fn run(&self, name: &str, presets: &Presets, config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
        let experiment = self.get(name)?;
        config.validate(presets)?;
        let ctx = RunContext { presets, config };
        let (result, artifacts) = experiment.run(&ctx)?;
        let summary = json!({
            "schema_version": SCHEMA_VERSION,
            "experiment": name,
            "config": config,
            "result": result,
        });
        Ok(ExperimentOutput { summary, artifacts })
    }
}

fn count_map<I: IntoIterator<Item = usize>>(values: I) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for v in values {
        *m.entry(v.to_string()).or_insert(0) += 1;
    }
    m
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct Scan;

impl Experiment for Scan {
    fn name(&self) -> &'static str {
        "scan"
    }

    fn description(&self) -> &'static str {
        "aliasing scan over a buffer: peaks, step counts and spacing"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let detector = ctx.detector();
        let mut trials = Vec::new();
        let (mut spacings, mut per_trial_means) = (Vec::new(), Vec::new());
        let (mut peaks_total, mut sound_total) = (0, 0);
        let mut steps = Vec::new();
        let mut first_trace = None;
        for t in 0..ctx.trials(1) {
            let seed = trial_seed(ctx.config.seed, t);
            let (space, buffer, load) = ctx.attacker_space(seed, 1 << 18, 4096, AllocationSpec::Fragmented)?;
            let trace = ctx.observed_scan(&space, &buffer, load, seed)?;
            let report = detector.detect(&trace);
            let pm = space.pagemap();
            let target = pm.physical(load).expect("mapped").alias20();
            let sound = report
                .peaks
                .iter()
                .filter(|p| pm.physical(buffer[p.page]).expect("mapped").alias20() == target)
                .count();
            peaks_total += report.peaks.len();
            sound_total += sound;
            steps.extend(report.complete_step_counts());
            spacings.extend(report.spacings().into_iter().map(|s| s as f64));
            if let Some(m) = report.mean_spacing() {
                per_trial_means.push(m);
            }
            trials.push(json!({
                "seed": seed,
                "peaks": report.peaks.len(),
                "oracle_confirmed": sound,
                "mean_spacing": report.mean_spacing(),
                "peak_pages": report.peak_pages(),
            }));
            if first_trace.is_none() {
                first_trace = Some(trace);
            }
        }
        let result = json!({
            "steps_expected": ctx.mob()?.steps(),
            "step_counts": count_map(steps),
            "peaks": peaks_total,
            "oracle_confirmed": sound_total,
            "precision": if peaks_total == 0 { 1.0 } else { sound_total as f64 / peaks_total as f64 },
            "mean_spacing": mean(&spacings),
            "mean_of_trial_spacings": mean(&per_trial_means),
            "trials": trials,
        });
        Ok((result, first_trace.iter().map(|t| ctx.trace_artifact(t)).collect()))
    }
}

struct Evset;

impl Experiment for Evset {
    fn name(&self) -> &'static str {
        "evset"
    }

    fn description(&self) -> &'static str {
        "eviction-set search with the classic, improved or aliasing-aware strategy"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let cfg = ctx.config;
        let g = &cfg.cache;
        let registry = StrategyRegistry::default();
        let strategy = registry.get(&cfg.evset.strategy)?;
        let aa = strategy.name() == "aa";
        let expected = if aa { g.slices as u64 } else { g.total_sets() / LINES_PER_PAGE };
        let mut trials = Vec::new();
        let mut first_sets = None;
        let (mut successes, mut aborted) = (0, 0);
        let (mut tests, mut accesses) = (Vec::new(), Vec::new());
        for t in 0..ctx.trials(1) {
            let seed = trial_seed(cfg.seed, t);
            let (space, pool, scanned) = if aa {
                let (space, buffer, load) = ctx.attacker_space(seed, 1 << 18, 1 << 16, AllocationSpec::Fragmented)?;
                let mut mob = ctx.mob()?;
                let mut noise = ctx.noise(seed);
                let target = cfg.evset.pool.unwrap_or(115);
                let (pool, scan) = recover_aliased_pool(
                    &space,
                    &mut mob,
                    &buffer,
                    cfg.window,
                    load,
                    target,
                    &ctx.detector(),
                    noise.as_mut(),
                )?;
                (space, pool, Some(scan.pages_scanned))
            } else {
                let mut space = AddressSpace::new(cfg.frames.unwrap_or(1 << 18), seed)?;
                if let Some(u) = cfg.utilization {
                    space.set_utilization(u, seed ^ UTIL_SALT)?;
                }
                let n = cfg.evset.pool.map(|p| p as u64).or(cfg.pages).unwrap_or(4096);
                let alloc = cfg.allocation.unwrap_or(AllocationSpec::Fragmented);
                let pool = space.alloc_pages(n, alloc.policy(seed))?;
                (space, pool, None)
            };
            let per_address = cfg.evset.tests_per_address.or((strategy.name() == "classic").then_some(CLASSIC_TESTS_PER_ADDRESS));
            let opts = SearchOptions {
                seed,
                flip_probability: cfg.evset.flip_probability,
                rounds: cfg.evset.rounds,
                test_budget: per_address.map(|k| k * pool.len() as u64),
            };
            let outcome = strategy.find(g, &space, &pool, &opts)?;
            let targets: Vec<(u64, usize)> = outcome.base_sets.iter().filter_map(|s| s.oracle_target(g, &space)).collect();
            let mut distinct = targets.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let success = !outcome.stats.aborted
                && outcome.base_sets.len() as u64 == expected
                && targets.len() == outcome.base_sets.len()
                && distinct.len() == targets.len();
            successes += success as usize;
            aborted += outcome.stats.aborted as usize;
            tests.push(outcome.stats.tests as f64);
            accesses.push(outcome.stats.accesses as f64);
            trials.push(json!({
                "seed": seed,
                "pool": pool.len(),
                "pages_scanned": scanned,
                "base_sets": outcome.base_sets.len(),
                "oracle_correct": targets.len(),
                "distinct_targets": distinct.len(),
                "total_sets": outcome.total_sets(),
                "tests": outcome.stats.tests,
                "accesses": outcome.stats.accesses,
                "aborted": outcome.stats.aborted,
                "success": success,
            }));
            if first_sets.is_none() {
                let sets: Vec<Value> = outcome.base_sets.iter().map(|s| s.to_json(g, &space)).collect();
                first_sets = Some(Artifact { name: "eviction_sets.json".into(), contents: pretty(&json!(sets)) });
            }
        }
        let n = trials.len() as f64;
        let result = json!({
            "strategy": strategy.name(),
            "expected_base_sets": expected,
            "congruence_probability": g.congruence_probability(if aa { 20 } else { 12 }),
            "successes": successes,
            "success_rate": successes as f64 / n,
            "aborted": aborted,
            "mean_tests": mean(&tests),
            "mean_accesses": mean(&accesses),
            "trials": trials,
        });
        Ok((result, first_sets.into_iter().collect()))
    }
}

struct Colocate;

impl Experiment for Colocate {
    fn name(&self) -> &'static str {
        "colocate"
    }

    fn description(&self) -> &'static str {
        "same-bank probability of 1 MB-aliased page pairs via row conflicts"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let g = ctx.dram_geometry()?;
        let report = colocation_probability(&g, ctx.arch()?, ctx.trials(10_000), ctx.config.seed)?;
        let expected = 1.0 / (1u64 << g.unknown_bits()) as f64;
        let result = json!({
            "dram": ctx.config.dram,
            "mapping_bits": g.mapping_bits_total,
            "unknown_bits": g.unknown_bits(),
            "expected": expected,
            "probability": report.probability,
            "same_bank": report.same_bank,
            "trials": report.trials,
            "load_pages": report.load_pages,
        });
        let table = ctx.table(
            "colocation",
            &["dram", "unknown_bits", "trials", "same_bank", "probability", "expected"],
            &[vec![
                ctx.config.dram.clone(),
                g.unknown_bits().to_string(),
                report.trials.to_string(),
                report.same_bank.to_string(),
                format!("{:.6}", report.probability),
                format!("{expected:.6}"),
            ]],
        );
        Ok((result, vec![table]))
    }
}

struct Contiguous;

impl Experiment for Contiguous {
    fn name(&self) -> &'static str {
        "contiguous"
    }

    fn description(&self) -> &'static str {
        "physically contiguous regions from peak regularity, scored against the pagemap"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let detector = ctx.detector();
        let mut total = ContiguityScore::default();
        let mut spacing_exact = true;
        let (mut regions_total, mut frame_consistent) = (0, 0);
        let mut trials = Vec::new();
        let mut artifacts = Vec::new();
        for t in 0..ctx.trials(1) {
            let seed = trial_seed(ctx.config.seed, t);
            let (space, buffer, load) =
                ctx.attacker_space(seed, 1 << 18, 8192, AllocationSpec::Mixed { contiguous_fraction: 0.5 })?;
            let trace = ctx.observed_scan(&space, &buffer, load, seed)?;
            let report = detector.detect(&trace);
            let regions = contiguous_regions(&report, DEFAULT_MIN_PEAKS);
            let score =
                score_contiguity(&space, &buffer, load, ctx.config.window, DEFAULT_MIN_PEAKS, &regions);
            total.merge(&score);
            let pm = space.pagemap();
            for r in &regions {
                let pages: Vec<usize> = report.peak_pages().into_iter().filter(|&p| r.contains(p)).collect();
                spacing_exact &= pages.windows(2).all(|w| (w[1] - w[0]) as u64 == ALIAS_PERIOD_FRAMES);
                // Oracle view: a region can join two segments whose frames keep the same phase.
                let frames: Vec<u64> = pages.iter().map(|&p| pm.frame_of(buffer[p]).expect("mapped")).collect();
                frame_consistent += frames.windows(2).all(|w| w[1] == w[0] + ALIAS_PERIOD_FRAMES) as usize;
                regions_total += 1;
            }
            trials.push(json!({
                "seed": seed,
                "regions": regions.len(),
                "detected_pages": score.detected_pages,
                "precision": score.precision(),
                "recall": score.recall(),
            }));
            if t == 0 {
                artifacts.push(ctx.trace_artifact(&trace));
                let rows: Vec<Vec<String>> = regions
                    .iter()
                    .map(|r| vec![r.start_page.to_string(), r.length.to_string(), r.peaks.to_string()])
                    .collect();
                artifacts.push(ctx.table("regions", &["start_page", "length", "peaks"], &rows));
            }
        }
        let result = json!({
            "precision": total.precision(),
            "recall": total.recall(),
            "detected_pages": total.detected_pages,
            "correct_pages": total.correct_pages,
            "detectable_pages": total.detectable_pages,
            "found_pages": total.found_pages,
            "in_region_spacing_exact": spacing_exact,
            "regions": regions_total,
            "regions_frame_consistent": frame_consistent,
            "trials": trials,
        });
        Ok((result, artifacts))
    }
}

struct Rowhammer;

impl Experiment for Rowhammer {
    fn name(&self) -> &'static str {
        "rowhammer"
    }

    fn description(&self) -> &'static str {
        "double-sided rowhammer on rows located through contiguity and row conflicts"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let cfg = ctx.config;
        let g = ctx.dram_geometry()?;
        let (space, buffer, load) = ctx.attacker_space(cfg.seed, 1 << 18, 4096, AllocationSpec::Buddy)?;
        let mut mob = ctx.mob()?;
        let plan = plan_double_sided(&space, &g, &mut mob, &buffer, load)?;
        let mut model = cfg.rowhammer.flip_model;
        model.seed ^= cfg.seed;
        if let Some(m) = &cfg.rowhammer.module {
            model.susceptible = ctx.presets.module_is_flippy(m).unwrap_or(model.susceptible);
        }
        let report = hammer(&space, &g, &plan, &buffer, &model, cfg.rowhammer.hammers)?;
        let mut series = Vec::new();
        for &h in &cfg.rowhammer.series {
            series.push((h, hammer(&space, &g, &plan, &buffer, &model, h)?.flips.len()));
        }
        let result = json!({
            "dram": cfg.dram,
            "region": plan.region,
            "region_bytes": plan.region.length as u64 * crate::memmap::PAGE_SIZE,
            "aggressors": plan.aggressors,
            "victim_pages": plan.victim_pages,
            "hammers": report.hammers,
            "flip_count": report.flips.len(),
            "flips": report.flips,
            "series": series,
        });
        let rows: Vec<Vec<String>> = series.iter().map(|(h, n)| vec![h.to_string(), n.to_string()]).collect();
        Ok((result, vec![ctx.table("flips", &["hammers", "flips"], &rows)]))
    }
}

struct Depth;

impl Experiment for Depth {
    fn name(&self) -> &'static str {
        "depth"
    }

    fn description(&self) -> &'static str {
        "surviving peak steps after filler instructions, plus the context-switch probe"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let mob = ctx.mob()?;
        let p = &ctx.config.depth;
        let mut depth = BTreeMap::new();
        let mut rows = Vec::new();
        for &f in &p.fillers {
            let series = depth_probe(&mob, f, &p.counts);
            for &(c, s) in &series {
                rows.push(vec![f.name().to_string(), c.to_string(), s.to_string()]);
            }
            let exhausted = series.iter().find(|&&(_, s)| s == 0).map(|&(c, _)| c);
            depth.insert(f.name(), json!({ "series": series, "first_zero": exhausted }));
        }
        let kernel_steps = p.kernel_steps.unwrap_or(mob.steps());
        let mut switch = BTreeMap::new();
        for (name, s) in [
            ("no_store", ContextSwitchScenario::NoStore),
            ("no_conflict", ContextSwitchScenario::NoConflict),
            ("conflict", ContextSwitchScenario::Conflict),
        ] {
            switch.insert(name, context_switch_probe(&mob, s, kernel_steps));
        }
        let result = json!({ "depth": depth, "context_switch": switch, "kernel_steps": kernel_steps });
        Ok((result, vec![ctx.table("depth", &["filler", "count", "steps"], &rows)]))
    }
}

struct Correlate;

impl Experiment for Correlate {
    fn name(&self) -> &'static str {
        "correlate"
    }

    fn description(&self) -> &'static str {
        "counter correlation over peak windows and latency class means"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let seed = ctx.config.seed;
        let (space, buffer, load) = ctx.attacker_space(seed, 1 << 18, 4096, AllocationSpec::Fragmented)?;
        let trace = ctx.observed_scan(&space, &buffer, load, seed)?;
        let steps = ctx.mob()?.steps();
        let report = correlate_counters(&trace, steps);
        let mut noise = ctx.noise(seed.wrapping_add(1));
        let loads = ctx.trials(1000);
        let scenarios: Vec<(&str, Vec<u64>)> = latency_scenarios(ctx.arch()?, loads, noise.as_mut())
            .into_iter()
            .map(|(c, v)| (c.name(), v))
            .collect();
        let classes = histogram_classes(&scenarios)?;
        let means: BTreeMap<&str, f64> = classes.iter().map(|c| (c.scenario.as_str(), c.mean)).collect();
        let result = json!({
            "correlation": report,
            "no_windows": report.no_windows(),
            "class_means": means,
            "classes": classes,
        });
        let mut out = vec![ctx.trace_artifact(&trace)];
        let rows: Vec<Vec<String>> =
            report.counters.iter().map(|c| vec![c.counter.clone(), format!("{:.6}", c.r), c.constant.to_string()]).collect();
        out.push(ctx.table("correlation", &["counter", "r", "constant"], &rows));
        Ok((result, out))
    }
}

struct FragSweep;

impl Experiment for FragSweep {
    fn name(&self) -> &'static str {
        "fragsweep"
    }

    fn description(&self) -> &'static str {
        "contiguous-block availability while utilization rises and falls"
    }

    fn run(&self, ctx: &RunContext) -> Result<(Value, Vec<Artifact>), ExperimentError> {
        let cfg = ctx.config;
        let mut sweep = cfg.sweep.clone();
        sweep.seed = cfg.seed;
        if let Some(t) = cfg.trials {
            sweep.trials = t;
        }
        if let Some(p) = cfg.pages {
            sweep.buffer_pages = p;
        }
        if let Some(f) = cfg.frames {
            sweep.frames = f;
        }
        let points = fragmentation_sweep(ctx.arch()?, &sweep)?;
        let rising: BTreeMap<String, f64> = points
            .iter()
            .filter(|p| p.phase == SweepPhase::Rising)
            .map(|p| (format!("{:.2}", p.utilization), p.oracle_available))
            .collect();
        // Pointwise comparison against the rising curve at the same utilization.
        let hysteresis = points
            .iter()
            .filter(|p| p.phase == SweepPhase::Falling)
            .all(|p| rising.get(&format!("{:.2}", p.utilization)).is_none_or(|&r| p.oracle_available <= r));
        let gap = points.iter().map(|p| (p.spoiler_available - p.oracle_available).abs()).fold(0.0, f64::max);
        let mut csv_rows = Vec::new();
        for p in &points {
            let phase = match p.phase {
                SweepPhase::Rising => "rising",
                SweepPhase::Falling => "falling",
            };
            let mut row = vec![phase.to_string(), format!("{:.2}", p.utilization)];
            for v in [p.oracle_available, p.spoiler_available, p.free_block_available] {
                let mut s = String::new();
                let _ = write!(s, "{v:.4}");
                row.push(s);
            }
            csv_rows.push(row);
        }
        let result = json!({
            "points": points,
            "falling_within_rising": hysteresis,
            "max_spoiler_oracle_gap": gap,
            "block_pages": sweep.block_pages,
            "buffer_pages": sweep.buffer_pages,
            "frames": sweep.frames,
            "trials": sweep.trials,
        });
        let table = ctx.table(
            "fragsweep",
            &["phase", "utilization", "oracle_available", "spoiler_available", "free_block_available"],
            &csv_rows,
        );
        Ok((result, vec![table]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_every_experiment() {
        let r = ExperimentRegistry::default();
        let names: Vec<_> = r.names().collect();
        assert_eq!(names, ["colocate", "contiguous", "correlate", "depth", "evset", "fragsweep", "rowhammer", "scan"]);
        assert!(matches!(r.get("nope"), Err(ConfigError::UnknownExperiment(_))));
    }

    #[test]
    fn allocation_spec_parses() {
        assert_eq!("buddy".parse::<AllocationSpec>().unwrap(), AllocationSpec::Buddy);
        assert_eq!(
            "mixed:0.25".parse::<AllocationSpec>().unwrap(),
            AllocationSpec::Mixed { contiguous_fraction: 0.25 }
        );
        assert!("mixed:x".parse::<AllocationSpec>().is_err());
    }

    #[test]
    fn config_file_overlays_presets_and_run_table() {
        let text = r#"
            [dram.tiny]
            bits = 20

            [run]
            arch = "skylake"
            dram = "tiny"
            seed = 7
            [run.evset]
            strategy = "classic"
        "#;
        let (presets, cfg) = load_config(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.evset.strategy, "classic");
        assert_eq!(cfg.evset.rounds, 1);
        cfg.validate(&presets).unwrap();
    }

    #[test]
    fn unknown_names_are_config_errors() {
        let presets = Presets::builtin();
        let cfg = ExperimentConfig { arch: "pentium".into(), ..Default::default() };
        let err = ExperimentRegistry::default().run("scan", &presets, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(load_config("[run]\nbogus = 1\n").is_err());
    }
}
