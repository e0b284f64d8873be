//! Ablation suites: several systems trained under identical seeds and data,
//! evaluated on a shared held-out set and ranked.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seanet_core::metrics::{IncorrectConfig, MetricsReport};
use seanet_core::signal::Scenario;
use seanet_core::{MmVariant, NetworkConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, TrainConfig};
use crate::data::{synthetic_examples, Example};
use crate::evaluate::evaluate;
use crate::train::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[value(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Suite {
    TableV,
    AlphaBetaGamma,
    Scenarios,
    MmVariants,
    BetaSweep,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::TableV, Suite::AlphaBetaGamma, Suite::Scenarios, Suite::MmVariants, Suite::BetaSweep];

    pub fn name(self) -> &'static str {
        match self {
            Suite::TableV => "TABLE_V",
            Suite::AlphaBetaGamma => "ALPHA_BETA_GAMMA",
            Suite::Scenarios => "SCENARIOS",
            Suite::MmVariants => "MM_VARIANTS",
            Suite::BetaSweep => "BETA_SWEEP",
        }
    }
}

/// Budget and data shared by every system of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training recipe; `network` is the base the suite's systems modify.
    pub train: TrainConfig,
    pub train_count: usize,
    pub val_count: usize,
    pub data_seed: u64,
    /// Model seeds; each system is trained once per seed.
    pub seeds: Vec<u64>,
    pub eval_count: usize,
    pub eval_seconds: f64,
    pub eval_seed: u64,
    pub incorrect: IncorrectConfig,
    /// Extra epochs when fine-tuning from a trained system.
    pub finetune_epochs: usize,
    pub beta_grid: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut train = TrainConfig::desk();
        train.segment_seconds = 0.5;
        train.max_epochs = 12;
        train.validate_every = 3;
        Self {
            train,
            train_count: 200,
            val_count: 20,
            data_seed: 1,
            seeds: vec![0, 1, 2],
            eval_count: 40,
            eval_seconds: 2.0,
            eval_seed: 7,
            incorrect: IncorrectConfig::default(),
            finetune_epochs: 3,
            beta_grid: vec![0.0, 0.05, 0.1, 0.5, 1.0],
            out_dir: PathBuf::from("runs/ablation"),
        }
    }
}

impl AblationConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() || self.train_count == 0 || self.val_count == 0 || self.eval_count == 0 {
            bail!("ablation needs seeds and non-empty train, validation and evaluation sets");
        }
        if !(self.eval_seconds > 0.0) {
            bail!("eval_seconds must be positive");
        }
        Ok(())
    }
}

/// One trained system of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub label: String,
    pub network: NetworkConfig,
    pub train_scenarios: Vec<Scenario>,
    /// Label of a system whose trained weights initialise this one.
    pub finetune_from: Option<String>,
    pub note: Option<String>,
}

/// Ordered comparison the suite checks directionally: `better` should score
/// a higher mean SI-SDRi than `worse`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub better: String,
    pub worse: String,
}

/// Systems, evaluation groups and claims of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuitePlan {
    pub suite: Suite,
    pub systems: Vec<System>,
    /// Named evaluation sets; a row is produced per system and group.
    pub groups: Vec<(String, Vec<Scenario>)>,
    pub claims: Vec<Claim>,
}

fn system(label: &str, network: NetworkConfig, scenarios: &[Scenario]) -> System {
    System { label: label.into(), network, train_scenarios: scenarios.to_vec(), finetune_from: None, note: None }
}

fn chain(labels: &[&str]) -> Vec<Claim> {
    labels.windows(2).map(|w| Claim { better: w[0].into(), worse: w[1].into() }).collect()
}

/// Row label of `system` in evaluation group `group`.
pub fn row_label(system: &str, group: &str) -> String {
    if group.is_empty() {
        system.to_string()
    } else {
        format!("{system} / {group}")
    }
}

pub fn beta_label(beta: f64) -> String {
    format!("beta={beta}")
}

impl SuitePlan {
    pub fn new(suite: Suite, cfg: &AblationConfig) -> Self {
        let base = &cfg.train.network;
        let two = [Scenario::S];
        let with = |v: Variant| base.clone().with_variant(v);
        let all = |labels: &[(&str, Variant)]| labels.iter().map(|(l, v)| system(l, with(*v), &two)).collect::<Vec<_>>();
        let single = vec![(String::new(), two.to_vec())];
        match suite {
            Suite::TableV => SuitePlan {
                suite,
                systems: all(&[
                    ("AV-DPRNN", Variant::AvDprnn),
                    ("S1", Variant::S1),
                    ("S2", Variant::S2),
                    ("S3", Variant::S3),
                    ("S4", Variant::S4),
                    ("SEANET", Variant::Seanet),
                ]),
                groups: single,
                claims: chain(&["SEANET", "S4", "S3", "S2", "S1", "AV-DPRNN"]),
            },
            Suite::AlphaBetaGamma => SuitePlan {
                suite,
                systems: all(&[
                    ("SEANET", Variant::Seanet),
                    ("SEANET-alpha", Variant::Alpha),
                    ("SEANET-beta", Variant::BetaVariant),
                    ("SEANET-gamma", Variant::Gamma),
                ]),
                groups: single,
                claims: chain(&["SEANET", "SEANET-gamma", "SEANET-beta", "SEANET-alpha"]),
            },
            Suite::Scenarios => {
                let grid = Scenario::GRID;
                let systems =
                    vec![system("AV-DPRNN", with(Variant::AvDprnn), &grid), system("SEANET", with(Variant::Seanet), &grid)];
                let groups: Vec<_> = grid.iter().map(|s| (s.name().to_string(), vec![*s])).collect();
                let claims = groups
                    .iter()
                    .map(|(g, _)| Claim { better: row_label("SEANET", g), worse: row_label("AV-DPRNN", g) })
                    .collect();
                SuitePlan { suite, systems, groups, claims }
            }
            Suite::MmVariants => {
                let seanet = with(Variant::Seanet);
                let mut systems = vec![system("SEANET-pretrained", seanet.clone(), &two)];
                for (label, mm) in [("SEANET", MmVariant::None), ("F-SEANET", MmVariant::F), ("P-SEANET", MmVariant::P), ("A-SEANET", MmVariant::A)] {
                    let mut s = system(label, NetworkConfig { mm_variant: mm, ..seanet.clone() }, &two);
                    s.finetune_from = Some("SEANET-pretrained".into());
                    s.note = Some("fine-tuned".into());
                    systems.push(s);
                }
                systems[1].note = Some("fine-tuned without multi-modal attention (control)".into());
                SuitePlan { suite, systems, groups: single, claims: chain(&["F-SEANET", "A-SEANET", "P-SEANET", "SEANET"]) }
            }
            Suite::BetaSweep => {
                let systems: Vec<_> = cfg
                    .beta_grid
                    .iter()
                    .map(|&b| {
                        let mut s = system(&beta_label(b), NetworkConfig { beta: b, ..with(Variant::Seanet) }, &two);
                        if b == 0.0 {
                            s.note = Some("AV-DPRNN-equivalent weighting".into());
                        }
                        s
                    })
                    .collect();
                let best = beta_label(0.1);
                let claims = if cfg.beta_grid.contains(&0.1) {
                    systems
                        .iter()
                        .filter(|s| s.label != best)
                        .map(|s| Claim { better: best.clone(), worse: s.label.clone() })
                        .collect()
                } else {
                    Vec::new()
                };
                SuitePlan { suite, systems, groups: single, claims }
            }
        }
    }
}

/// Metrics of one system and group for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub val_loss: f64,
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
    pub incorrect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub system: String,
    pub group: String,
    pub note: Option<String>,
    pub seeds: Vec<SeedMetrics>,
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
    /// Sample standard deviation of SI-SDRi across seeds.
    pub si_sdri_std: f64,
    pub incorrect: f64,
    /// Rank by mean SI-SDRi within the group, starting at 1.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub claim: Claim,
    pub margin_db: f64,
    pub reproduced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<Row>,
    pub claims: Vec<ClaimResult>,
    /// Every claim holds.
    pub ordering_reproduced: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl Row {
    fn new(label: String, system: &System, group: &str, seeds: Vec<SeedMetrics>) -> Self {
        let si: Vec<f64> = seeds.iter().map(|s| s.si_sdri).collect();
        Self {
            label,
            system: system.label.clone(),
            group: group.into(),
            note: system.note.clone(),
            si_sdr: mean(seeds.iter().map(|s| s.si_sdr)),
            sdr: mean(seeds.iter().map(|s| s.sdr)),
            si_sdri: mean(si.iter().copied()),
            sdri: mean(seeds.iter().map(|s| s.sdri)),
            si_sdri_std: std_dev(&si),
            incorrect: mean(seeds.iter().map(|s| s.incorrect as f64)),
            rank: 0,
            seeds,
        }
    }
}

impl AblationTable {
    /// Ranks rows within each group and checks the suite's claims.
    pub fn assemble(suite: Suite, mut rows: Vec<Row>, claims: &[Claim]) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            groups.entry(r.group.clone()).or_default().push(i);
        }
        for idx in groups.values_mut() {
            idx.sort_by(|&a, &b| rows[b].si_sdri.total_cmp(&rows[a].si_sdri));
            for (rank, &i) in idx.iter().enumerate() {
                rows[i].rank = rank + 1;
            }
        }
        let by_label: BTreeMap<&str, &Row> = rows.iter().map(|r| (r.label.as_str(), r)).collect();
        let claims = claims
            .iter()
            .map(|c| {
                let (a, b) = (by_label.get(c.better.as_str()), by_label.get(c.worse.as_str()));
                let (Some(a), Some(b)) = (a, b) else { bail!("claim refers to a missing row: {c:?}") };
                let margin_db = a.si_sdri - b.si_sdri;
                Ok(ClaimResult { claim: c.clone(), margin_db, reproduced: margin_db > 0.0 })
            })
            .collect::<Result<Vec<_>>>()?;
        let ordering_reproduced = claims.iter().all(|c| c.reproduced);
        Ok(Self { suite, rows, claims, ordering_reproduced })
    }

    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown table ranked within groups, followed by the claim checks.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {}\n\n", self.suite.name());
        out.push_str("| group | rank | system | SI-SDR | SDR | SI-SDRi | ± | SDRi | incorrect | note |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        let mut order: Vec<&Row> = self.rows.iter().collect();
        order.sort_by(|a, b| a.group.cmp(&b.group).then(a.rank.cmp(&b.rank)));
        for r in order {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.1} | {} |",
                if r.group.is_empty() { "-" } else { &r.group },
                r.rank,
                r.system,
                r.si_sdr,
                r.sdr,
                r.si_sdri,
                r.si_sdri_std,
                r.sdri,
                r.incorrect,
                r.note.as_deref().unwrap_or("")
            );
        }
        out.push_str("\n| expected | margin (dB) | reproduced |\n|---|---|---|\n");
        for c in &self.claims {
            let _ = writeln!(
                out,
                "| {} > {} | {:+.2} | {} |",
                c.claim.better,
                c.claim.worse,
                c.margin_db,
                if c.reproduced { "yes" } else { "no" }
            );
        }
        let _ = writeln!(out, "\nordering reproduced: {}", if self.ordering_reproduced { "yes" } else { "no" });
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("table.md"), self.to_markdown())?;
        Ok(())
    }
}

fn metrics_for(seed: u64, val_loss: f64, report: &MetricsReport) -> Result<SeedMetrics> {
    if let Some(f) = report.failures.first() {
        bail!("evaluation of {} failed: {}", f.id, f.error);
    }
    Ok(SeedMetrics {
        seed,
        val_loss,
        si_sdr: report.si_sdr,
        sdr: report.sdr,
        si_sdri: report.si_sdri,
        sdri: report.sdri,
        incorrect: report.incorrect_segment_count,
    })
}

/// Trains every system of `suite` for each seed and evaluates it on the
/// suite's groups. Runs are written below `cfg.out_dir/<suite>`.
pub fn run_ablation(suite: Suite, cfg: &AblationConfig) -> Result<AblationTable> {
    run_plan(&SuitePlan::new(suite, cfg), cfg)
}

pub fn run_plan(plan: &SuitePlan, cfg: &AblationConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let dir = cfg.out_dir.join(plan.suite.name());
    let net = &cfg.train.network;
    let mut data: HashMap<Vec<Scenario>, (Vec<Example>, Vec<Example>)> = HashMap::new();
    for s in &plan.systems {
        if !data.contains_key(&s.train_scenarios) {
            let seconds = cfg.train.segment_seconds;
            let train = synthetic_examples(net, &s.train_scenarios, cfg.train_count, seconds, cfg.data_seed, "train")?;
            let val = synthetic_examples(net, &s.train_scenarios, cfg.val_count, seconds, cfg.data_seed, "val")?;
            data.insert(s.train_scenarios.clone(), (train, val));
        }
    }
    let eval_sets = plan
        .groups
        .iter()
        .map(|(_, scenarios)| synthetic_examples(net, scenarios, cfg.eval_count, cfg.eval_seconds, cfg.eval_seed, "test"))
        .collect::<Result<Vec<_>>>()?;

    let mut per_row: BTreeMap<String, Vec<SeedMetrics>> = BTreeMap::new();
    let mut best_ckpt: BTreeMap<(String, u64), PathBuf> = BTreeMap::new();
    for &seed in &cfg.seeds {
        for s in &plan.systems {
            let mut train = cfg.train.clone();
            train.seed = seed;
            train.network = s.network.clone();
            train.out_dir = dir.join(&s.label).join(format!("seed-{seed}"));
            train.data = DataConfig::Synthetic {
                train_count: cfg.train_count,
                val_count: cfg.val_count,
                scenarios: s.train_scenarios.clone(),
                seed: cfg.data_seed,
            };
            if let Some(from) = &s.finetune_from {
                let ckpt = best_ckpt
                    .get(&(from.clone(), seed))
                    .with_context(|| format!("{} must be trained before {}", from, s.label))?;
                train.init_from = Some(ckpt.clone());
                train.max_epochs = cfg.finetune_epochs;
                train.validate_every = train.validate_every.min(cfg.finetune_epochs).max(1);
            }
            if train.out_dir.exists() {
                std::fs::remove_dir_all(&train.out_dir)?;
            }
            let (tr, va) = &data[&s.train_scenarios];
            log::info!("{}: training {} (seed {seed})", plan.suite.name(), s.label);
            let outcome = Trainer::with_data(train, tr.clone(), va.clone())?.run()?;
            best_ckpt.insert((s.label.clone(), seed), outcome.best_checkpoint.clone());
            for ((group, _), examples) in plan.groups.iter().zip(&eval_sets) {
                let report = evaluate(&outcome.best, examples, &cfg.incorrect, None);
                let m = metrics_for(seed, outcome.best_val_loss, &report.metrics)?;
                log::info!("{} {}: SI-SDRi {:.2} dB", s.label, group, m.si_sdri);
                per_row.entry(row_label(&s.label, group)).or_default().push(m);
            }
        }
    }
    let mut rows = Vec::new();
    for s in &plan.systems {
        for (group, _) in &plan.groups {
            let label = row_label(&s.label, group);
            let seeds = per_row.remove(&label).unwrap_or_default();
            rows.push(Row::new(label, s, group, seeds));
        }
    }
    let table = AblationTable::assemble(plan.suite, rows, &plan.claims)?;
    table.save(&dir)?;
    Ok(table)
}
