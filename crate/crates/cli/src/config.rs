//! Run configuration: a flat-sectioned key = value document plus flag
//! overrides. Flags win over the file, the file wins over defaults, and the
//! effective configuration is written next to every artifact in the same
//! format so a run can be reproduced from its output directory alone.

use std::path::{Path, PathBuf};

use editlab::error::{Error, Result};
use editlab::toyworld::AttributeSchema;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [run]
    pub seed: u64,
    pub backend: String,
    pub out: PathBuf,
    // [world]
    pub world_block: usize,
    pub world_gap: f64,
    pub world_sigma0: f64,
    pub world_coupling: f64,
    // [embed]
    pub embed_dim: usize,
    pub table_seed: u64,
    // [schedule]
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    // [model]
    pub model_variant: String,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_width: usize,
    pub model_patch: usize,
    pub checkpoint: Option<PathBuf>,
    // [train]
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_dropout: f64,
    // [ems]
    pub alpha: f64,
    pub lambda: f64,
    pub iters: usize,
    pub forward_frac: f64,
    pub cfg_scale: f64,
    pub steps: usize,
    pub eta_start: f64,
    pub eta_end: f64,
    pub success_margin: f64,
    pub order: String,
    // [edit]
    pub edit_source: Vec<String>,
    pub edit_attribute: String,
    pub edit_value: String,
    // [sweep]
    pub sweep_alphas: Vec<f64>,
    // [sde]
    pub sde_attribute: String,
    pub sde_v0: String,
    pub sde_v1: String,
    pub sde_t_frac: f64,
    pub sde_samples: usize,
    // [probe]
    pub probe_layer: usize,
    pub probe_t_frac: f64,
    pub probe_reps: usize,
    pub probe_shuffles: usize,
    // [bench]
    pub bench_records: usize,
    pub bench_alphas: Vec<f64>,
    // [props]
    pub props_trials: u64,
    pub props_c: f64,
    pub props_ms: Vec<usize>,
    pub props_ds: Vec<usize>,
    pub props_alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            backend: "oracle".into(),
            out: PathBuf::from("out"),
            world_block: 1,
            world_gap: 2.0,
            world_sigma0: 0.05,
            world_coupling: 0.5,
            embed_dim: 16,
            table_seed: 99,
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            model_variant: "joint".into(),
            model_layers: 2,
            model_heads: 4,
            model_width: 64,
            model_patch: 4,
            checkpoint: None,
            train_steps: 2000,
            train_batch: 8,
            train_lr: 1e-3,
            train_dropout: 0.1,
            alpha: 1.0,
            lambda: 0.5,
            iters: 50,
            forward_frac: 0.75,
            cfg_scale: 7.5,
            steps: 50,
            eta_start: 0.1,
            eta_end: 0.01,
            success_margin: 0.9,
            order: "text-first".into(),
            edit_source: vec!["square".into(), "green".into(), "2".into(), "normal".into()],
            edit_attribute: "color".into(),
            edit_value: "blue".into(),
            sweep_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            sde_attribute: "color".into(),
            sde_v0: "red".into(),
            sde_v1: "blue".into(),
            sde_t_frac: 0.75,
            sde_samples: 8,
            probe_layer: 1,
            probe_t_frac: 0.1,
            probe_reps: 4,
            probe_shuffles: 100,
            bench_records: 64,
            bench_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            props_trials: 1_000_000,
            props_c: 0.05,
            props_ms: vec![1, 4, 16],
            props_ds: vec![4, 16, 64],
            props_alphas: vec![1.0, 2.0, 3.0],
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::Configuration {
        context: format!("cannot parse {key} = {value}"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_as::<T>(key, v))
        .collect()
}

fn parse_words(value: &str) -> Vec<String> {
    value.split(',').map(|v| v.trim().to_string()).collect()
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Configuration {
            context: format!("config file {}: {e}", path.display()),
        })?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Configuration {
                context: format!("expected key = value, got: {line}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            self.set(&section, key, value)?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        match full.as_str() {
            "run.seed" => self.seed = parse_as(key, value)?,
            "run.backend" => self.backend = value.to_string(),
            "run.out" => self.out = PathBuf::from(value),
            "world.block" => self.world_block = parse_as(key, value)?,
            "world.gap" => self.world_gap = parse_as(key, value)?,
            "world.sigma0" => self.world_sigma0 = parse_as(key, value)?,
            "world.coupling" => self.world_coupling = parse_as(key, value)?,
            "embed.dim" => self.embed_dim = parse_as(key, value)?,
            "embed.table_seed" => self.table_seed = parse_as(key, value)?,
            "schedule.t_max" => self.t_max = parse_as(key, value)?,
            "schedule.beta_min" => self.beta_min = parse_as(key, value)?,
            "schedule.beta_max" => self.beta_max = parse_as(key, value)?,
            "model.variant" => self.model_variant = value.to_string(),
            "model.layers" => self.model_layers = parse_as(key, value)?,
            "model.heads" => self.model_heads = parse_as(key, value)?,
            "model.width" => self.model_width = parse_as(key, value)?,
            "model.patch" => self.model_patch = parse_as(key, value)?,
            "model.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "train.steps" => self.train_steps = parse_as(key, value)?,
            "train.batch" => self.train_batch = parse_as(key, value)?,
            "train.lr" => self.train_lr = parse_as(key, value)?,
            "train.dropout" => self.train_dropout = parse_as(key, value)?,
            "ems.alpha" => self.alpha = parse_as(key, value)?,
            "ems.lambda" => self.lambda = parse_as(key, value)?,
            "ems.iters" => self.iters = parse_as(key, value)?,
            "ems.forward_frac" => self.forward_frac = parse_as(key, value)?,
            "ems.cfg_scale" => self.cfg_scale = parse_as(key, value)?,
            "ems.steps" => self.steps = parse_as(key, value)?,
            "ems.eta_start" => self.eta_start = parse_as(key, value)?,
            "ems.eta_end" => self.eta_end = parse_as(key, value)?,
            "ems.success_margin" => self.success_margin = parse_as(key, value)?,
            "ems.order" => self.order = value.to_string(),
            "edit.source" => self.edit_source = parse_words(value),
            "edit.attribute" => self.edit_attribute = value.to_string(),
            "edit.value" => self.edit_value = value.to_string(),
            "sweep.alphas" => self.sweep_alphas = parse_list(key, value)?,
            "sde.attribute" => self.sde_attribute = value.to_string(),
            "sde.v0" => self.sde_v0 = value.to_string(),
            "sde.v1" => self.sde_v1 = value.to_string(),
            "sde.t_frac" => self.sde_t_frac = parse_as(key, value)?,
            "sde.samples" => self.sde_samples = parse_as(key, value)?,
            "probe.layer" => self.probe_layer = parse_as(key, value)?,
            "probe.t_frac" => self.probe_t_frac = parse_as(key, value)?,
            "probe.reps" => self.probe_reps = parse_as(key, value)?,
            "probe.shuffles" => self.probe_shuffles = parse_as(key, value)?,
            "bench.records" => self.bench_records = parse_as(key, value)?,
            "bench.alphas" => self.bench_alphas = parse_list(key, value)?,
            "props.trials" => self.props_trials = parse_as(key, value)?,
            "props.c" => self.props_c = parse_as(key, value)?,
            "props.ms" => self.props_ms = parse_list(key, value)?,
            "props.ds" => self.props_ds = parse_list(key, value)?,
            "props.alphas" => self.props_alphas = parse_list(key, value)?,
            _ => {
                return Err(Error::Configuration { context: format!("unknown config key {full}") });
            }
        }
        Ok(())
    }

    /// Validate every numeric field against its module's preconditions.
    pub fn validate(&self) -> Result<()> {
        let schema = AttributeSchema::default_schema();
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Configuration { context: what.to_string() })
            }
        };
        check(
            matches!(self.backend.as_str(), "oracle" | "joint" | "cross"),
            "run.backend must be oracle, joint, or cross",
        )?;
        check(
            matches!(self.model_variant.as_str(), "joint" | "cross"),
            "model.variant must be joint or cross",
        )?;
        check(
            matches!(self.order.as_str(), "text-first" | "csds-first"),
            "ems.order must be text-first or csds-first",
        )?;
        check(self.world_block >= 1, "world.block must be positive")?;
        check(self.world_gap > 0.0, "world.gap must be positive")?;
        check(self.world_sigma0 >= 0.0, "world.sigma0 must be nonnegative")?;
        check(self.embed_dim >= schema.vocab_size(), "embed.dim must cover the vocabulary")?;
        check(self.t_max >= 2, "schedule.t_max must be at least 2")?;
        check(
            0.0 < self.beta_min && self.beta_min < self.beta_max && self.beta_max < 1.0,
            "schedule betas must satisfy 0 < beta_min < beta_max < 1",
        )?;
        check(self.model_width % self.model_heads == 0, "model.width must divide by heads")?;
        check(
            self.model_patch >= 1 && editlab::toyworld::IMAGE_SIDE % self.model_patch == 0,
            "model.patch must divide the image side",
        )?;
        check(self.model_layers >= 1, "model.layers must be positive")?;
        check(self.train_steps >= 1 && self.train_batch >= 1, "train steps/batch must be positive")?;
        check(self.train_lr > 0.0, "train.lr must be positive")?;
        check((0.0..=1.0).contains(&self.train_dropout), "train.dropout must be in [0,1]")?;
        check(self.alpha.is_finite(), "ems.alpha must be finite")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "ems.lambda must be nonnegative")?;
        check(self.iters >= 1, "ems.iters must be positive")?;
        check((0.0..=1.0).contains(&self.forward_frac), "ems.forward_frac must be in [0,1]")?;
        check(self.cfg_scale >= 0.0, "ems.cfg_scale must be nonnegative")?;
        check(self.steps >= 1, "ems.steps must be positive")?;
        check(
            self.eta_start > 0.0 && self.eta_end > 0.0 && self.eta_end <= self.eta_start,
            "ems.eta schedule must be positive and non-increasing",
        )?;
        check((0.0..=1.0).contains(&self.success_margin), "ems.success_margin must be in [0,1]")?;
        check(self.edit_source.len() == schema.attr_count(), "edit.source needs one value per attribute")?;
        check(!self.sweep_alphas.is_empty(), "sweep.alphas must not be empty")?;
        check((0.0..=1.0).contains(&self.sde_t_frac), "sde.t_frac must be in [0,1]")?;
        check(self.sde_samples >= 1, "sde.samples must be positive")?;
        check((0.0..=1.0).contains(&self.probe_t_frac), "probe.t_frac must be in [0,1]")?;
        check(self.probe_reps >= 1, "probe.reps must be positive")?;
        check(self.bench_records >= 1 && self.bench_records <= 64, "bench.records must be in 1..=64")?;
        check(!self.bench_alphas.is_empty(), "bench.alphas must not be empty")?;
        check(self.props_trials >= 100_000, "props.trials must be at least 1e5")?;
        check(self.props_c > 0.0, "props.c must be positive")?;
        check(self.props_alphas.iter().all(|&a| a >= 1.0), "props.alphas must be >= 1")?;
        check(self.props_ds.iter().all(|&d| d >= 4), "props.ds must be >= 4")?;
        check(!self.props_ms.is_empty(), "props.ms must not be empty")?;
        Ok(())
    }

    /// Serialize in the same flat-sectioned format the parser reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let list_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("backend = {}\n", self.backend));
        s.push_str(&format!("out = {}\n", self.out.display()));
        s.push_str("\n[world]\n");
        s.push_str(&format!("block = {}\n", self.world_block));
        s.push_str(&format!("gap = {}\n", self.world_gap));
        s.push_str(&format!("sigma0 = {}\n", self.world_sigma0));
        s.push_str(&format!("coupling = {}\n", self.world_coupling));
        s.push_str("\n[embed]\n");
        s.push_str(&format!("dim = {}\n", self.embed_dim));
        s.push_str(&format!("table_seed = {}\n", self.table_seed));
        s.push_str("\n[schedule]\n");
        s.push_str(&format!("t_max = {}\n", self.t_max));
        s.push_str(&format!("beta_min = {}\n", self.beta_min));
        s.push_str(&format!("beta_max = {}\n", self.beta_max));
        s.push_str("\n[model]\n");
        s.push_str(&format!("variant = {}\n", self.model_variant));
        s.push_str(&format!("layers = {}\n", self.model_layers));
        s.push_str(&format!("heads = {}\n", self.model_heads));
        s.push_str(&format!("width = {}\n", self.model_width));
        s.push_str(&format!("patch = {}\n", self.model_patch));
        if let Some(ckpt) = &self.checkpoint {
            s.push_str(&format!("checkpoint = {}\n", ckpt.display()));
        }
        s.push_str("\n[train]\n");
        s.push_str(&format!("steps = {}\n", self.train_steps));
        s.push_str(&format!("batch = {}\n", self.train_batch));
        s.push_str(&format!("lr = {}\n", self.train_lr));
        s.push_str(&format!("dropout = {}\n", self.train_dropout));
        s.push_str("\n[ems]\n");
        s.push_str(&format!("alpha = {}\n", self.alpha));
        s.push_str(&format!("lambda = {}\n", self.lambda));
        s.push_str(&format!("iters = {}\n", self.iters));
        s.push_str(&format!("forward_frac = {}\n", self.forward_frac));
        s.push_str(&format!("cfg_scale = {}\n", self.cfg_scale));
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("eta_start = {}\n", self.eta_start));
        s.push_str(&format!("eta_end = {}\n", self.eta_end));
        s.push_str(&format!("success_margin = {}\n", self.success_margin));
        s.push_str(&format!("order = {}\n", self.order));
        s.push_str("\n[edit]\n");
        s.push_str(&format!("source = {}\n", self.edit_source.join(",")));
        s.push_str(&format!("attribute = {}\n", self.edit_attribute));
        s.push_str(&format!("value = {}\n", self.edit_value));
        s.push_str("\n[sweep]\n");
        s.push_str(&format!("alphas = {}\n", list_f(&self.sweep_alphas)));
        s.push_str("\n[sde]\n");
        s.push_str(&format!("attribute = {}\n", self.sde_attribute));
        s.push_str(&format!("v0 = {}\n", self.sde_v0));
        s.push_str(&format!("v1 = {}\n", self.sde_v1));
        s.push_str(&format!("t_frac = {}\n", self.sde_t_frac));
        s.push_str(&format!("samples = {}\n", self.sde_samples));
        s.push_str("\n[probe]\n");
        s.push_str(&format!("layer = {}\n", self.probe_layer));
        s.push_str(&format!("t_frac = {}\n", self.probe_t_frac));
        s.push_str(&format!("reps = {}\n", self.probe_reps));
        s.push_str(&format!("shuffles = {}\n", self.probe_shuffles));
        s.push_str("\n[bench]\n");
        s.push_str(&format!("records = {}\n", self.bench_records));
        s.push_str(&format!("alphas = {}\n", list_f(&self.bench_alphas)));
        s.push_str("\n[props]\n");
        s.push_str(&format!("trials = {}\n", self.props_trials));
        s.push_str(&format!("c = {}\n", self.props_c));
        s.push_str(&format!("ms = {}\n", list_u(&self.props_ms)));
        s.push_str(&format!("ds = {}\n", list_u(&self.props_ds)));
        s.push_str(&format!("alphas = {}\n", list_f(&self.props_alphas)));
        s
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("effective.cfg"), self.to_text())?;
        Ok(())
    }
}
