//! Command implementations. Every command writes its artifacts plus the
//! effective configuration into the output directory and stays byte-stable
//! under a fixed seed.

use std::path::Path;
use std::sync::Arc;

use editlab::diffusion::NoiseSchedule;
use editlab::embed::{attribute_directions, orthogonality_check, concentration_grid, encode, TokenTable};
use editlab::ems::{
    collapse_sweep, edit, CsdsConfig, EditBackend, EditOrder, EditRequest, EmsConfig,
    NeuralBackend, OracleBackend, Pipeline,
};
use editlab::error::{Error, Result};
use editlab::eval::{
    generate_benchmark, probe, probe_shuffled_control, run_benchmark, sde_for_attribute,
    write_report_csv, BenchConfig, ProbeConfig, SdeConfig,
};
use editlab::neural::{
    pixel_dataset, train, write_loss_csv, DenoiserConfig, NeuralDenoiser, TrainConfig, Variant,
};
use editlab::oracle::GmmWorld;
use editlab::toyworld::{
    describe, render, write_manifest, AttributeSchema, Prototypes, SemanticTuple, ToyImage,
};

use crate::config::RunConfig;

pub struct Lab {
    pub schema: AttributeSchema,
    pub table: Arc<TokenTable>,
    pub schedule: NoiseSchedule,
    pub protos: Prototypes,
}

pub fn lab(cfg: &RunConfig) -> Result<Lab> {
    let schema = AttributeSchema::default_schema();
    let table = Arc::new(TokenTable::for_schema(&schema, cfg.embed_dim, cfg.table_seed)?);
    let schedule = NoiseSchedule::linear(cfg.t_max, cfg.beta_min, cfg.beta_max)?;
    let protos = Prototypes::new(&schema);
    Ok(Lab { schema, table, schedule, protos })
}

fn ems_config(cfg: &RunConfig) -> EmsConfig {
    EmsConfig {
        forward_frac: cfg.forward_frac,
        cfg_scale: cfg.cfg_scale,
        steps: cfg.steps,
        success_margin: cfg.success_margin,
        order: if cfg.order == "csds-first" { EditOrder::CsdsFirst } else { EditOrder::TextFirst },
        csds: CsdsConfig {
            lambda: cfg.lambda,
            eta_start: cfg.eta_start,
            eta_end: cfg.eta_end,
            iterations: cfg.iters,
            attr_guidance: None,
        },
        seed: cfg.seed,
    }
}

fn oracle_backend(cfg: &RunConfig, lab: &Lab, entangled: bool) -> Result<OracleBackend> {
    let world = if entangled {
        GmmWorld::entangled(
            &lab.schema,
            cfg.world_block,
            cfg.world_gap,
            cfg.world_sigma0,
            cfg.world_coupling,
        )?
    } else {
        GmmWorld::new(&lab.schema, cfg.world_block, cfg.world_gap, cfg.world_sigma0)?
    };
    Ok(OracleBackend::new(Arc::new(world), lab.schedule.clone(), lab.table.clone()))
}

fn load_model(cfg: &RunConfig, expect_variant: Option<Variant>) -> Result<NeuralDenoiser> {
    let base = cfg.checkpoint.clone().ok_or_else(|| Error::Configuration {
        context: "model.checkpoint is required for neural backends".into(),
    })?;
    if !base.with_extension("ckpt").exists() {
        return Err(Error::Configuration {
            context: format!("checkpoint not found: {}", base.with_extension("ckpt").display()),
        });
    }
    let model = NeuralDenoiser::load(&base)?;
    if let Some(variant) = expect_variant {
        if model.config.variant != variant {
            return Err(Error::Configuration {
                context: format!(
                    "checkpoint variant {} does not match requested backend",
                    model.config.variant.label()
                ),
            });
        }
    }
    Ok(model)
}

fn backend(cfg: &RunConfig, lab: &Lab) -> Result<Box<dyn EditBackend>> {
    match cfg.backend.as_str() {
        "oracle" => Ok(Box::new(oracle_backend(cfg, lab, false)?)),
        "joint" => Ok(Box::new(NeuralBackend::new(
            load_model(cfg, Some(Variant::Joint))?,
            lab.schedule.clone(),
        ))),
        "cross" => Ok(Box::new(NeuralBackend::new(
            load_model(cfg, Some(Variant::Cross))?,
            lab.schedule.clone(),
        ))),
        other => Err(Error::Configuration { context: format!("unknown backend {other}") }),
    }
}

fn source_tuple(cfg: &RunConfig, schema: &AttributeSchema) -> Result<SemanticTuple> {
    let mut values = Vec::with_capacity(schema.attr_count());
    for (a, word) in cfg.edit_source.iter().enumerate() {
        let v = schema.value_index(a, word).ok_or_else(|| Error::Configuration {
            context: format!(
                "{word} is not a value of {}; valid: {:?}",
                schema.attr_name(a),
                (0..schema.value_count(a)).map(|v| schema.value_name(a, v)).collect::<Vec<_>>()
            ),
        })?;
        values.push(v);
    }
    Ok(SemanticTuple::new(values))
}

fn target_of(cfg: &RunConfig, schema: &AttributeSchema) -> Result<(usize, usize)> {
    let attr = schema.attr_index(&cfg.edit_attribute).ok_or_else(|| Error::Configuration {
        context: format!(
            "{} is not an attribute; valid: {:?}",
            cfg.edit_attribute,
            (0..schema.attr_count()).map(|a| schema.attr_name(a)).collect::<Vec<_>>()
        ),
    })?;
    let value = schema.value_index(attr, &cfg.edit_value).ok_or_else(|| Error::Configuration {
        context: format!(
            "{} is not a value of {}; valid: {:?}",
            cfg.edit_value,
            cfg.edit_attribute,
            (0..schema.value_count(attr)).map(|v| schema.value_name(attr, v)).collect::<Vec<_>>()
        ),
    })?;
    Ok((attr, value))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).map_err(|e| Error::Format { context: e.to_string() })?,
    )?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let variant = if cfg.model_variant == "cross" { Variant::Cross } else { Variant::Joint };
    let model_cfg = DenoiserConfig {
        variant,
        layers: cfg.model_layers,
        heads: cfg.model_heads,
        width: cfg.model_width,
        patch: cfg.model_patch,
        text_len: lab.schema.prompt_len(),
        text_dim: cfg.embed_dim,
    };
    let dataset = pixel_dataset(&lab.schema, &lab.table)?;
    let tc = TrainConfig {
        steps: cfg.train_steps,
        batch: cfg.train_batch,
        lr: cfg.train_lr,
        cond_dropout: cfg.train_dropout,
        seed: cfg.seed,
    };
    let run = train(&model_cfg, &lab.schedule, &dataset, &tc)?;
    std::fs::create_dir_all(&cfg.out)?;
    run.model.save(&cfg.out.join("model"))?;
    write_loss_csv(&run.curve, &cfg.out.join("loss.csv"))?;
    cfg.write_effective(&cfg.out)?;
    println!(
        "trained {} for {} steps: loss {:.5} -> {:.5} (dropout rate {:.3})",
        variant.label(),
        cfg.train_steps,
        run.curve.first().map(|(_, l)| *l).unwrap_or(f64::NAN),
        run.curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        run.dropout_events as f64 / run.samples_seen.max(1) as f64,
    );
    Ok(0)
}

pub fn cmd_edit(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let backend = backend(cfg, &lab)?;
    let pipe = Pipeline {
        backend: backend.as_ref(),
        schema: &lab.schema,
        table: &lab.table,
        protos: &lab.protos,
    };
    let source = source_tuple(cfg, &lab.schema)?;
    let (attr, value) = target_of(cfg, &lab.schema)?;
    let (img, _) = render(&lab.schema, &source);
    let req = EditRequest::single(img, attr, value, cfg.alpha);
    let out = edit(&pipe, &req, &ems_config(cfg))?;
    std::fs::create_dir_all(&cfg.out)?;
    out.image.write_ppm(&cfg.out.join("edited.ppm"))?;
    write_json(&out.trace, &cfg.out.join("trace.json"))?;
    let prompt = describe(&lab.schema, &source);
    let emb = encode(&lab.table, &prompt)?;
    editlab::embed::write_embedding_csv(&emb, &prompt, &lab.schema, &cfg.out.join("source_embedding.csv"))?;
    // Debug artifact: the conditioned reconstruction trajectory.
    let z0 = backend.latent_of_image(&render(&lab.schema, &source).0)?;
    let t_fwd = lab.schedule.strength_to_t(cfg.forward_frac)?;
    let mut rng = editlab::rng::RngStream::new(cfg.seed, 0xED17).substream(t_fwd as u64);
    let z_t = editlab::diffusion::forward(
        &lab.schedule,
        &editlab::diffusion::LatentState::clean(z0),
        t_fwd,
        &mut rng,
    )?;
    let mut rows = Vec::new();
    editlab::diffusion::reverse_bounded(
        backend.denoiser(),
        &lab.schedule,
        &z_t,
        Some(&emb),
        cfg.steps,
        cfg.cfg_scale,
        backend.clean_bounds(),
        Some(&mut rows),
    )?;
    editlab::diffusion::write_trajectory_csv(&rows, &cfg.out.join("trajectory.csv"))?;
    cfg.write_effective(&cfg.out)?;
    println!(
        "edit {} -> {} at degree {}: {} via {}",
        cfg.edit_attribute,
        cfg.edit_value,
        cfg.alpha,
        if out.success { "success" } else { "below threshold" },
        out.trace.path_taken,
    );
    Ok(if out.success { 0 } else { 2 })
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let backend = backend(cfg, &lab)?;
    let pipe = Pipeline {
        backend: backend.as_ref(),
        schema: &lab.schema,
        table: &lab.table,
        protos: &lab.protos,
    };
    let source = source_tuple(cfg, &lab.schema)?;
    let (attr, value) = target_of(cfg, &lab.schema)?;
    let (img, _) = render(&lab.schema, &source);
    let ems = ems_config(cfg);
    let mut tiles: Vec<ToyImage> = Vec::with_capacity(cfg.sweep_alphas.len());
    for &alpha in &cfg.sweep_alphas {
        let req = EditRequest::single(img.clone(), attr, value, alpha);
        tiles.push(edit(&pipe, &req, &ems)?.image);
    }
    let report = collapse_sweep(&pipe, &source, attr, value, &cfg.sweep_alphas, &ems)?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("sweep.ppm"), ToyImage::row_ppm(&tiles))?;
    write_json(&report, &cfg.out.join("sweep.json"))?;
    cfg.write_effective(&cfg.out)?;
    match report.first_violation {
        Some(a) => println!(
            "sweep of {} degrees: non-target preservation first breaks at degree {a}",
            cfg.sweep_alphas.len()
        ),
        None => println!(
            "sweep of {} degrees: non-target attributes preserved everywhere",
            cfg.sweep_alphas.len()
        ),
    }
    Ok(0)
}

fn sde_dataset(schema: &AttributeSchema, attr: usize, v0: usize, v1: usize, n: usize) -> Vec<SemanticTuple> {
    schema
        .tuples()
        .into_iter()
        .filter(|t| t.values[attr] == v0 || t.values[attr] == v1)
        .step_by(3)
        .take(n)
        .collect()
}

pub fn cmd_sde(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let attr = lab.schema.attr_index(&cfg.sde_attribute).ok_or_else(|| Error::Configuration {
        context: format!("unknown attribute {}", cfg.sde_attribute),
    })?;
    let v0 = lab.schema.value_index(attr, &cfg.sde_v0).ok_or_else(|| Error::Configuration {
        context: format!("unknown value {}", cfg.sde_v0),
    })?;
    let v1 = lab.schema.value_index(attr, &cfg.sde_v1).ok_or_else(|| Error::Configuration {
        context: format!("unknown value {}", cfg.sde_v1),
    })?;
    let data = sde_dataset(&lab.schema, attr, v0, v1, cfg.sde_samples);
    let sde_cfg = SdeConfig {
        t_frac: cfg.sde_t_frac,
        cfg_scale: cfg.cfg_scale,
        steps: cfg.steps,
        pixel_domain: true,
        seed: cfg.seed,
    };

    let mut reports = Vec::new();
    let backend = backend(cfg, &lab)?;
    let pipe = Pipeline {
        backend: backend.as_ref(),
        schema: &lab.schema,
        table: &lab.table,
        protos: &lab.protos,
    };
    reports.push(sde_for_attribute(&pipe, &data, attr, v0, v1, &sde_cfg)?);
    if cfg.backend == "oracle" {
        // Paired control: the deliberately entangled world.
        let control = oracle_backend(cfg, &lab, true)?;
        let pipe = Pipeline {
            backend: &control,
            schema: &lab.schema,
            table: &lab.table,
            protos: &lab.protos,
        };
        reports.push(sde_for_attribute(&pipe, &data, attr, v0, v1, &sde_cfg)?);
    }

    std::fs::create_dir_all(&cfg.out)?;
    let mut csv = String::from("backend,attribute,v0,v1,t,norm,samples,excluded,average\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6}\n",
            r.backend,
            r.attribute,
            r.value_pair.0,
            r.value_pair.1,
            r.forward_t,
            r.norm_domain,
            r.values.len(),
            r.excluded_zero_denominator,
            r.average
        ));
    }
    std::fs::write(cfg.out.join("sde.csv"), csv)?;
    write_json(&reports, &cfg.out.join("sde.json"))?;
    cfg.write_effective(&cfg.out)?;
    for r in &reports {
        println!("sde[{}] on {}: {:.4}", r.backend, r.attribute, r.average);
    }
    Ok(0)
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let variant = match cfg.backend.as_str() {
        "joint" => Variant::Joint,
        "cross" => Variant::Cross,
        other => {
            return Err(Error::Configuration {
                context: format!("probe needs a neural backend, got {other}"),
            })
        }
    };
    let model = load_model(cfg, Some(variant))?;
    let probe_cfg = ProbeConfig {
        layer: cfg.probe_layer,
        t_frac: cfg.probe_t_frac,
        reps: cfg.probe_reps,
        seed: cfg.seed,
        ..ProbeConfig::default()
    };
    let report = probe(&model, &lab.schema, &lab.table, &lab.schedule, &probe_cfg)?;
    let shuffled = if cfg.probe_shuffles > 0 {
        Some(probe_shuffled_control(
            &model,
            &lab.schema,
            &lab.table,
            &lab.schedule,
            &probe_cfg,
            cfg.probe_shuffles,
        )?)
    } else {
        None
    };
    std::fs::create_dir_all(&cfg.out)?;
    let artifact = serde_json::json!({
        "report": &report,
        "shuffled_object_ratio": shuffled,
        "shuffles": cfg.probe_shuffles,
    });
    write_json(&artifact, &cfg.out.join("probe.json"))?;
    cfg.write_effective(&cfg.out)?;
    println!(
        "probe[{}]: color-map accuracy {:.3}, object-map ratio {:.3}{}",
        report.variant,
        report.color_accuracy,
        report.object_ratio,
        shuffled.map_or(String::new(), |s| format!(", shuffled control {s:.3}")),
    );
    Ok(0)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let backend = backend(cfg, &lab)?;
    let pipe = Pipeline {
        backend: backend.as_ref(),
        schema: &lab.schema,
        table: &lab.table,
        protos: &lab.protos,
    };
    let records: Vec<_> =
        generate_benchmark(&lab.schema).into_iter().take(cfg.bench_records).collect();
    let bench_cfg = BenchConfig { alpha_ladder: cfg.bench_alphas.clone(), ems: ems_config(cfg) };
    let report = run_benchmark(&pipe, &records, &bench_cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    write_manifest(&records, &cfg.out.join("bench_records.jsonl"))?;
    write_report_csv(&report, &cfg.out.join("bench_report.csv"))?;
    editlab::eval::write_summary_json(&report, &cfg.out.join("bench_summary.json"))?;
    cfg.write_effective(&cfg.out)?;
    println!(
        "benchmark[{}]: {} rows, preservation {:.3}, mean monotonicity {:.3}, failures {}",
        report.backend,
        report.rows.len(),
        report.overall_preservation_rate,
        report.mean_monotonicity,
        report.failures,
    );
    Ok(0)
}

pub fn cmd_props(cfg: &RunConfig) -> Result<i32> {
    let lab = lab(cfg)?;
    let grid = concentration_grid(
        &cfg.props_ms,
        &cfg.props_ds,
        &cfg.props_alphas,
        cfg.props_c,
        cfg.props_trials,
        cfg.seed,
    )?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut csv = String::from("m,d,alpha,threshold,empirical,exact,bound,std_error,holds\n");
    let mut all_hold = true;
    for r in &grid {
        let holds = r.empirical >= r.bound - 3.0 * r.std_error;
        all_hold &= holds;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6e},{:.3e},{}\n",
            r.m, r.d, r.alpha, r.threshold, r.empirical, r.exact, r.bound, r.std_error, holds
        ));
    }
    std::fs::write(cfg.out.join("props_grid.csv"), &csv)?;

    // Orthogonality of extended directions: every cross-attribute pair of
    // normalized value-pair directions, exhaustively.
    let mut max_dot: f64 = 0.0;
    let m = lab.schema.attr_count();
    let slots = lab.schema.prompt_len();
    let mut per_attr = Vec::with_capacity(m);
    for attr in 0..m {
        per_attr.push(attribute_directions(&lab.schema, &lab.table, attr)?);
    }
    for i in 0..m {
        for j in i + 1..m {
            for a in &per_attr[i] {
                for b in &per_attr[j] {
                    let dot = orthogonality_check(&[a.clone(), b.clone()], slots)?;
                    max_dot = max_dot.max(dot);
                }
            }
        }
    }
    let artifact = serde_json::json!({
        "concentration": &grid,
        "all_cells_hold": all_hold,
        "max_cross_dot": max_dot,
    });
    write_json(&artifact, &cfg.out.join("props.json"))?;
    cfg.write_effective(&cfg.out)?;
    println!("projection concentration: {} cells, all hold: {all_hold}", grid.len());
    println!("direction orthogonality: max cross-dot {max_dot:.3e}");
    Ok(0)
}

