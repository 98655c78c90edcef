use std::fs;
use std::path::{Path, PathBuf};

use hiermoe::diffusion::{GenConfig, StepTrace, Stage2Model};
use hiermoe::harness::{
    attribute as attribute_item, bind_encoder, bind_stage2, bottleneck_eval, build_data, encode_all, evaluate,
    finetune_routers, latents, mean_time_kl, moving_average, mse, partition_recovery, predict, random_input_cosine,
    ridge_oracle, routing_stats as stats_of, sample_mse, spearman, train_stage1 as run_stage1,
    train_stage2 as run_stage2, write_csv, write_data, AttributionConfig, Checkpoint, DataConfig, MetricsReport,
    RunConfig, Splits, FRACTIONS,
};
use hiermoe::tensor::Tensor;
use hiermoe::world::Dataset;
use hiermoe::{Error, Result};

use crate::Common;

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.data {
        cfg.data.dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    Ok(p.to_path_buf())
}

fn section(c: &Common, name: &str) -> Result<PathBuf> {
    mkdir(&c.out.join(name))
}

fn checkpoints(c: &Common) -> Result<PathBuf> {
    section(c, "checkpoints")
}

fn load_checkpoint(c: &Common, given: Option<PathBuf>, stem: &str) -> Result<Checkpoint> {
    let path = given.unwrap_or_else(|| c.out.join("checkpoints").join(format!("{stem}.json")));
    Checkpoint::load(&path)
}

/// The data a checkpoint was trained against, unless `--data` redirects it.
fn data_of(c: &Common, ck: &Checkpoint) -> DataConfig {
    let mut d = ck.manifest.config.data.clone();
    if let Some(dir) = &c.data {
        d.dir = Some(dir.clone());
    }
    d
}

fn head(data: &Dataset, n: usize) -> Dataset {
    data.select(&(0..n.min(data.len())).collect::<Vec<_>>())
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn series_rows(report: &MetricsReport, names: &[&str], ma: Option<(&str, usize)>) -> Vec<Vec<String>> {
    let none = Vec::new();
    let get = |n: &str| report.series.get(n).unwrap_or(&none);
    let smooth = ma.map(|(name, w)| moving_average(&get(name).iter().map(|p| p.1).collect::<Vec<_>>(), w));
    get(names[0])
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            let mut row = vec![step.to_string()];
            for n in names {
                let v = get(n).iter().find(|p| p.0 == step).map(|p| p.1);
                row.push(v.map(num).unwrap_or_default());
            }
            if let Some(s) = &smooth {
                row.push(s.get(i).copied().map(num).unwrap_or_default());
            }
            row
        })
        .collect()
}

fn write_time_preference(dir: &Path, model: &Stage2Model, store: &hiermoe::tensor::ParamStore) -> Result<()> {
    let p = model.time_preference(store)?;
    let t_max = model.config.t_max;
    let mut header = vec!["tau".to_string(), "t".to_string()];
    header.extend((0..p.cols()).map(|l| format!("level_{l}")));
    header.push("expected_level".into());
    let rows: Vec<Vec<String>> = (0..p.rows())
        .map(|tau| {
            let r = p.row_slice(tau);
            let mut row = vec![tau.to_string(), (t_max - 1 - tau).to_string()];
            row.extend(r.iter().map(|&x| num(x)));
            row.push(num(r.iter().enumerate().map(|(l, w)| l as f64 * w).sum()));
            row
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("time_preference.csv"), &h, &rows)
}

fn write_trace(dir: &Path, trace: &[StepTrace]) -> Result<()> {
    let rows: Vec<Vec<String>> = trace
        .iter()
        .flat_map(|s| {
            s.mass.iter().map(move |&(l, e, m)| {
                vec![
                    s.item.to_string(),
                    s.t.to_string(),
                    s.tau.to_string(),
                    l.to_string(),
                    e.to_string(),
                    num(m),
                    num(s.p_time[l]),
                ]
            })
        })
        .collect();
    write_csv(
        &dir.join("routing_trace.csv"),
        &["item", "t", "tau", "level", "expert", "attention_mass", "p_time_level"],
        &rows,
    )
}

pub fn gen_data(c: &Common) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let dir = section(c, "data")?;
    let gen_cfg = DataConfig {
        dir: None,
        ..cfg.data.clone()
    };
    let mut subjects = vec![cfg.data.subject, cfg.finetune.subject];
    subjects.dedup();
    let mut report = MetricsReport::default();
    for s in subjects {
        let splits = build_data(&gen_cfg, s)?;
        write_data(&gen_cfg, &splits, &dir)?;
        let planted = splits.subject.planted(&splits.world);
        let rows: Vec<Vec<String>> = planted
            .iter()
            .zip(&splits.subject.gains)
            .enumerate()
            .map(|(i, (g, gain))| vec![i.to_string(), g.to_string(), num(*gain)])
            .collect();
        write_csv(&dir.join(format!("planted_s{s}.csv")), &["voxel", "group", "gain"], &rows)?;
        report.set(&format!("s{s}_train"), splits.train.len() as f64);
        report.set(&format!("s{s}_test"), splits.test.len() as f64);
    }
    report.set("voxels", cfg.data.world.voxels as f64);
    report.set("groups", cfg.data.world.groups as f64);
    report.write(&dir)?;
    Ok(dir)
}

pub fn train_stage1(c: &Common) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let ck_dir = checkpoints(c)?;
    let Splits { train, test, .. } = build_data(&cfg.data, cfg.data.subject)?;
    let mut run = run_stage1(&cfg, &train, &test, Some(&ck_dir))?;
    run.checkpoint.save(&ck_dir, "stage1")?;
    let dir = section(c, "train-stage1")?;
    run.report.write(&dir)?;
    let r = &run.report;
    write_csv(
        &dir.join("stage1_loss.csv"),
        &["step", "loss", "loss_mse", "loss_contrastive", "loss_balance", "loss_ma100"],
        &series_rows(r, &["loss", "loss_mse", "loss_contrastive", "loss_balance"], Some(("loss", 100))),
    )?;
    write_csv(
        &dir.join("stage1_eval.csv"),
        &["step", "cosine_img", "cosine_text"],
        &series_rows(r, &["test_cosine_img", "test_cosine_text"], None),
    )?;
    Ok(dir)
}

pub fn train_stage2(c: &Common, checkpoint: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let stage1 = load_checkpoint(c, checkpoint, "stage1")?;
    let ck_dir = checkpoints(c)?;
    let Splits { train, test, .. } = build_data(&data_of(c, &stage1), stage1.manifest.config.data.subject)?;
    let mut run = run_stage2(&cfg, &stage1, &train, &test, Some(&ck_dir))?;
    run.checkpoint.save(&ck_dir, "stage2")?;
    let dir = section(c, "train-stage2")?;
    run.report.write(&dir)?;
    write_csv(
        &dir.join("stage2_loss.csv"),
        &["step", "loss", "loss_denoise", "denoise_ma100"],
        &series_rows(&run.report, &["loss", "loss_denoise"], Some(("loss_denoise", 100))),
    )?;
    write_csv(
        &dir.join("stage2_eval.csv"),
        &["step", "test_denoise", "time_kl_mean"],
        &series_rows(&run.report, &["test_denoise", "time_kl_mean"], None),
    )?;
    write_time_preference(&dir, &run.model, &run.checkpoint.store)?;
    Ok(dir)
}

pub fn finetune(c: &Common, checkpoint: Option<PathBuf>, fraction: Option<f64>, sweep: bool) -> Result<PathBuf> {
    let mut cfg = load_config(c)?;
    if let Some(f) = fraction {
        cfg.finetune.fraction = f;
        cfg.validate()?;
    }
    let source = load_checkpoint(c, checkpoint, "stage1")?;
    let ck_dir = checkpoints(c)?;
    let dir = section(c, "finetune-routers")?;
    let subject = cfg.finetune.subject;
    let Splits { train, test, .. } = build_data(&data_of(c, &source), subject)?;
    let fractions: Vec<f64> = if sweep { FRACTIONS.to_vec() } else { vec![cfg.finetune.fraction] };
    let mut report = MetricsReport::default();
    let mut rows = Vec::new();
    for &f in &fractions {
        let mut run = finetune_routers(&cfg, &source, &train, f, &test)?;
        run.checkpoint.save(&ck_dir, &format!("finetune_f{f}"))?;
        report.merge(&format!("f{f}."), &run.report);
        let s = &run.report;
        rows.push((f, s.get("subset_size"), s.get("pre_cosine_img"), s.get("warm_cosine_img"), s.get("post_cosine_img")));
        report.set("trainable_fraction", s.get("trainable_fraction").unwrap_or(f64::NAN));
    }
    let retrain = if sweep {
        // from-scratch reference on the new subject with the source's settings
        let mut rc = source.manifest.config.clone();
        rc.seed = cfg.seed;
        rc.data.subject = subject;
        let mut run = run_stage1(&rc, &train, &test, Some(&ck_dir))?;
        run.checkpoint.save(&ck_dir, &format!("retrain_s{subject}"))?;
        let (ci, _) = evaluate(&run.encoder, &run.checkpoint.store, &test)?;
        report.set("retrain_cosine_img", ci);
        Some(ci)
    } else {
        None
    };
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|&(f, n, pre, warm, post)| {
            vec![
                num(f),
                opt(n),
                opt(pre),
                opt(warm),
                opt(post),
                opt(retrain),
                opt(post.zip(retrain).map(|(p, r)| p / r)),
            ]
        })
        .collect();
    write_csv(
        &dir.join("finetune_curve.csv"),
        &["fraction", "subset_size", "pre_cosine", "warm_cosine", "post_cosine", "retrain_cosine", "recovered"],
        &csv_rows,
    )?;
    report.write(&dir)?;
    Ok(dir)
}

/// Encoder embeddings and target latents of the first `n` test items.
fn stage2_inputs(
    c: &Common,
    ck: &Checkpoint,
    model: &Stage2Model,
    n: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>, Dataset)> {
    let Splits { test, .. } = build_data(&data_of(c, ck), ck.manifest.config.data.subject)?;
    let items = head(&test, n);
    let enc = bind_encoder(ck)?;
    let (stacked, _) = encode_all(&enc, &ck.store, &items.x)?;
    let z0 = latents(&items, model)?;
    Ok((stacked, z0, items))
}

pub fn sample(c: &Common, checkpoint: Option<PathBuf>, items: Option<usize>, guidance: Option<f64>) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, checkpoint, "stage2")?;
    let model = bind_stage2(&ck)?;
    let (stacked, z0, _) = stage2_inputs(c, &ck, &model, items.unwrap_or(cfg.eval.sample_items))?;
    let gen = GenConfig {
        guidance: guidance.unwrap_or(cfg.gen.guidance),
        ..cfg.gen.clone()
    };
    let refs: Vec<&Tensor> = stacked.iter().collect();
    let (zs, trace) = model.sample(&ck.store, &refs, &gen, true)?;
    let dir = section(c, "sample")?;
    let mut report = MetricsReport::default();
    let mut rows = Vec::new();
    let mut total = 0.0;
    for (i, (z, t)) in zs.iter().zip(&z0).enumerate() {
        let e = mse(z.data(), t.data())?;
        total += e;
        report.push("item_mse", i as u64, e);
        for tok in 0..z.rows() {
            for (d, (a, b)) in z.row_slice(tok).iter().zip(t.row_slice(tok)).enumerate() {
                rows.push(vec![i.to_string(), tok.to_string(), d.to_string(), num(*a), num(*b)]);
            }
        }
    }
    report.set("mse", total / zs.len().max(1) as f64);
    report.set("guidance", gen.guidance);
    report.set("items", zs.len() as f64);
    write_csv(&dir.join("samples.csv"), &["item", "token", "dim", "sampled", "target"], &rows)?;
    write_trace(&dir, &trace)?;
    report.write(&dir)?;
    Ok(dir)
}

pub fn eval(c: &Common, checkpoint: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, checkpoint, "stage1")?;
    let run_cfg = &ck.manifest.config;
    let splits = build_data(&data_of(c, &ck), run_cfg.data.subject)?;
    let enc = bind_encoder(&ck)?;
    let mut report = MetricsReport::default();
    let (ci, ct) = evaluate(&enc, &ck.store, &splits.test)?;
    report.set("cosine_img", ci);
    report.set("cosine_text", ct);
    let (pi, pt) = predict(&enc, &ck.store, &splits.test.x)?;
    report.set("mse_img", mse(pi.data(), splits.test.y_img.data())?);
    report.set("mse_text", mse(pt.data(), splits.test.y_text.data())?);
    let (ri, rt) = ridge_oracle(&splits.train, &splits.test, cfg.eval.ridge_lambda)?;
    report.set("ridge_cosine_img", ri);
    report.set("ridge_cosine_text", rt);
    let (ni, nt) = random_input_cosine(&enc, &ck.store, &splits.train, &splits.test, cfg.seed)?;
    report.set("random_input_cosine_img", ni);
    report.set("random_input_cosine_text", nt);
    let planted = splits.subject.planted(&splits.world);
    let pr = partition_recovery(
        &enc,
        &ck.store,
        &splits.test,
        &planted,
        splits.world.spec.groups,
        cfg.eval.random_partitions,
        cfg.seed,
    )?;
    report.set("rand_index", pr.rand_index);
    report.set("rand_index_baseline", pr.baseline);
    if ck.manifest.kind == "stage2" {
        let model = bind_stage2(&ck)?;
        let (stacked, z0, _) = stage2_inputs(c, &ck, &model, cfg.eval.sample_items)?;
        let refs: Vec<&Tensor> = stacked.iter().collect();
        let cond = sample_mse(&model, &ck.store, &refs, &z0, &cfg.gen)?;
        let uncond = GenConfig {
            guidance: 0.0,
            ..cfg.gen.clone()
        };
        let un = sample_mse(&model, &ck.store, &refs, &z0, &uncond)?;
        report.set("sample_mse", cond);
        report.set("sample_mse_unconditional", un);
        report.set("sample_mse_reduction", 1.0 - cond / un);
        report.set("time_kl_mean", mean_time_kl(&model, &ck.store)?);
    }
    let dir = section(c, "eval")?;
    report.write(&dir)?;
    Ok(dir)
}

pub fn bottleneck(c: &Common, checkpoint: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, checkpoint, "stage1")?;
    let splits = build_data(&data_of(c, &ck), ck.manifest.config.data.subject)?;
    let enc = bind_encoder(&ck)?;
    let rows = bottleneck_eval(&enc, &ck.store, &splits.train, &splits.test, &cfg.eval.ranks, cfg.seed)?;
    let dir = section(c, "bottleneck")?;
    let mut report = MetricsReport::default();
    let (mut ranks, mut cos) = (Vec::new(), Vec::new());
    for r in &rows {
        match r.rank {
            Some(k) => {
                report.push("cosine_img", k as u64, r.cosine_img);
                ranks.push(k as f64);
                cos.push(r.cosine_img);
            }
            None => report.set("random_input_cosine_img", r.cosine_img),
        }
    }
    if ranks.len() >= 2 {
        report.set("spearman_rank_cosine", spearman(&ranks, &cos)?);
    }
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let k = r.rank.map(|k| k.to_string()).unwrap_or_else(|| "random".into());
            vec![k, num(r.cosine_img), num(r.cosine_text)]
        })
        .collect();
    write_csv(&dir.join("bottleneck.csv"), &["rank", "cosine_img", "cosine_text"], &csv)?;
    report.write(&dir)?;
    Ok(dir)
}

pub fn attribute(c: &Common, checkpoint: Option<PathBuf>, items: usize, fixed_routing: bool) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, checkpoint, "stage1")?;
    let splits = build_data(&data_of(c, &ck), ck.manifest.config.data.subject)?;
    let enc = bind_encoder(&ck)?;
    let planted = splits.subject.planted(&splits.world);
    let test = head(&splits.test, items);
    let mut report = MetricsReport::default();
    let mut rows = Vec::new();
    let groups = splits.world.spec.groups;
    let mut group_abs = vec![0.0; groups];
    for i in 0..test.len() {
        let a = attribute_item(
            &enc,
            &ck.store,
            test.x.row_slice(i),
            test.y_img.row_slice(i),
            &splits.train,
            &AttributionConfig {
                n_baselines: cfg.eval.n_baselines,
                n_interp: cfg.eval.n_interp,
                seed: cfg.seed.wrapping_add(i as u64),
                fixed_routing,
            },
        )?;
        report.push("gap", i as u64, a.gap);
        report.push("attribution_sum", i as u64, a.total);
        report.push("completeness_error", i as u64, (a.total - a.gap).abs() / a.gap.abs().max(1e-12));
        for (v, &x) in a.attr.iter().enumerate() {
            rows.push(vec![i.to_string(), v.to_string(), planted[v].to_string(), num(x)]);
            group_abs[planted[v]] += x.abs() / test.len() as f64;
        }
    }
    let errs: Vec<f64> = report.series.get("completeness_error").map(|s| s.iter().map(|p| p.1).collect()).unwrap_or_default();
    if !errs.is_empty() {
        report.set("completeness_error_mean", errs.iter().sum::<f64>() / errs.len() as f64);
        report.set("completeness_error_max", errs.iter().cloned().fold(0.0, f64::max));
    }
    let dir = section(c, "attribute")?;
    write_csv(&dir.join("attribution.csv"), &["item", "voxel", "group", "attribution"], &rows)?;
    let g: Vec<Vec<String>> = group_abs.iter().enumerate().map(|(k, v)| vec![k.to_string(), num(*v)]).collect();
    write_csv(&dir.join("attribution_groups.csv"), &["group", "mean_abs_attribution"], &g)?;
    report.write(&dir)?;
    Ok(dir)
}

pub fn routing_stats(c: &Common, checkpoint: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, checkpoint, "stage2")?;
    let model = bind_stage2(&ck)?;
    let (stacked, _, _) = stage2_inputs(c, &ck, &model, cfg.eval.trace_items)?;
    let refs: Vec<&Tensor> = stacked.iter().collect();
    let stats = stats_of(&model, &ck.store, &refs, &cfg.gen)?;
    let dir = section(c, "routing-stats")?;
    let mut report = MetricsReport::default();
    report.set("spearman_level_tau", stats.spearman);
    for (tau, l) in stats.expected_level.iter().enumerate() {
        report.push("expected_level", tau as u64, *l);
    }
    let mut rows = Vec::new();
    for (l, u) in stats.utilization.iter().enumerate() {
        if let Some(u) = u {
            for (e, x) in u.iter().enumerate() {
                rows.push(vec![l.to_string(), e.to_string(), num(*x)]);
            }
        }
    }
    write_csv(&dir.join("utilization.csv"), &["level", "expert", "utilization"], &rows)?;
    write_time_preference(&dir, &model, &ck.store)?;
    write_trace(&dir, &stats.trace)?;
    report.write(&dir)?;
    Ok(dir)
}

pub fn report(c: &Common) -> Result<PathBuf> {
    let mut sections: Vec<PathBuf> = fs::read_dir(&c.out)
        .map_err(|e| Error::io(&c.out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file() && !p.ends_with("report"))
        .collect();
    sections.sort();
    if sections.is_empty() {
        return Err(Error::Config(format!("no metrics.json under {}", c.out.display())));
    }
    let mut rows = Vec::new();
    let mut md = String::from("# Run summary\n");
    let mut all = MetricsReport::default();
    for s in &sections {
        let name = s.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let m = MetricsReport::read_json(&s.join("metrics.json"))?;
        md.push_str(&format!("\n## {name}\n\n| metric | value |\n|---|---|\n"));
        for (k, v) in &m.summary {
            md.push_str(&format!("| {k} | {v:.6} |\n"));
            rows.push(vec![name.clone(), k.clone(), num(*v)]);
        }
        all.merge(&format!("{name}."), &MetricsReport {
            series: Default::default(),
            summary: m.summary,
        });
    }
    let dir = section(c, "report")?;
    write_csv(&dir.join("summary.csv"), &["command", "metric", "value"], &rows)?;
    hiermoe::harness::metrics::write_text(&dir.join("report.md"), &md)?;
    all.write(&dir)?;
    Ok(dir)
}
