//! Command implementations. Each returns the process exit code on success;
//! errors map to exit codes in `main`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtgnn_core::checkpoint::{restore_model, snapshot_model, Checkpoint};
use mtgnn_core::config::{FlatConfig, RunConfig};
use mtgnn_core::data::{load_csv, Split, WindowedDataset};
use mtgnn_core::error::{Error, Result};
use mtgnn_core::graph_learning::{
    sorted_edges, top_neighbors, write_adjacency_csv, write_edge_list, GraphMode,
};
use mtgnn_core::model::MtgnnModel;
use mtgnn_core::synth::{generate, write_series_csv, write_truth_edges};
use mtgnn_core::tensor::Tape;
use mtgnn_core::training::{predict_split, train, evaluate, EpochLog};
use mtgnn_core::{gradcheck, metrics};

use crate::Cli;

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::MissingInput(format!("--{what} is required for this command")))?;
    if !p.exists() {
        return Err(Error::MissingInput(format!("{} file not found: {}", what, p.display())));
    }
    Ok(p)
}

fn ensure_out_dir(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)?;
    Ok(())
}

fn build_dataset(cfg: &RunConfig, data_path: &Path) -> Result<WindowedDataset> {
    let raw = load_csv(data_path, cfg.data.forward_fill)?;
    WindowedDataset::build(
        raw,
        cfg.data.input_len,
        cfg.model.output_len,
        cfg.data.horizon_mode,
        cfg.data.train_frac,
        cfg.data.valid_frac,
        cfg.data.normalization,
        cfg.data.time_of_day,
        cfg.data.steps_per_day,
    )
}

/// Bind the node count, build the model and attach a predefined graph when
/// the mode calls for one.
fn build_model(cfg: RunConfig, num_nodes: usize) -> Result<(RunConfig, MtgnnModel)> {
    let cfg = cfg.rebind("num_nodes", &num_nodes.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = MtgnnModel::new(cfg.model.clone(), &mut rng)?;
    if cfg.model.graph_mode == GraphMode::Predefined {
        let path = cfg.predefined_graph.as_ref().ok_or_else(|| {
            Error::MissingInput("predefined graph mode needs `predefined_graph = <path>`".into())
        })?;
        let m = load_csv(Path::new(path), false)?;
        if m.rows != num_nodes || m.cols != num_nodes {
            return Err(Error::Dimension(format!(
                "predefined graph is {}x{}, data has {num_nodes} nodes",
                m.rows, m.cols
            )));
        }
        model.graph.set_predefined(m.values, num_nodes)?;
    }
    Ok((cfg, model))
}

pub fn cmd_train(cli: &Cli) -> Result<u8> {
    ensure_out_dir(cli)?;
    let data_path = require(&cli.data, "data")?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let dataset = build_dataset(&cfg, data_path)?;
    let (cfg, mut model) = build_model(cfg, dataset.num_nodes())?;
    let effective = cfg.flat.to_lines();
    print!("{effective}");

    let log_path = cli.out_dir.join("train_log.csv");
    let mut log = fs::File::create(&log_path)?;
    for line in effective.lines() {
        writeln!(log, "# {line}")?;
    }
    writeln!(log, "{}", EpochLog::CSV_HEADER)?;

    let summary = train(&mut model, &dataset, &cfg.train, |entry| {
        let line = entry.to_csv_line();
        println!("{line}");
        let _ = writeln!(log, "{line}");
    })?;
    drop(log);

    let n = dataset.num_nodes();
    let adjacency = if summary.global_adjacency.is_empty() {
        None
    } else {
        Some((n, summary.global_adjacency.clone()))
    };
    let ckpt = snapshot_model(&model, effective, adjacency);
    let ckpt_path = cli.out_dir.join("model.ckpt");
    ckpt.save(&ckpt_path)?;

    let report = evaluate(&model, &dataset, Split::Test, cfg.train.batch_size)?;
    fs::write(cli.out_dir.join("test_metrics.csv"), report.to_csv())?;
    fs::write(cli.out_dir.join("test_metrics.txt"), report.to_table())?;
    println!(
        "best validation mae {:.6} at epoch {}",
        summary.state.best_valid_mae, summary.state.best_epoch
    );
    println!("test metrics:\n{}", report.to_table());
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(0)
}

/// Rebuild a model and its typed config from a checkpoint, applying any
/// command-line overrides on top of the stored configuration.
fn model_from_checkpoint(cli: &Cli) -> Result<(RunConfig, MtgnnModel, Checkpoint)> {
    let path = require(&cli.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let mut flat = FlatConfig::default();
    flat.apply_text(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    flat.apply_overrides(&cli.overrides)?;
    let cfg = RunConfig::from_flat(flat)?;
    let num_nodes = cfg.model.num_nodes;
    if num_nodes == 0 {
        return Err(Error::Checkpoint("checkpoint config has no bound node count".into()));
    }
    let (cfg, mut model) = build_model(cfg, num_nodes)?;
    restore_model(&mut model, &ckpt)?;
    Ok((cfg, model, ckpt))
}

pub fn cmd_eval(cli: &Cli) -> Result<u8> {
    ensure_out_dir(cli)?;
    let (cfg, model, _) = model_from_checkpoint(cli)?;
    let data_path = require(&cli.data, "data")?;
    let dataset = build_dataset(&cfg, data_path)?;
    if dataset.num_nodes() != cfg.model.num_nodes {
        return Err(Error::Dimension(format!(
            "data has {} nodes, checkpoint was trained on {}",
            dataset.num_nodes(),
            cfg.model.num_nodes
        )));
    }
    let (pred, truth) = predict_split(&model, &dataset, Split::Test, cfg.train.batch_size)?;
    let report = metrics::metrics(&pred, &truth, dataset.target_len, dataset.num_nodes())?;
    fs::write(cli.out_dir.join("test_metrics.csv"), report.to_csv())?;
    fs::write(cli.out_dir.join("test_metrics.txt"), report.to_table())?;
    let mut pf = fs::File::create(cli.out_dir.join("predictions.csv"))?;
    writeln!(pf, "step,node,prediction,truth")?;
    let n = dataset.num_nodes();
    let q = dataset.target_len;
    for (si, chunk) in pred.chunks(q * n).enumerate() {
        let t_chunk = &truth[si * q * n..(si + 1) * q * n];
        for step in 0..q {
            for v in 0..n {
                writeln!(
                    pf,
                    "{},{},{},{}",
                    si * q + step + 1,
                    v,
                    chunk[step * n + v],
                    t_chunk[step * n + v]
                )?;
            }
        }
    }
    print!("{}", report.to_table());
    Ok(0)
}

pub fn cmd_forecast(cli: &Cli) -> Result<u8> {
    ensure_out_dir(cli)?;
    let (cfg, model, _) = model_from_checkpoint(cli)?;
    let data_path = require(&cli.data, "data")?;
    let raw = load_csv(data_path, cfg.data.forward_fill)?;
    if raw.cols != cfg.model.num_nodes {
        return Err(Error::Dimension(format!(
            "data has {} nodes, checkpoint was trained on {}",
            raw.cols, cfg.model.num_nodes
        )));
    }
    let p = cfg.model.input_len;
    if raw.rows < p {
        return Err(Error::Length { required: p, got: raw.rows });
    }
    // Reuse the stored training statistics? Forecast normalizes with stats
    // fitted on the provided series' training fraction, matching eval.
    let dataset = build_dataset_for_forecast(&cfg, raw)?;
    let n = dataset.num_nodes();
    let start = dataset.raw.rows - p;
    let d = dataset.in_dim;
    let mut x = vec![0.0; d * n * p];
    for v in 0..n {
        for t in 0..p {
            x[v * p + t] = dataset.stats.normalize(v, dataset.raw.get(start + t, v));
        }
    }
    if d == 2 {
        for v in 0..n {
            for t in 0..p {
                x[n * p + v * p + t] = ((start + t) % dataset.steps_per_day) as f64
                    / dataset.steps_per_day as f64;
            }
        }
    }
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let adj = match cfg.model.graph_mode {
        GraphMode::Dynamic => None,
        _ => Some(model.graph.compute_adjacency(&mut tape, None)?),
    };
    let xid = tape.constant(x, &[1, d, n, p]);
    let out = model.forward(&mut tape, xid, adj.as_ref(), None, false, &mut rng)?;
    let mut pred = tape.data(out).to_vec();
    dataset.denormalize_predictions(&mut pred, cfg.model.output_len);

    let path = cli.out_dir.join("forecast.csv");
    let mut f = fs::File::create(&path)?;
    writeln!(f, "step,node,prediction")?;
    for step in 0..cfg.model.output_len {
        for v in 0..n {
            writeln!(f, "{},{},{}", step + 1, v, pred[step * n + v])?;
        }
    }
    println!("wrote {}", path.display());
    Ok(0)
}

fn build_dataset_for_forecast(
    cfg: &RunConfig,
    raw: mtgnn_core::data::RawSeries,
) -> Result<WindowedDataset> {
    WindowedDataset::build(
        raw,
        cfg.data.input_len,
        cfg.model.output_len,
        cfg.data.horizon_mode,
        cfg.data.train_frac,
        cfg.data.valid_frac,
        cfg.data.normalization,
        cfg.data.time_of_day,
        cfg.data.steps_per_day,
    )
}

pub fn cmd_export_graph(cli: &Cli) -> Result<u8> {
    ensure_out_dir(cli)?;
    let (cfg, model, _) = model_from_checkpoint(cli)?;
    if cfg.model.graph_mode == GraphMode::Dynamic {
        return Err(Error::Config(
            "dynamic graphs are input-conditioned; there is no global adjacency to export".into(),
        ));
    }
    let n = cfg.model.num_nodes;
    let mut tape = Tape::new();
    let adj = model.graph.compute_adjacency(&mut tape, None)?;
    let values = adj.materialize(&tape);

    let adj_path = cli.out_dir.join("adjacency.csv");
    let mut f = fs::File::create(&adj_path)?;
    write_adjacency_csv(&mut f, &values, n)?;
    let edges_path = cli.out_dir.join("edges.csv");
    let mut f = fs::File::create(&edges_path)?;
    write_edge_list(&mut f, &values, n)?;
    let nb_path = cli.out_dir.join("neighbors.csv");
    let mut f = fs::File::create(&nb_path)?;
    writeln!(f, "node,rank,neighbor,weight")?;
    for v in 0..n {
        for (rank, (u, w)) in top_neighbors(&values, n, v, cfg.model.graph_k).iter().enumerate() {
            writeln!(f, "{v},{},{u},{w:.11e}", rank + 1)?;
        }
    }
    let edge_count = sorted_edges(&values, n).len();
    println!(
        "wrote {} ({edge_count} edges), {}, {}",
        adj_path.display(),
        edges_path.display(),
        nb_path.display()
    );
    Ok(0)
}

pub fn cmd_gradcheck(cli: &Cli) -> Result<u8> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let reports = gradcheck::run_suite(
        cfg.train.seed,
        cli.op.as_deref(),
        gradcheck::DEFAULT_INSTANCES,
    )?;
    println!("{:<22} {:>12}  {:>9}  status", "op", "max_rel_err", "instances");
    let mut failed: Vec<&str> = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err <= cli.tol;
        println!(
            "{:<22} {:>12.3e}  {:>9}  {}",
            r.op,
            r.max_rel_err,
            r.instances,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(&r.op);
        }
    }
    if failed.is_empty() {
        println!("all checks within tolerance {:.1e}", cli.tol);
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

pub fn cmd_synth(cli: &Cli) -> Result<u8> {
    ensure_out_dir(cli)?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let data = generate(&cfg.synth)?;
    let series_path = cli.out_dir.join("series.csv");
    let mut f = fs::File::create(&series_path)?;
    write_series_csv(&mut f, &data.series)?;
    let edges_path = cli.out_dir.join("true_edges.csv");
    let mut f = fs::File::create(&edges_path)?;
    write_truth_edges(&mut f, &data.edges)?;
    println!(
        "wrote {} ({} rows x {} nodes) and {} ({} edges)",
        series_path.display(),
        data.series.rows,
        data.series.cols,
        edges_path.display(),
        data.edges.len()
    );
    Ok(0)
}
