use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use edgegnn::gnn::{default_registry, GraphTopology};
use edgegnn::ir::{self, ExecMode, ModelGraph, Session, TensorMap};
use edgegnn::models::{ArchSpec, ModelInfo, TrainedModel, INPUT};
use edgegnn::par::Parallelism;
use edgegnn::pipeline::{
    self, generate_synthetic, ingest_csv, window, write_csv, BenchConfig, CsvOptions, EvalConfig, ForecastDataset,
    SynthConfig,
};
use edgegnn::training::{fit_with, EpochReport, Optimizer, TrainConfig};
use edgegnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::{Failure, Status};
use crate::{
    BenchArgs, Cli, Command, DataArgs, EvalArgs, ExportArgs, GenDataArgs, InferArgs, OptimizerArg, SplitArg, TrainArgs,
    VerifyArgs,
};

type Result<T> = std::result::Result<T, Failure>;

pub fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::GenData(args) => gen_data(args, json),
        Command::Train(args) => train(args, json),
        Command::Export(args) => export(args, json),
        Command::Infer(args) => infer(args, json),
        Command::Eval(args) => eval(args, json),
        Command::VerifyEquivalence(args) => verify(args, json),
        Command::Bench(args) => bench(args, json),
    }
}

fn default_metadata(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(Status::Execution, e))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::new(Status::Execution, e)),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(Status::Execution, e))?;
    std::fs::write(path, text).map_err(|e| Failure::new(Status::Data, format!("{}: {e}", path.display())))
}

fn load_series(data: &DataArgs) -> Result<Vec<pipeline::StationSeries>> {
    let metadata = data.metadata.clone().unwrap_or_else(|| default_metadata(&data.data));
    Ok(ingest_csv(
        &data.data,
        metadata,
        CsvOptions {
            gap_policy: data.gap_policy.into(),
        },
    )?)
}

fn load_model(path: &Path) -> Result<(ModelGraph, ModelInfo)> {
    let graph = ir::load(path).map_err(|e| Failure::new(Status::Model, format!("{}: {e}", path.display())))?;
    let info = ModelInfo::from_graph(&graph)?;
    Ok((graph, info))
}

/// Windows the data with the model's `k`/`h` and selects the split.
fn model_dataset(data: &DataArgs, info: &ModelInfo, split: SplitArg) -> Result<ForecastDataset> {
    let ds = window(&load_series(data)?, info.input_window, info.horizon)?;
    Ok(match split {
        SplitArg::Test => ds.split_chronological().test,
        SplitArg::All => ds,
    })
}

fn threads(value: u64) -> usize {
    usize::try_from(value).unwrap_or(usize::MAX)
}

fn gen_data(args: GenDataArgs, json: bool) -> Result<()> {
    let config = SynthConfig {
        n_stations: args.capacities.len(),
        days: args.days,
        capacities: args.capacities,
        seed: args.seed,
        shared_weather: !args.independent_weather,
        ..SynthConfig::default()
    };
    let series = generate_synthetic(&config)?;
    let metadata = args.metadata.unwrap_or_else(|| default_metadata(&args.out));
    write_csv(&series, &args.out, &metadata)?;
    let summary = json!({
        "csv": args.out,
        "metadata": metadata,
        "stations": series.len(),
        "points_per_station": series[0].len(),
        "seed": config.seed,
    });
    if json {
        print_json(&summary)
    } else {
        println!(
            "wrote {} stations x {} points to {} (capacities in {})",
            series.len(),
            series[0].len(),
            args.out.display(),
            metadata.display()
        );
        Ok(())
    }
}

fn train(args: TrainArgs, json: bool) -> Result<()> {
    let series = load_series(&args.data)?;
    let dataset = window(&series, args.k, args.h)?;
    let topology = GraphTopology::fully_connected(series.len());
    let spec = ArchSpec::new(args.arch.into(), args.k, args.h, args.hidden_dim, topology)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        patience: (args.patience > 0).then_some(args.patience),
    };
    let mut report_file = match &args.report {
        Some(path) => Some(
            std::fs::File::create(path).map_err(|e| Failure::new(Status::Data, format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    let mut write_error = None;
    let outcome = fit_with(&dataset, spec, &config, |r: &EpochReport| {
        let line = serde_json::to_string(r).expect("epoch report serializes");
        if json {
            println!("{line}");
        } else {
            println!(
                "epoch {:>4}  train {:.5}  val {:.5}  {} ms",
                r.epoch, r.train_loss, r.val_loss, r.wall_ms
            );
        }
        if let Some(file) = report_file.as_mut() {
            if let Err(e) = writeln!(file, "{line}") {
                write_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(Failure::new(Status::Data, format!("writing report: {e}")));
    }
    outcome.model.save_checkpoint(&args.out)?;
    if let Some(path) = &args.export {
        ir::save(&outcome.model.to_graph()?, path)?;
    }
    let best = &outcome.history[outcome.best_epoch];
    let summary = json!({
        "checkpoint": args.out,
        "model": args.export,
        "arch": outcome.model.spec.kind,
        "samples": dataset.len(),
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_loss": best.val_loss,
    });
    if json {
        println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    } else {
        println!(
            "best epoch {} (val loss {:.5}); checkpoint {}",
            outcome.best_epoch,
            best.val_loss,
            args.out.display()
        );
    }
    Ok(())
}

fn export(args: ExportArgs, json: bool) -> Result<()> {
    let model = TrainedModel::load_checkpoint(&args.checkpoint)?;
    let graph = model.to_graph()?;
    ir::save(&graph, &args.out)?;
    let bytes = std::fs::metadata(&args.out).map(|m| m.len()).unwrap_or(0);
    if json {
        print_json(&json!({
            "model": args.out,
            "arch": model.spec.kind,
            "nodes": graph.nodes.len(),
            "op_types": graph.op_types(),
            "bytes": bytes,
        }))
    } else {
        println!(
            "exported {} ({} nodes: {}) to {} ({bytes} bytes)",
            model.spec.kind,
            graph.nodes.len(),
            graph.op_types().join(", "),
            args.out.display()
        );
        Ok(())
    }
}

fn infer(args: InferArgs, json: bool) -> Result<()> {
    let (graph, info) = load_model(&args.model)?;
    let dataset = model_dataset(&args.data, &info, args.split)?;
    let registry = default_registry();
    let config = EvalConfig {
        mode: args.run.mode.into(),
        threads: threads(args.run.threads),
    };
    let predictions = pipeline::predict_dataset(&graph, &registry, &dataset, config)?;
    let n = dataset.n_stations;
    let mut writer = csv::Writer::from_path(&args.out).map_err(|e| Failure::new(Status::Data, e))?;
    let mut header = vec!["timestamp".to_owned()];
    header.extend(dataset.station_ids.iter().cloned());
    writer.write_record(&header).map_err(|e| Failure::new(Status::Data, e))?;
    for (s, row) in dataset.samples.iter().zip(predictions.chunks(n)) {
        let target = dataset.timestamps[s.anchor + dataset.horizon];
        let mut record = vec![target.format("%Y-%m-%dT%H:%M:%S").to_string()];
        record.extend(row.iter().map(f64::to_string));
        writer.write_record(&record).map_err(|e| Failure::new(Status::Data, e))?;
    }
    writer.flush().map_err(|e| Failure::new(Status::Data, e))?;
    if json {
        print_json(&json!({ "predictions": args.out, "samples": dataset.len(), "stations": n }))
    } else {
        println!("wrote {} predictions for {n} stations to {}", dataset.len(), args.out.display());
        Ok(())
    }
}

fn eval(args: EvalArgs, json: bool) -> Result<()> {
    let (graph, info) = load_model(&args.model)?;
    let dataset = model_dataset(&args.data, &info, args.split)?;
    let config = EvalConfig {
        mode: args.run.mode.into(),
        threads: threads(args.run.threads),
    };
    let report = pipeline::evaluate(&graph, &default_registry(), &dataset, config)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    if json {
        print_json(&report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}

#[derive(Serialize)]
struct Equivalence {
    samples: usize,
    tolerance: f64,
    max_abs_divergence: BTreeMap<String, f64>,
    passed: bool,
}

fn verify(args: VerifyArgs, json: bool) -> Result<()> {
    let (graph, info) = load_model(&args.model)?;
    let input = match &args.data {
        Some(path) => {
            let data = DataArgs {
                data: path.clone(),
                metadata: args.metadata.clone(),
                gap_policy: crate::GapArg::Reject,
            };
            let ds = model_dataset(&data, &info, SplitArg::Test)?;
            if ds.is_empty() {
                return Err(Failure::new(Status::Data, "dataset has no samples"));
            }
            normalized_inputs(&ds, &info)
        }
        None => random_inputs(&info, args.batch.unwrap_or(8), args.seed)?,
    };
    let samples = input.shape()[0];
    let feeds = TensorMap::from([(INPUT.to_owned(), input)]);
    let registry = default_registry();
    let parallelism = if args.threads > 1 {
        Parallelism::Parallel
    } else {
        Parallelism::Sequential
    };
    let session = Session::new(&graph, &registry)?.with_parallelism(parallelism);
    let batched = session.run(&feeds, ExecMode::Batched)?;
    let serialized = edgegnn::par::with_threads(threads(args.threads), || session.run(&feeds, ExecMode::Serialized))?;
    let mut divergence = BTreeMap::new();
    for (name, a) in &batched {
        let b = &serialized[name];
        let diff = a
            .max_abs_diff(b)
            .ok_or_else(|| Failure::new(Status::Execution, format!("output {name}: shapes differ")))?;
        divergence.insert(name.clone(), f64::from(diff));
    }
    let passed = divergence.values().all(|&d| d <= args.tolerance);
    let report = Equivalence {
        samples,
        tolerance: args.tolerance,
        max_abs_divergence: divergence,
        passed,
    };
    if json {
        print_json(&report)?;
    } else {
        println!("{:<12} {:>18}", "output", "max |batched - serialized|");
        for (name, d) in &report.max_abs_divergence {
            println!("{name:<12} {d:>18.3e}");
        }
        println!(
            "{samples} samples, tolerance {:e}: {}",
            args.tolerance,
            if passed { "PASS" } else { "FAIL" }
        );
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::new(
            Status::Execution,
            format!("divergence exceeds tolerance {:e}", args.tolerance),
        ))
    }
}

fn normalized_inputs(ds: &ForecastDataset, info: &ModelInfo) -> Tensor<f32> {
    let stacked = ds.stacked_inputs();
    let (n, k) = (ds.n_stations, ds.input_window);
    let data = stacked
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let station = (idx / k) % n;
            ((v - info.norm.mean[station]) / info.norm.scale[station]) as f32
        })
        .collect();
    Tensor::new(vec![ds.len(), n, k], data).expect("finite inputs")
}

fn random_inputs(info: &ModelInfo, batch: usize, seed: u64) -> Result<Tensor<f32>> {
    if batch == 0 {
        return Err(Failure::new(Status::Usage, "--batch must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = batch * info.n_stations * info.input_window;
    let data = (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    Ok(Tensor::new(vec![batch, info.n_stations, info.input_window], data).expect("finite inputs"))
}

fn bench(args: BenchArgs, json: bool) -> Result<()> {
    let (graph, info) = load_model(&args.model)?;
    let mut dataset = model_dataset(&args.data, &info, args.split)?;
    if let Some(limit) = args.limit {
        dataset = dataset.tail(limit);
    }
    let config = BenchConfig {
        eval: EvalConfig {
            mode: args.run.mode.into(),
            threads: threads(args.run.threads),
        },
        repetitions: args.repetitions,
    };
    let report = pipeline::bench(&graph, &default_registry(), &dataset, config)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    if json {
        print_json(&report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}
