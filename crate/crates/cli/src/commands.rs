use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;

use hmdn::checkpoint::{load_checkpoint, save_checkpoint};
use hmdn::config::{LoadedData, RunConfig};
use hmdn::data::{generate_synthetic, load_csv, partition_report, write_csv, Dictionaries};
use hmdn::embedding::ExampleBatch;
use hmdn::experiments::{run_ablation, run_depth_sweep, Experiment, Variant};
use hmdn::model::{model_gradcheck, Model};
use hmdn::numeric::Params;
use hmdn::rng::SeededRng;
use hmdn::train::{code_usage, evaluate, fit, MetricRecord};
use hmdn::Error;

use crate::RunArgs;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    GradcheckFailed { max_rel_error: f64, tolerance: f64 },
}

impl CliError {
    /// 1 for invalid input, 2 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() || matches!(e, Error::NonDeterministic { .. }) => 2,
            CliError::Core(_) => 1,
            CliError::GradcheckFailed { .. } => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradcheckFailed {
                max_rel_error,
                tolerance,
            } => write!(
                f,
                "gradient check failed: max relative error {max_rel_error:.3e} exceeds {tolerance:.1e}"
            ),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("invalid value `{value}` for --{flag}")).into())
}

/// Reads the config file (if any), applies flag overrides and validates.
pub fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.backbone {
        c.backbone.kind = parse_enum("backbone", v)?;
    }
    if let Some(v) = &args.gate_input {
        c.backbone.gate_input = parse_enum("gate-input", v)?;
    }
    if let Some(v) = args.n_experts {
        c.backbone.n_experts = v;
    }
    let touches_quantizer = args.mode.is_some()
        || args.depth.is_some()
        || args.codebook_size.is_some()
        || args.beta.is_some()
        || args.include_zero_code.is_some();
    if touches_quantizer {
        let q = c.quantizer.get_or_insert_with(Default::default);
        if let Some(v) = &args.mode {
            q.mode = parse_enum("mode", v)?;
        }
        if let Some(v) = args.depth {
            q.depth = v;
        }
        if let Some(v) = args.codebook_size {
            q.codebook_size = v;
        }
        if let Some(v) = args.beta {
            q.beta = v;
        }
        if let Some(v) = args.include_zero_code {
            q.include_zero_code = v;
        }
    }
    let t = &mut c.training;
    if let Some(v) = args.alpha {
        t.alpha = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = Some(v);
    }
    if let Some(v) = &args.train_path {
        c.data.train_path = Some(v.clone());
    }
    if let Some(v) = &args.test_path {
        c.data.test_path = Some(v.clone());
    }
    if let Some(v) = args.n_examples {
        c.data.synthetic.get_or_insert_with(Default::default).n_examples = v;
    }
    if let Some(v) = args.data_seed {
        c.data.synthetic.get_or_insert_with(Default::default).seed = v;
    }
    c.validate()?;
    Ok(c)
}

fn emit(record: &MetricRecord, file: &mut Option<BufWriter<File>>) {
    let line = record.to_json_line();
    println!("{line}");
    if let Some(f) = file {
        // metrics file failures surface on flush
        let _ = writeln!(f, "{line}");
    }
}

pub fn gen_data(args: &RunArgs, out: &Path) -> Result<()> {
    let config = resolve(args)?;
    let synthetic = config.synthetic();
    let data = generate_synthetic(&synthetic)?;
    fs::create_dir_all(out)?;
    write_csv(&data.schema, &data.train, File::create(out.join("train.csv"))?)?;
    write_csv(&data.schema, &data.test, File::create(out.join("test.csv"))?)?;
    let schema = serde_json::to_string_pretty(&data.schema).map_err(Error::from)?;
    fs::write(out.join("schema.json"), schema + "\n")?;
    let mut all = data.train.clone();
    for (col, extra) in all.ids.iter_mut().zip(&data.test.ids) {
        col.extend_from_slice(extra);
    }
    all.labels.extend_from_slice(&data.test.labels);
    println!("{}", partition_report(&all, &data.schema));
    Ok(())
}

pub fn train(args: &RunArgs, checkpoint: &Path, metrics_file: Option<&Path>) -> Result<()> {
    let config = resolve(args)?;
    let model_config = config.model_config()?;
    let mut metrics = match metrics_file {
        Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let LoadedData {
        schema,
        train,
        test,
        dictionaries,
    } = config.load_data()?;
    let mut model = Model::seeded(schema, model_config, config.training.seed)?;
    model.dictionaries = Some(dictionaries.unwrap_or_else(|| Dictionaries::identity(&model.schema)));
    let outcome = fit(model, &train, test.as_ref(), &config.training, &mut |r| emit(&r, &mut metrics))?;
    if let Some(f) = &mut metrics {
        f.flush()?;
    }
    save_checkpoint(&outcome.model, checkpoint)?;
    eprintln!(
        "wrote {} ({} parameters)",
        checkpoint.display(),
        outcome.model.parameter_count()
    );
    Ok(())
}

/// Labelled examples to score: an explicit CSV, else the configured test
/// split (falling back to the training split).
fn scoring_data(args: &RunArgs, model: &Model, data: Option<&Path>) -> Result<ExampleBatch> {
    let identity;
    let dicts = match &model.dictionaries {
        Some(d) => d,
        None => {
            identity = Dictionaries::identity(&model.schema);
            &identity
        }
    };
    if let Some(path) = data {
        return Ok(load_csv(&model.schema, path, Some(dicts))?.0);
    }
    let config = resolve(args)?;
    if let Some(test) = &config.data.test_path {
        return Ok(load_csv(&model.schema, test, Some(dicts))?.0);
    }
    if let Some(train) = &config.data.train_path {
        return Ok(load_csv(&model.schema, train, Some(dicts))?.0);
    }
    let synthetic = generate_synthetic(&config.synthetic())?;
    if synthetic.schema != model.schema {
        return Err(Error::Config("checkpoint schema does not match the synthetic generator".into()).into());
    }
    Ok(if synthetic.test.is_empty() {
        synthetic.train
    } else {
        synthetic.test
    })
}

pub fn eval(args: &RunArgs, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let batch = scoring_data(args, &model, data)?;
    let metrics = evaluate(&model, &batch)?;
    for r in metrics.records("eval") {
        println!("{}", r.to_json_line());
    }
    Ok(())
}

pub fn gradcheck(args: &RunArgs, freeze_codes: bool, tolerance: f64, step: f64) -> Result<()> {
    if !(tolerance > 0.0 && step > 0.0) {
        return Err(Error::Config("tolerance and step must be positive".into()).into());
    }
    let config = resolve(args)?;
    let model_config = config.model_config()?;
    let data = config.load_data()?;
    let n = data.train.len();
    if n < 4 {
        return Err(Error::Data(format!("gradcheck needs at least 4 training examples, got {n}")).into());
    }
    let seed = config.training.seed;
    let mut model = Model::seeded(data.schema.clone(), model_config, seed)?;
    let warm = n.min(256);
    model.ensure_codebooks(&data.train.slice(0..warm), &mut SeededRng::derive(seed, 12))?;
    let start = if n >= warm + 4 { warm } else { n - 4 };
    let batch = data.train.slice(start..start + 4);
    let report = model_gradcheck(&mut model, &batch, config.training.alpha, freeze_codes, step, tolerance)?;
    print!("{report}");
    println!(
        "max_rel_error={:.3e} tolerance={:.1e} excluded={} freeze_codes={}",
        report.max_rel_error(),
        tolerance,
        report.excluded(),
        if freeze_codes { "on" } else { "off" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed {
            max_rel_error: report.max_rel_error(),
            tolerance,
        })
    }
}

fn experiment_data(config: &RunConfig) -> Result<LoadedData> {
    let data = config.load_data()?;
    if data.test.as_ref().is_none_or(|t| t.is_empty()) {
        return Err(Error::Data("experiments need a non-empty test split".into()).into());
    }
    Ok(data)
}

pub fn sweep_depth(args: &RunArgs, depths: &[usize], seeds: &[u64], json: bool) -> Result<()> {
    let config = resolve(args)?;
    if !config.uses_quantizer() {
        return Err(Error::Config("sweep-depth needs gate_input hierarchical_sD with a moe or dw backbone".into()).into());
    }
    let data = experiment_data(&config)?;
    let exp = Experiment {
        schema: &data.schema,
        train: &data.train,
        test: data.test.as_ref().expect("checked"),
        backbone: config.backbone.clone(),
        quantizer: config.quantizer.clone().expect("validated"),
        training: config.training.clone(),
        seeds: seeds.to_vec(),
    };
    let table = run_depth_sweep(&exp, depths)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&table).map_err(Error::from)?);
    } else {
        print!("{table}");
    }
    Ok(())
}

pub fn ablation(args: &RunArgs, models: &[String], seeds: &[u64], json: bool) -> Result<()> {
    let variants: Vec<Variant> = if models.is_empty() {
        Variant::ALL.to_vec()
    } else {
        models.iter().map(|m| m.parse()).collect::<hmdn::Result<_>>()?
    };
    let config = resolve(args)?;
    let data = experiment_data(&config)?;
    let exp = Experiment {
        schema: &data.schema,
        train: &data.train,
        test: data.test.as_ref().expect("checked"),
        backbone: config.backbone.clone(),
        quantizer: config.quantizer.clone().unwrap_or_default(),
        training: config.training.clone(),
        seeds: seeds.to_vec(),
    };
    let table = run_ablation(&exp, &variants)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&table).map_err(Error::from)?);
    } else {
        print!("{table}");
    }
    Ok(())
}

pub fn inspect_codebooks(args: &RunArgs, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let quantizer = model
        .quantizer
        .as_ref()
        .ok_or_else(|| Error::Usage("checkpoint has no quantizer".into()))?;
    let batch = scoring_data(args, &model, data)?;
    let usage = code_usage(&model, &batch)?.expect("model has a quantizer");
    println!("level\tcodes\tentropy_nats\tperplexity\tdead_codes\tmean_row_norm");
    for (stats, cb) in usage.stats().iter().zip(&quantizer.params.codebooks) {
        let mean_norm = (0..cb.rows())
            .map(|r| cb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / cb.rows() as f64;
        println!(
            "{}\t{}\t{:.6}\t{:.3}\t{}\t{:.6}",
            stats.level,
            cb.rows(),
            stats.entropy,
            stats.entropy.exp(),
            stats.dead_codes,
            mean_norm
        );
    }
    Ok(())
}
