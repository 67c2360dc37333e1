//! Wires everything together: builds the dataset, shards, model, and
//! federation from an [`ExperimentConfig`], drives the round loop, evaluates
//! under both test modes, and writes the output files.

pub mod compare;
pub mod config;

pub use config::{DataConfig, DataSource, ExperimentConfig, ModelConfig, ModelKind};

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::data::{
    build_tests, io::load_dataset, partition, split_holdout, synthetic_blobs, LabeledDataset,
    PartitionPlan, TestAssignment, TestMode,
};
use crate::error::{Error, Result};
use crate::model::PartitionLayout;
use crate::nn::{Architecture, LayerSpec, NamedLayer, SgdConfig};
use crate::protocol::{method_share_domain, Federation, RoundConfig};
use crate::seeds;
use crate::sharing::ShareSchedule;

/// Version stamp shared by `summary.json` and the metrics column set;
/// `compare` refuses to mix versions.
pub const SCHEMA_VERSION: u32 = 1;

/// Exact header of `metrics.csv`.
pub const METRICS_HEADER: &str = "round,phase,acc_global,acc_local,bytes_up,bytes_down,cum_bytes";

/// One evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub phase: usize,
    /// Mean over clients of accuracy on the shared test shard.
    pub accuracy_global: f64,
    /// Mean over clients of accuracy on their own matched test shards.
    pub accuracy_local: f64,
    pub per_client_global: Vec<f64>,
    pub per_client_local: Vec<f64>,
    /// This round's upload volume.
    pub bytes_up: u64,
    /// This round's download volume.
    pub bytes_down: u64,
    /// Both-direction total since round 1.
    pub cum_bytes: u64,
}

/// Run results: the evaluated rounds plus the summary that `summary.json`
/// serializes.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    /// Where the files went, when an output directory was given.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seeds: SeedReport,
    pub final_accuracy_global: f64,
    pub final_accuracy_local: f64,
    pub best_accuracy_global: f64,
    pub best_round_global: usize,
    pub best_accuracy_local: f64,
    pub best_round_local: usize,
    pub cumulative_bytes_up: u64,
    pub cumulative_bytes_down: u64,
    pub cumulative_bytes: u64,
    /// The only field that differs between identical runs.
    pub wall_time_seconds: f64,
}

/// Every derived stream seed, so a run can be audited or resumed piecemeal.
#[derive(Debug, Clone, Serialize)]
pub struct SeedReport {
    pub global: u64,
    /// Derivation rule: `stream(tag, index) = mix(mix(mix(global) ^ tag) ^ index)`
    /// with the tags below at index 0; client-indexed streams (local heads,
    /// batch orders) substitute the client index.
    pub model_init: u64,
    pub local_head_client0: u64,
    pub batch_client0: u64,
    pub sampling: u64,
    pub partition: u64,
    pub holdout: u64,
    pub synthesis: u64,
    pub test_build: u64,
}

impl SeedReport {
    fn new(global: u64) -> SeedReport {
        use seeds::stream::*;
        SeedReport {
            global,
            model_init: seeds::derive(global, MODEL_INIT, 0),
            local_head_client0: seeds::derive(global, LOCAL_HEAD, 0),
            batch_client0: seeds::derive(global, BATCH, 0),
            sampling: seeds::derive(global, SAMPLING, 0),
            partition: seeds::derive(global, PARTITION, 0),
            holdout: seeds::derive(global, HOLDOUT, 0),
            synthesis: seeds::derive(global, SYNTHESIS, 0),
            test_build: seeds::derive(global, TEST_BUILD, 0),
        }
    }
}

/// Builds the network and its base/head split for `input_shape` features and
/// `num_classes` outputs. The head is always the final classifier layer;
/// everything before it is the shared trunk.
pub fn build_architecture(
    model: &ModelConfig,
    input_shape: &[usize],
    num_classes: usize,
) -> Result<(Architecture, PartitionLayout)> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "classification needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut layers = Vec::new();
    let mut base = Vec::new();
    match model.kind {
        ModelKind::Mlp => {
            let mut width: usize = input_shape.iter().product();
            if input_shape.len() > 1 {
                layers.push(NamedLayer::new("flatten_in", LayerSpec::Flatten));
            }
            for (i, &h) in model.hidden.iter().enumerate() {
                let name = format!("fc{}", i + 1);
                layers.push(NamedLayer::new(
                    name.clone(),
                    LayerSpec::Dense { inputs: width, outputs: h },
                ));
                layers.push(NamedLayer::new(format!("relu{}", i + 1), LayerSpec::Relu));
                base.push(name);
                width = h;
            }
            layers.push(NamedLayer::new(
                "fc_out",
                LayerSpec::Dense { inputs: width, outputs: num_classes },
            ));
        }
        ModelKind::Conv => {
            let [in_channels, ..] = input_shape else {
                return Err(Error::Config(
                    "a convolutional trunk needs [channels, height, width] input".into(),
                ));
            };
            if input_shape.len() != 3 {
                return Err(Error::Config(format!(
                    "a convolutional trunk needs [channels, height, width] input, got {input_shape:?}"
                )));
            }
            let mut channels = *in_channels;
            for (i, &ch) in model.channels.iter().enumerate() {
                let name = format!("conv{}", i + 1);
                layers.push(NamedLayer::new(
                    name.clone(),
                    LayerSpec::Conv2d {
                        in_channels: channels,
                        out_channels: ch,
                        kernel: model.kernel,
                    },
                ));
                layers.push(NamedLayer::new(format!("conv_relu{}", i + 1), LayerSpec::Relu));
                layers.push(NamedLayer::new(format!("pool{}", i + 1), LayerSpec::MaxPool2d));
                base.push(name);
                channels = ch;
            }
            layers.push(NamedLayer::new("flatten_mid", LayerSpec::Flatten));
            // The flattened width depends on the input size; probe it by
            // chaining what we have so far.
            let probe = Architecture::new(input_shape.to_vec(), layers.clone())
                .map_err(|e| Error::Config(format!("model does not fit the input: {e}")))?;
            let width: usize = probe.output_shape().iter().product();
            layers.push(NamedLayer::new(
                "fc_mid",
                LayerSpec::Dense { inputs: width, outputs: model.conv_hidden },
            ));
            layers.push(NamedLayer::new("relu_mid", LayerSpec::Relu));
            base.push("fc_mid".into());
            layers.push(NamedLayer::new(
                "fc_out",
                LayerSpec::Dense { inputs: model.conv_hidden, outputs: num_classes },
            ));
        }
    }
    layers.push(NamedLayer::new("probs", LayerSpec::Softmax));
    let arch = Architecture::new(input_shape.to_vec(), layers)
        .map_err(|e| Error::Config(format!("model does not fit the input: {e}")))?;
    let layout = PartitionLayout::new(base, vec!["fc_out".into()], num_classes)?;
    Ok((arch, layout))
}

/// Per-client accuracies on the assigned test shards plus their unweighted
/// mean. Each client is measured post-sync via
/// [`Federation::measurement_model`], so under full sharing the single-head
/// baselines are measured as the server model while private heads stay
/// per-client. `data` is the held-out pool the assignment indexes into.
pub fn evaluate(
    federation: &Federation,
    data: &LabeledDataset,
    tests: &TestAssignment,
) -> Result<(f64, Vec<f64>)> {
    let clients = federation.clients();
    if clients.is_empty() {
        return Err(Error::Config("no clients to evaluate".into()));
    }
    let mut per_client = Vec::with_capacity(clients.len());
    for client in clients {
        let model = federation.measurement_model(client.index())?;
        per_client.push(model.accuracy(data, tests.shard_for(client.index()))?);
    }
    let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
    Ok((mean, per_client))
}

/// Runs the experiment and, when `out_dir` is given, writes `metrics.csv`,
/// `ledger.csv`, `summary.json`, and `plan.json` into it.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    run_experiment_with(config, out_dir, |_| {})
}

/// [`run_experiment`] with a progress hook invoked after every evaluated
/// round.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    mut on_eval: impl FnMut(&RoundReport),
) -> Result<RunArtifacts> {
    config.validate()?;
    let started = Instant::now();

    let data = build_dataset(config)?;
    let (train_pool, held_out, train_indices, held_indices) =
        split_holdout(&data, config.data.holdout_fraction, config.seed)?;
    let plan = partition(
        config.setting,
        &train_pool,
        config.clients,
        config.seed,
        config.alpha,
    )?;
    let global_tests = build_tests(&train_pool, &plan, &held_out, TestMode::Global)?;
    let local_tests = build_tests(&train_pool, &plan, &held_out, TestMode::Local)?;

    let (arch, layout) =
        build_architecture(&config.model, train_pool.feature_shape(), train_pool.num_classes())?;
    let schedule = if config.method.uses_schedule() {
        let domain_len = method_share_domain(config.method, &layout).len();
        Some(ShareSchedule::new(config.share_frequency, domain_len, config.frozen_phase)?)
    } else {
        None
    };
    let round_cfg = RoundConfig {
        local_epochs: config.local_epochs,
        sampled_per_round: config.sampled,
        sgd: SgdConfig::new(config.learning_rate, config.batch_size)?,
    };
    let mut federation = Federation::new(
        Arc::new(arch),
        layout,
        config.method,
        schedule,
        round_cfg,
        &plan.shards,
        config.bytes_per_param,
        config.seed,
    )?;

    let mut reports = Vec::new();
    let mut cum_bytes = 0u64;
    for t in 1..=config.rounds {
        let outcome = federation
            .run_round(&train_pool)
            .map_err(|e| e.with_context(&format!("round {t}")))?;
        cum_bytes += outcome.bytes_up + outcome.bytes_down;
        if t % config.eval_every == 0 || t == config.rounds {
            let (accuracy_global, per_client_global) =
                evaluate(&federation, &held_out, &global_tests)
                    .map_err(|e| e.with_context(&format!("round {t}")))?;
            let (accuracy_local, per_client_local) =
                evaluate(&federation, &held_out, &local_tests)
                    .map_err(|e| e.with_context(&format!("round {t}")))?;
            let report = RoundReport {
                round: t,
                phase: outcome.phase,
                accuracy_global,
                accuracy_local,
                per_client_global,
                per_client_local,
                bytes_up: outcome.bytes_up,
                bytes_down: outcome.bytes_down,
                cum_bytes,
            };
            on_eval(&report);
            reports.push(report);
        }
    }

    let last = reports.last().expect("at least the final round is evaluated");
    let best_global = reports
        .iter()
        .max_by(|a, b| a.accuracy_global.total_cmp(&b.accuracy_global))
        .expect("reports is nonempty");
    let best_local = reports
        .iter()
        .max_by(|a, b| a.accuracy_local.total_cmp(&b.accuracy_local))
        .expect("reports is nonempty");
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        seeds: SeedReport::new(config.seed),
        final_accuracy_global: last.accuracy_global,
        final_accuracy_local: last.accuracy_local,
        best_accuracy_global: best_global.accuracy_global,
        best_round_global: best_global.round,
        best_accuracy_local: best_local.accuracy_local,
        best_round_local: best_local.round,
        cumulative_bytes_up: federation.ledger().cumulative_up(),
        cumulative_bytes_down: federation.ledger().cumulative_down(),
        cumulative_bytes: federation.ledger().cumulative_bytes(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        write_outputs(
            dir,
            &reports,
            &summary,
            &federation,
            &plan,
            &train_indices,
            &held_indices,
            &global_tests,
            &local_tests,
        )?;
    }
    Ok(RunArtifacts {
        reports,
        summary,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}

fn build_dataset(config: &ExperimentConfig) -> Result<LabeledDataset> {
    match config.data.source {
        DataSource::Synthetic => synthetic_blobs(
            config.data.samples,
            config.data.features,
            config.data.classes.expect("validated"),
            config.data.noise,
            config.seed,
        ),
        DataSource::File => {
            let path = config.data.path.as_deref().expect("validated");
            load_dataset(
                path,
                config.data.format,
                config.data.classes,
                config.data.labels_path.as_deref(),
            )
        }
    }
}

/// What `plan.json` holds: every index decision of the run.
#[derive(Debug, Serialize)]
struct PlanFile<'a> {
    schema_version: u32,
    /// Indices into the raw corpus that became the training pool.
    train_indices: &'a [usize],
    /// Indices into the raw corpus that became the held-out pool.
    held_indices: &'a [usize],
    /// Client shards (indices into the training pool).
    partition: &'a PartitionPlan,
    /// Test shards (indices into the held-out pool).
    global_tests: &'a TestAssignment,
    local_tests: &'a TestAssignment,
}

#[allow(clippy::too_many_arguments)]
fn write_outputs(
    dir: &Path,
    reports: &[RoundReport],
    summary: &Summary,
    federation: &Federation,
    plan: &PartitionPlan,
    train_indices: &[usize],
    held_indices: &[usize],
    global_tests: &TestAssignment,
    local_tests: &TestAssignment,
) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
    };
    write("metrics.csv", render_metrics(reports))?;
    let mut ledger_csv = Vec::new();
    federation
        .ledger()
        .write_csv(&mut ledger_csv)
        .map_err(|e| Error::Data(format!("cannot render ledger: {e}")))?;
    write(
        "ledger.csv",
        String::from_utf8(ledger_csv).expect("CSV output is ASCII"),
    )?;
    let summary_json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Internal(format!("summary serialization failed: {e}")))?;
    write("summary.json", summary_json + "\n")?;
    let plan_file = PlanFile {
        schema_version: SCHEMA_VERSION,
        train_indices,
        held_indices,
        partition: plan,
        global_tests,
        local_tests,
    };
    let plan_json = serde_json::to_string_pretty(&plan_file)
        .map_err(|e| Error::Internal(format!("plan serialization failed: {e}")))?;
    write("plan.json", plan_json + "\n")?;
    Ok(())
}

/// Renders `metrics.csv` exactly; byte-identical for identical runs.
pub fn render_metrics(reports: &[RoundReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{}\n",
            r.round, r.phase, r.accuracy_global, r.accuracy_local, r.bytes_up, r.bytes_down,
            r.cum_bytes
        ));
    }
    out
}
