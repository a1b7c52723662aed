use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;
use vbsf_client::api::{CreateStream, FitRequest, ForecastRequest, ImputeRequest, InjectRequest};
use vbsf_client::Client;
use vbsf_core::data::{self, SyntheticSpec};
use vbsf_core::experiment::{self, ExperimentConfig};
use vbsf_core::{engine, snapshot, ModelConfig, ObservationWindow, Variant};

use crate::{
    BenchArgs, Cli, CliError, Command, FitArgs, ForecastArgs, ImputeArgs, InjectArgs, InputArgs,
    ModelArgs, SynthArgs, VariantArg,
};

/// Columns sent per request when streaming.
const PUSH_CHUNK: usize = 64;

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Synth(a) => synth(&client, a).await,
        Command::Fit(a) => fit(&client, a).await,
        Command::Impute(a) if a.online => impute_online(&client, a).await,
        Command::Impute(a) => impute(&client, a).await,
        Command::Forecast(a) => forecast(&client, a).await,
        Command::Bench(a) => bench(&client, a).await,
        Command::InjectOutliers(a) => inject(&client, a).await,
    }
}

async fn connect(server: Option<String>) -> Result<Client, CliError> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(vbsf_server::serve(listener));
    let http = reqwest::Client::builder()
        .no_proxy()
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(Client::with_http(format!("http://{addr}"), http))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Result<&Path, CliError> {
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Vb => Variant::Vb,
        VariantArg::Em => Variant::Em,
    }
}

fn model_config(args: &ModelArgs) -> Result<ModelConfig, CliError> {
    let mut cfg: ModelConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(r) = args.rank {
        cfg.rank = Some(r);
    }
    if let Some(h) = args.window {
        cfg.h = h;
    }
    if let Some(tol) = args.tol {
        cfg.tol = tol;
    }
    if let Some(n) = args.max_iters {
        cfg.max_iters = n;
    }
    if args.robust {
        cfg.robust = true;
    }
    if let Some(v) = args.variant {
        cfg.variant = variant(v);
    }
    Ok(cfg)
}

fn load_input(args: &InputArgs) -> Result<ObservationWindow, CliError> {
    let win = data::load_csv(&args.input, &args.missing)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.input.display())))?;
    match &args.mask {
        Some(path) => {
            let mask = data::load_mask_csv(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(data::apply_mask(&win, &mask)?)
        }
        None => Ok(win),
    }
}

async fn synth(client: &Client, a: SynthArgs) -> Result<(), CliError> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(path) => read_json(path)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let generated = client.synth(&spec).await?;
    let dir = out_dir(&a.out.out)?;
    data::write_csv(&generated.observed, dir.join("observed.csv"), &a.missing)?;
    data::write_matrix_csv(&generated.truth, dir.join("truth.csv"))?;
    write_json(&dir.join("synthetic.json"), &generated)?;
    Ok(())
}

async fn fit(client: &Client, a: FitArgs) -> Result<(), CliError> {
    let window = load_input(&a.input)?;
    let model = model_config(&a.model)?;
    let resp = client
        .fit(&FitRequest {
            window,
            model,
            warm: None,
        })
        .await?;
    let dir = out_dir(&a.out.out)?;
    write_json(&dir.join("report.json"), &resp.summary)?;
    fs::write(dir.join("state.json"), snapshot::to_json(&resp.state)?)?;
    Ok(())
}

async fn impute(client: &Client, a: ImputeArgs) -> Result<(), CliError> {
    let window = load_input(&a.input)?;
    let model = model_config(&a.model)?;
    let resp = client.impute(&ImputeRequest { window, model }).await?;
    let dir = out_dir(&a.out.out)?;
    write_json(&dir.join("report.json"), &resp.summary)?;
    data::write_matrix_csv(&resp.values, dir.join("imputed.csv"))?;
    Ok(())
}

/// Fits the first window, then pushes the remaining columns through a stream
/// and keeps the lag estimate reported after each one.
async fn impute_online(client: &Client, a: ImputeArgs) -> Result<(), CliError> {
    let window = load_input(&a.input)?;
    let model = model_config(&a.model)?;
    let t = window.t();
    let first = (model.h + 1).min(t);
    let info = client
        .create_stream(&CreateStream {
            window: window.columns(0, first)?,
            model,
        })
        .await?;
    let state = client.stream_state(&info.id).await?;
    let initial = engine::impute(&state).values;
    let mut values = DMatrix::zeros(window.m(), t);
    values.columns_mut(0, first).copy_from(&initial);
    let delta = state.cfg.delta;
    let mut summary = info.summary;
    let mut tau = first;
    while tau < t {
        let end = (tau + PUSH_CHUNK).min(t);
        let columns = (tau..end).map(|c| window.column(c)).collect();
        let resp = client.push_columns(&info.id, columns).await;
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                let _ = client.delete_stream(&info.id).await;
                return Err(e.into());
            }
        };
        for (k, est) in resp.estimates.iter().enumerate() {
            if let Some(col) = (tau + k).checked_sub(delta) {
                values.set_column(col, est);
            }
        }
        summary = resp.info.summary;
        tau = end;
    }
    client.delete_stream(&info.id).await?;
    let dir = out_dir(&a.out.out)?;
    write_json(&dir.join("report.json"), &summary)?;
    data::write_matrix_csv(&values, dir.join("imputed.csv"))?;
    Ok(())
}

async fn forecast(client: &Client, a: ForecastArgs) -> Result<(), CliError> {
    let window = load_input(&a.input)?;
    let model = model_config(&a.model)?;
    let resp = client
        .forecast(&ForecastRequest {
            window,
            model,
            horizon: a.horizon,
        })
        .await?;
    let dir = out_dir(&a.out.out)?;
    write_json(&dir.join("report.json"), &resp.summary)?;
    data::write_matrix_csv(&resp.forecast, dir.join("forecast.csv"))?;
    Ok(())
}

async fn bench(client: &Client, a: BenchArgs) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(r) = a.rank {
        cfg.model.rank = Some(r);
    }
    if let Some(h) = a.window {
        cfg.model.h = h;
    }
    if let Some(tol) = a.tol {
        cfg.model.tol = tol;
    }
    if a.robust {
        cfg.model.robust = true;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = variant(v);
    }
    let output = client.bench(&cfg).await?;
    let dir = out_dir(&a.out.out)?;
    write_json(&dir.join("report.json"), &output.report)?;
    write_json(&dir.join("timing.json"), &output.timing)?;
    fs::write(dir.join("mre_series.csv"), experiment::mre_series_csv(&output.report)?)?;
    Ok(())
}

async fn inject(client: &Client, a: InjectArgs) -> Result<(), CliError> {
    let window = load_input(&a.input)?;
    let injection = client
        .inject_outliers(&InjectRequest {
            window,
            fraction: a.fraction,
            scale: a.scale,
            seed: a.seed,
        })
        .await?;
    if let Some(w) = &injection.warning {
        eprintln!("warning: {w}");
    }
    let dir = out_dir(&a.out.out)?;
    data::write_csv(&injection.window, dir.join("corrupted.csv"), &a.input.missing)?;
    write_json(&dir.join("outliers.json"), &injection.locations)?;
    Ok(())
}
