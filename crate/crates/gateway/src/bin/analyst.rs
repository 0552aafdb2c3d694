//! Analyst client: runs range analyses and finishes encrypted results with
//! the secret key.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use ecgpps_core::fhe::{keygen, Analysis, CkksContext, HeParams};
use ecgpps_gateway::analysis::{finish_report, load_secret_key, write_keyset};
use ecgpps_gateway::api::{AnalysisMode, AnalysisRequest};
use ecgpps_gateway::client::ApiClient;
use ecgpps_gateway::table;

#[derive(Parser)]
#[command(about = "Query the gateway and finish encrypted analyses")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7701")]
    gateway: String,
    #[arg(long)]
    patient: Option<String>,
    /// `t0,t1` in ms since the epoch, or `all`.
    #[arg(long, default_value = "all")]
    range: String,
    #[arg(long, value_delimiter = ',', default_value = "stats,hrv")]
    analyses: Vec<String>,
    /// `plaintext`, `encrypted` or `compare`.
    #[arg(long, default_value = "compare")]
    mode: String,
    /// Directory holding secret.key, used to finish sealed results.
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Generate a CKKS key set into this directory and exit.
    #[arg(long)]
    keygen: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// List sessions and stored patients and exit.
    #[arg(long)]
    sessions: bool,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.trim().into())).with_context(|| format!("unknown value `{s}`"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(dir) = &args.keygen {
        let ctx = CkksContext::new(HeParams::default())?;
        let seed = args.seed.unwrap_or_else(rand::random);
        write_keyset(dir, &keygen(&ctx, seed))?;
        println!("wrote secret.key, public.key and eval.key to {}", dir.display());
        return Ok(());
    }

    let mut client = ApiClient::connect(&args.gateway)?;
    if args.sessions {
        let list = client.session_list()?;
        if args.json {
            println!("{}", serde_json::to_string_pretty(&list)?);
        } else {
            for p in &list.patients {
                println!("{}  {} records  [{}, {}]", p.patient_id, p.records, p.first_ms, p.last_ms);
            }
            for s in &list.sessions {
                println!(
                    "  {} {} {} {} Hz connected={} records={} pulse={:?} class={:?}",
                    s.session_id, s.patient_id, s.mode, s.fs, s.connected, s.records, s.pulse, s.class
                );
            }
        }
        return Ok(());
    }

    let Some(patient) = args.patient.clone() else { bail!("--patient is required") };
    let (t0, t1) = if args.range == "all" {
        (0, u64::MAX)
    } else {
        let (a, b) = args.range.split_once(',').context("--range takes t0,t1 or all")?;
        (a.trim().parse()?, b.trim().parse()?)
    };
    let analyses: Vec<Analysis> = args.analyses.iter().map(|a| parse_enum(a)).collect::<Result<_>>()?;
    let mode: AnalysisMode = parse_enum(&args.mode)?;
    let req = AnalysisRequest { patient_id: patient, t0, t1, analyses, mode, top_k: None, probe_max_hz: None };
    let mut report = client.analysis(&req)?;
    if report.sealed.is_some() {
        let Some(dir) = &args.keys else { bail!("the gateway returned sealed results; pass --keys <dir>") };
        finish_report(&mut report, &load_secret_key(dir)?)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", table::render(&report));
    }
    Ok(())
}
