//! Patient agent: synthesizes or replays a device stream and sends it to
//! the gateway.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use ecgpps_core::channel::KeyMode;
use ecgpps_core::signal::{replay_chunks, stream, synth, AgentProfile, StreamConfig};
use ecgpps_gateway::client::connect_agent;

#[derive(Parser)]
#[command(about = "Stream an ECG session to the gateway")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7700")]
    connect: String,
    #[arg(long, default_value = "patient-1")]
    patient: String,
    /// `key = value` profile file.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 50.0)]
    fs: f64,
    /// Seconds of signal to send.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Send the bytes of a recorded device stream instead of synthesizing.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, default_value = "preshared")]
    mode: KeyMode,
    #[arg(long, env = "ECGPPS_PSK", hide_env_values = true)]
    psk: Option<String>,
    /// Send without pacing to real time.
    #[arg(long)]
    accelerated: bool,
    /// Inject a lead-off indication at these times, seconds.
    #[arg(long, value_delimiter = ',')]
    lead_off_at: Vec<f64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if args.mode == KeyMode::PreShared && args.psk.is_none() {
        bail!("pre-shared mode needs --psk or ECGPPS_PSK");
    }
    let profile = match &args.profile {
        Some(p) => std::fs::read_to_string(p).with_context(|| p.display().to_string())?.parse()?,
        None => AgentProfile::default(),
    };
    let chunks = match &args.replay {
        Some(p) => replay_chunks(&std::fs::read(p).with_context(|| p.display().to_string())?, 10, args.fs),
        None => {
            let window = synth(&profile.synth, args.duration, args.fs)?;
            let cfg = StreamConfig {
                calibration: profile.calibration,
                lead_off_at_s: args.lead_off_at.clone(),
                ..StreamConfig::default()
            };
            stream(&window, &cfg)?
        }
    };

    let mut session =
        connect_agent(&args.connect, args.mode, args.psk.as_deref(), &args.patient, args.fs, profile.calibration)?;
    log::info!("session {} accepted, base {} ms", hex::encode(session.session_id()), session.base_ms());
    session.stream(&chunks, args.accelerated)?;
    let (records, bytes) = (session.records_sent, session.bytes_sent);
    session.finish()?;
    println!("sent {records} records, {bytes} ciphertext bytes");
    Ok(())
}
