mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fas_core::attack_metrics::security::{run_security_battery_with_keys, SecurityTestReport};
use fas_core::attack_metrics::{run_campaign_with_keys, Campaign};
use fas_core::model::evaluate;
use fas_core::protocol::session::{
    assemble_report, initial_params, run_session_with_keys, run_tcp_client, serve_session, session_data, summarize,
    ClientSession, ServerSession,
};
use fas_core::transport::tcp::serve;
use fas_core::{Channel, ClientKeys, ServerKeys, SessionReport};

use config::{ExperimentConfig, Role, UsageError};

#[derive(Parser)]
#[command(name = "fas", version, about = "Federated sessions with selective encryption and obfuscation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session, or a sweep when enc_pct/epsilon list several values.
    Run(Flags),
    /// Reconstruction attack campaign against observed updates.
    Attack(Flags),
    /// Nine-test security battery.
    Security(Flags),
}

#[derive(clap::Args)]
struct Flags {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    role: Option<String>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Flags {
    fn load(&self) -> Result<ExperimentConfig, UsageError> {
        let text = fs::read_to_string(&self.config)
            .map_err(|e| UsageError(format!("config: cannot read {}: {e}", self.config.display())))?;
        let mut cfg = ExperimentConfig::parse(&text)?;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for o in &self.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| UsageError(format!("--set: expected key=value, got {o:?}")))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        let flag_pairs = [
            ("role", self.role.clone()),
            ("bind", self.bind.clone()),
            ("connect", self.connect.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        pairs.extend(flag_pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (flags, cmd): (&Flags, fn(&ExperimentConfig) -> anyhow::Result<bool>) = match &cli.command {
        Command::Run(f) => (f, cmd_run),
        Command::Attack(f) => (f, cmd_attack),
        Command::Security(f) => (f, cmd_security),
    };
    let cfg = match flags.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("fas: {e}");
            return ExitCode::from(2);
        }
    };
    match cmd(&cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("fas: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn label(enc_pct: f64, epsilon: f64) -> String {
    format!("enc{enc_pct}_eps{epsilon}")
}

fn write_report(dir: &Path, name: &str, report: &SessionReport) -> anyhow::Result<()> {
    fs::write(dir.join(format!("{name}.json")), report.to_json()?)?;
    report.write_csv(fs::File::create(dir.join(format!("{name}.csv")))?)?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 }
}

fn cmd_run(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cfg.role {
        Role::All => run_sweep(cfg),
        Role::Server => run_server(cfg),
        Role::Client => run_clients(cfg),
    }
}

fn run_sweep(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let keys = ClientKeys::derive(cfg.session.key_bits, cfg.session.seed)?;
    let points = cfg.sweep();
    let mut sweep = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    sweep.write_record([
        "enc_pct",
        "epsilon",
        "encrypt_ms_median",
        "obfuscate_ms_median",
        "runs",
        "total_bytes",
        "final_accuracy",
    ])?;
    for (enc_pct, epsilon) in points.iter().copied() {
        let mut session = cfg.session.clone();
        session.enc_pct = enc_pct;
        session.epsilon = epsilon;
        let mut encrypt = Vec::new();
        let mut obfuscate = Vec::new();
        let mut last = None;
        for _ in 0..cfg.repeats {
            let r = run_session_with_keys(&session, cfg.channel, &keys)?;
            encrypt.push(r.encrypt_millis());
            obfuscate.push(r.rounds.iter().map(|x| x.millis.obfuscate).sum());
            last = Some(r);
        }
        let report = last.expect("repeats >= 1");
        write_report(&cfg.out, &format!("run_{}", label(enc_pct, epsilon)), &report)?;
        if points.len() == 1 {
            print!("{}", summarize(&report));
        }
        let enc_med = median(encrypt);
        println!(
            "enc_pct {enc_pct:>5} epsilon {epsilon:>6}: encrypt {enc_med:.1} ms (median of {}), accuracy {:.4}, {} bytes",
            cfg.repeats, report.final_accuracy, report.total_bytes
        );
        sweep.write_record([
            enc_pct.to_string(),
            epsilon.to_string(),
            format!("{enc_med:.3}"),
            format!("{:.3}", median(obfuscate)),
            cfg.repeats.to_string(),
            report.total_bytes.to_string(),
            format!("{:.6}", report.final_accuracy),
        ])?;
    }
    sweep.flush()?;
    Ok(true)
}

fn single_point(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    if cfg.sweep().len() != 1 {
        bail!("server and client roles run a single setting; give one enc_pct and one epsilon");
    }
    Ok(())
}

fn run_server(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    single_point(cfg)?;
    let s = &cfg.session;
    let keys = ServerKeys::derive(s.key_bits, s.seed)?;
    let handle = serve(cfg.bind.as_str()).with_context(|| format!("binding {}", cfg.bind))?;
    println!("listening on {}", handle.local_addr());
    let server = serve_session(&handle, ServerSession::new(keys, s)?)?;
    let data = session_data(s)?;
    let initial = evaluate(&s.architecture(), &initial_params(s), &data.test)?;
    let report = assemble_report(s, Channel::Tcp, Some(&server), &[], initial)?;
    write_report(&cfg.out, "server", &report)?;
    print!("{}", summarize(&report));
    Ok(true)
}

fn run_clients(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    single_point(cfg)?;
    let s = &cfg.session;
    let keys = ClientKeys::derive(s.key_bits, s.seed)?;
    let data = session_data(s)?;
    let initial = evaluate(&s.architecture(), &initial_params(s), &data.test)?;
    let test = Arc::new(data.test);
    let ids: Vec<u32> = cfg.client_ids.clone().unwrap_or_else(|| (0..s.clients as u32).collect());
    let clients: Vec<ClientSession> = ids
        .iter()
        .map(|&id| ClientSession::new(id, s, keys.clone(), data.shards[id as usize].clone(), Some(Arc::clone(&test))))
        .collect();
    let done = thread::scope(|sc| {
        let workers: Vec<_> = clients.into_iter().map(|c| sc.spawn(|| run_tcp_client(cfg.connect.as_str(), c))).collect();
        workers.into_iter().map(|w| w.join().expect("client thread panicked")).collect::<Result<Vec<_>, _>>()
    })?;
    let report = assemble_report(s, Channel::Tcp, None, &done, initial)?;
    let name = match ids.as_slice() {
        [id] => format!("client{id}"),
        _ => "clients".to_string(),
    };
    write_report(&cfg.out, &name, &report)?;
    print!("{}", summarize(&report));
    Ok(true)
}

fn cmd_attack(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let attack_cfgs = cfg.attack_configs();
    let keys = ClientKeys::derive(cfg.session.key_bits, cfg.session.seed)?;
    let mut all = Campaign { results: Vec::new() };
    for a in &attack_cfgs {
        let campaign = run_campaign_with_keys(a, &keys)?;
        println!("epsilon {}:", a.epsilon);
        println!("  {:<6} {:>7} {:>8} {:>8}", "scheme", "enc_pct", "mssim", "vifp");
        for r in campaign.reports() {
            println!("  {:<6} {:>7} {:>8.4} {:>8.4}", r.scheme, r.enc_pct, r.mssim, r.vifp);
        }
        match campaign.plateau() {
            Some(p) => println!(
                "  plateau: {} (|mssim@20 - mssim@100| = {:.4}, drop from baseline {:.4})",
                if p.pass { "PASS" } else { "FAIL" },
                p.gap,
                p.drop
            ),
            None => println!("  plateau: not evaluated (needs enc_pct 20 and 100)"),
        }
        all.results.extend(campaign.results);
    }
    all.write_csv(fs::File::create(cfg.out.join("attack.csv"))?)?;
    Ok(true)
}

fn cmd_security(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let sc = cfg.security_config();
    let keys = ClientKeys::derive(sc.key_bits, sc.seed)?;
    let report = run_security_battery_with_keys(&sc, &keys)?;
    println!("{:<18} {:<6} detail", "test", "result");
    for row in &report.rows {
        println!("{:<18} {:<6} {}", row.name, if row.passed { "True" } else { "False" }, row.detail);
    }
    let fmt = |p: [bool; 9]| p.iter().map(|b| if *b { "True" } else { "False" }).collect::<Vec<_>>().join(",");
    let ok = report.matches_expected();
    println!(
        "pattern {} (expected {}): {}",
        fmt(report.pattern()),
        fmt(SecurityTestReport::EXPECTED),
        if ok { "MATCH" } else { "MISMATCH" }
    );
    fs::write(cfg.out.join("security.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(ok)
}
