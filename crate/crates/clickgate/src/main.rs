use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clickgate::persist;
use clickgate::report::{render_comparison, render_report, ReportFormat};
use clickgate::trace::load_trace;
use clickgate::ProxyConfig;
use clickgate_core::party::registrable_domain;
use clickgate_core::replay::{compare, compare_timed, simulate};
use clickgate_core::{ExposureReport, PolicyKind, SitePair, SuffixRuleSet, Url};

const EXIT_USAGE: u8 = 64;
const EXIT_TRACE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "clickgate", version, about = "Interaction-gated third-party cookie proxy and policy replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the enforcing forward proxy and its control API.
    Serve(ServeArgs),
    /// Replay a session trace under one policy.
    Replay {
        trace: PathBuf,
        #[arg(long, default_value = "interaction", value_parser = parse_policy)]
        policy: PolicyKind,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long)]
        suffix_list: Option<PathBuf>,
    },
    /// Replay a session trace under several policies and compare exposure.
    Compare {
        trace: PathBuf,
        /// `all` or a comma-separated list.
        #[arg(long, default_value = "all", value_parser = parse_policies)]
        policies: PolicyList,
        #[command(flatten)]
        output: OutputArgs,
        /// Also measure decision wall time. Output is then not reproducible.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        suffix_list: Option<PathBuf>,
    },
    /// Edit a whitelist file offline.
    Whitelist {
        #[command(subcommand)]
        action: WhitelistAction,
    },
    /// Fetch the exposure report from a running proxy.
    Report {
        #[arg(long, default_value = "http://127.0.0.1:8081")]
        control: String,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Args)]
struct OutputArgs {
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Output file, `-` for standard output.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<SocketAddr>,
    #[arg(long)]
    control: Option<SocketAddr>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    suffix_list: Option<PathBuf>,
    #[arg(long)]
    whitelist: Option<PathBuf>,
    #[arg(long)]
    jar: Option<PathBuf>,
    #[arg(long)]
    drop_new_third_party_cookies: bool,
    #[arg(long)]
    tls_intercept: bool,
}

#[derive(Debug, Args)]
struct PairArgs {
    #[arg(long)]
    site: String,
    #[arg(long)]
    third_party: String,
}

#[derive(Debug, Subcommand)]
enum WhitelistAction {
    List {
        #[arg(long, default_value = "whitelist.json")]
        file: PathBuf,
    },
    Add {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value = "whitelist.json")]
        file: PathBuf,
    },
    Remove {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value = "whitelist.json")]
        file: PathBuf,
    },
}

#[derive(Debug, Clone)]
struct PolicyList(Vec<PolicyKind>);

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: clickgate_core::policy::UnknownPolicy| {
        format!("{e}; expected one of accept-all, block-third, visited, interaction")
    })
}

fn parse_policies(s: &str) -> Result<PolicyList, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(PolicyList(PolicyKind::ALL.to_vec()));
    }
    let mut list = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let p = parse_policy(part)?;
        if !list.contains(&p) {
            list.push(p);
        }
    }
    if list.is_empty() {
        return Err("no policies given".into());
    }
    Ok(PolicyList(list))
}

/// An error and the exit code it maps to.
struct Failure(u8, String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(1, e.to_string())
    }
}

fn load_rules(path: Option<&Path>) -> Result<SuffixRuleSet, Failure> {
    let Some(path) = path else { return Ok(SuffixRuleSet::bundled()) };
    let text =
        fs::read_to_string(path).map_err(|e| Failure(1, format!("cannot read suffix list {}: {e}", path.display())))?;
    SuffixRuleSet::parse(&text).map_err(|e| Failure(1, format!("invalid suffix list {}: {e}", path.display())))
}

fn emit(out: &Path, text: &str) -> Result<(), Failure> {
    if out == Path::new("-") {
        let mut stdout = io::stdout().lock();
        stdout.write_all(text.as_bytes())?;
        stdout.flush()?;
        return Ok(());
    }
    fs::write(out, text).map_err(|e| Failure(1, format!("cannot write {}: {e}", out.display())))
}

fn trace_at(path: &Path) -> Result<clickgate_core::SessionTrace, Failure> {
    load_trace(path).map_err(|e| Failure(EXIT_TRACE, e.to_string()))
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => ProxyConfig::load(path)?,
        None => ProxyConfig::default(),
    };
    config.apply_env(|var| std::env::var(var).ok())?;
    if let Some(a) = args.listen {
        config.listen_address = a;
    }
    if let Some(a) = args.control {
        config.control_address = a;
    }
    if let Some(p) = args.policy {
        config.policy = p;
    }
    if args.suffix_list.is_some() {
        config.suffix_list_path = args.suffix_list;
    }
    if args.whitelist.is_some() {
        config.whitelist_path = args.whitelist;
    }
    if args.jar.is_some() {
        config.jar_persistence_path = args.jar;
    }
    config.drop_new_third_party_cookies |= args.drop_new_third_party_cookies;
    config.tls_intercept |= args.tls_intercept;

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(clickgate::run(config))?;
    Ok(())
}

fn whitelist(action: WhitelistAction) -> Result<(), Failure> {
    let rules = SuffixRuleSet::bundled();
    let canonical = |d: &str| registrable_domain(d, &rules);
    let (file, edit) = match action {
        WhitelistAction::List { file } => {
            for entry in persist::load_whitelist(&file)? {
                println!("{}", entry.to_pair(canonical));
            }
            return Ok(());
        }
        WhitelistAction::Add { pair, file } => (file, Some((pair, true))),
        WhitelistAction::Remove { pair, file } => (file, Some((pair, false))),
    };
    let Some((pair, add)) = edit else { return Ok(()) };
    let pair = SitePair::new(canonical(&pair.third_party), canonical(&pair.site));
    if pair.third_party == pair.site {
        return Err(Failure(1, format!("third party and site are both {}", pair.site)));
    }
    let mut pairs: Vec<SitePair> = persist::load_whitelist(&file)?.iter().map(|e| e.to_pair(canonical)).collect();
    let present = pairs.contains(&pair);
    match (add, present) {
        (true, false) => pairs.push(pair),
        (false, true) => pairs.retain(|p| p != &pair),
        _ => return Ok(()),
    }
    pairs.sort();
    persist::save_whitelist(&file, &pairs)?;
    Ok(())
}

async fn fetch_report(control: &str) -> Result<ExposureReport, Failure> {
    use http_body_util::{BodyExt, Empty};
    use hyper_util::rt::TokioIo;

    let base = Url::parse(control).map_err(|e| Failure(1, format!("bad control URL {control}: {e}")))?;
    let stream = tokio::net::TcpStream::connect((base.host(), base.port_or_default()))
        .await
        .map_err(|e| Failure(1, format!("cannot reach control API at {control}: {e}")))?;
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await?;
    tokio::spawn(conn);
    let req = hyper::Request::get("/ctl/v1/report")
        .header(hyper::header::HOST, format!("{}:{}", base.host(), base.port_or_default()))
        .body(Empty::<bytes::Bytes>::new())?;
    let resp = sender.send_request(req).await?;
    let status = resp.status();
    let body = resp.into_body().collect().await?.to_bytes();
    if !status.is_success() {
        return Err(Failure(1, format!("control API answered {status}")));
    }
    Ok(serde_json::from_slice(&body)?)
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Serve(args) => serve(args),
        Command::Replay { trace, policy, output, suffix_list } => {
            let rules = load_rules(suffix_list.as_deref())?;
            let trace = trace_at(&trace)?;
            let report = simulate(&trace, policy, &rules);
            emit(&output.out, &render_report(&report, output.format))
        }
        Command::Compare { trace, policies, output, timing, suffix_list } => {
            let rules = load_rules(suffix_list.as_deref())?;
            let trace = trace_at(&trace)?;
            let comparison = if timing {
                let origin = std::time::Instant::now();
                let clock = move || origin.elapsed().as_nanos() as u64;
                compare_timed(&trace, &policies.0, &rules, &clock)
            } else {
                compare(&trace, &policies.0, &rules)
            };
            emit(&output.out, &render_comparison(&comparison, output.format))
        }
        Command::Whitelist { action } => whitelist(action),
        Command::Report { control, output } => {
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            let report = runtime.block_on(fetch_report(&control))?;
            emit(&output.out, &render_report(&report, output.format))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, message)) => {
            eprintln!("clickgate: {message}");
            ExitCode::from(code)
        }
    }
}
