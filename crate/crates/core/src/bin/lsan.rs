use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    ExitCode::from(lsan::cli::dispatch(&args).clamp(0, 255) as u8)
}
