use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = fednmt::cli::run_cli(std::env::args_os());
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}
