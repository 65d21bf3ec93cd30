use clap::Parser;

fn main() -> std::process::ExitCode {
    match negguide_cli::run(negguide_cli::Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
