use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = tsrec::cli::Cli::parse();
    match tsrec::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
